//! Anti-plane screw dislocation in a projected two-dimensional lattice: far-field
//! predictor, slip operators, elastic strains and the finite-domain
//! equilibrium problem.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_canonical, solve_grand_canonical, EquilibriumProblem, EquilibriumSolution, ForceConstants, Mode, SolverSettings};
use crate::error::{Error, Result};
use crate::hamiltonian::Geometry;
use crate::lattice::{partition_about, BravaisLattice, Partition, GEOMETRY_TOL};
use crate::model::{ModelParams, QoIKind};
use crate::observables::{local_qoi, System};
use crate::{norm, sub, Vec3};

/// Which half-line carries the jump of the predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CutSide {
    /// `{x2 = x^2, x1 >= x^1}`; angles in `[0, 2 pi)`.
    Right,
    /// `{x2 = x^2, x1 <= x^1}`; angles in `(-pi, pi]`.
    Left,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScrewDislocation {
    /// Projected two-dimensional lattice.
    pub lattice: BravaisLattice,
    /// Core position `x^` (off every lattice row).
    pub core: [f64; 2],
    /// Out-of-plane Burgers vector component, equal to the column period.
    pub b3: f64,
    /// In-plane Burgers vector, zero for a pure screw.
    pub b12: [f64; 2],
    /// Core regularisation radius.
    pub r_hat: f64,
    pub cut: CutSide,
}

/// Smooth step: 0 on `(-inf, 0]`, 1 on `[1, inf)`.
pub fn eta(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / t).exp();
    let b = (-1.0 / (1.0 - t)).exp();
    a / (a + b)
}

impl ScrewDislocation {
    /// Triangular lattice with unit spacing, core at the centroid of the
    /// triangle `(0, 0), (1, 0), (1/2, sqrt(3)/2)`, `b3 = 1`, `r^ = 2`.
    pub fn triangular_default() -> Self {
        ScrewDislocation {
            lattice: BravaisLattice::triangular(1.0),
            core: [0.5, 3f64.sqrt() / 6.0],
            b3: 1.0,
            b12: [0.0, 0.0],
            r_hat: 2.0,
            cut: CutSide::Right,
        }
    }

    pub fn with_cut(&self, cut: CutSide) -> Self {
        ScrewDislocation { cut, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lattice.dim() != 2 {
            return Err(Error::config("dislocation needs a two-dimensional lattice"));
        }
        if !(self.b3 > 0.0) || !(self.r_hat > 0.0) {
            return Err(Error::config("b3 and r^ must be positive"));
        }
        // no lattice site may lie on the branch cut
        let reach = 4.0 * self.lattice.nearest_neighbor_distance();
        let c = [self.core[0], self.core[1], 0.0];
        for p in self.lattice.points_in_ball(&c, reach) {
            if (p[1] - self.core[1]).abs() <= GEOMETRY_TOL {
                return Err(Error::config("dislocation core lies on a lattice row"));
            }
        }
        Ok(())
    }

    fn angle(&self, x: &[f64; 2]) -> Result<f64> {
        let d = [x[0] - self.core[0], x[1] - self.core[1]];
        if d[0] == 0.0 && d[1] == 0.0 {
            return Err(Error::domain("predictor is singular at the dislocation core"));
        }
        let a = d[1].atan2(d[0]);
        Ok(match self.cut {
            CutSide::Right => {
                if a < 0.0 {
                    a + 2.0 * PI
                } else {
                    a
                }
            }
            CutSide::Left => a,
        })
    }

    /// `xi(x) = x - b12 / (2 pi) eta(|x - x^| / r^) arg(x - x^)`.
    pub fn xi(&self, x: &[f64; 2]) -> Result<[f64; 2]> {
        let r = ((x[0] - self.core[0]).powi(2) + (x[1] - self.core[1]).powi(2)).sqrt();
        let s = eta(r / self.r_hat) * self.angle(x)? / (2.0 * PI);
        Ok([x[0] - self.b12[0] * s, x[1] - self.b12[1] * s])
    }

    /// Out-of-plane predictor `u0_3(x) = b3 / (2 pi) arg(x - x^)`.
    pub fn predictor_u0(&self, x: &[f64; 2]) -> Result<f64> {
        Ok(self.b3 / (2.0 * PI) * self.angle(x)?)
    }

    /// `S0 u0`: unchanged above the slip plane, shifted by `b12` and lowered
    /// by `b3` below it.
    pub fn slipped_predictor(&self, x: &[f64; 2]) -> Result<f64> {
        if x[1] > self.core[1] {
            self.predictor_u0(x)
        } else {
            Ok(self.predictor_u0(&[x[0] - self.b12[0], x[1] - self.b12[1]])? - self.b3)
        }
    }

    /// `Omega_Gamma = {x1 > x^1 + r^ + b1}`.
    pub fn in_slip_region(&self, x: &[f64; 2]) -> bool {
        x[0] > self.core[0] + self.r_hat + self.b12[0]
    }

    /// Base configuration `y0(l) = (l, u0_3(l))`.
    pub fn base_positions(&self, sites: &[Vec3]) -> Result<Vec<Vec3>> {
        sites.iter().map(|s| Ok([s[0], s[1], self.predictor_u0(&[s[0], s[1]])?])).collect()
    }

    pub fn core3(&self) -> Vec3 {
        [self.core[0], self.core[1], 0.0]
    }
}

/// Lattice sites of a ball around the core with an index lookup.
#[derive(Clone, Debug)]
pub struct SiteSet {
    pub sites: Vec<Vec3>,
    index: HashMap<[i64; 2], usize>,
}

fn site_key(x: &[f64]) -> [i64; 2] {
    [(x[0] * 1e6).round() as i64, (x[1] * 1e6).round() as i64]
}

impl SiteSet {
    pub fn new(sites: Vec<Vec3>) -> Self {
        let index = sites.iter().enumerate().map(|(i, s)| (site_key(s), i)).collect();
        SiteSet { sites, index }
    }

    pub fn ball(disl: &ScrewDislocation, radius: f64) -> Self {
        SiteSet::new(disl.lattice.points_in_ball(&disl.core3(), radius))
    }

    pub fn find(&self, x: &[f64]) -> Option<usize> {
        self.index.get(&site_key(x)).copied()
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

/// `S u(l)`: `u(l)` above the slip plane, `u(l - b12)` below. Sites whose
/// source lies outside the set get `None`.
pub fn slip_s(disl: &ScrewDislocation, set: &SiteSet, u: &[f64]) -> Vec<Option<f64>> {
    shift_below(disl, set, u, -1.0)
}

/// `S* u(l)`: `u(l)` above the slip plane, `u(l + b12)` below.
pub fn slip_s_adjoint(disl: &ScrewDislocation, set: &SiteSet, u: &[f64]) -> Vec<Option<f64>> {
    shift_below(disl, set, u, 1.0)
}

fn shift_below(disl: &ScrewDislocation, set: &SiteSet, u: &[f64], sign: f64) -> Vec<Option<f64>> {
    set.sites
        .iter()
        .map(|s| {
            if s[1] > disl.core[1] {
                Some(u[set.find(s).expect("own site")])
            } else {
                let src = [s[0] + sign * disl.b12[0], s[1] + sign * disl.b12[1]];
                set.find(&src).map(|k| u[k])
            }
        })
        .collect()
}

/// Elastic strain and corrected displacement differences at one site.
#[derive(Clone, Debug, PartialEq)]
pub struct StrainStencil {
    pub site: usize,
    /// Lattice offsets `rho`.
    pub rho: Vec<Vec3>,
    /// `e_rho(l)`.
    pub e: Vec<f64>,
    /// `D'_rho u(l)`.
    pub du: Vec<f64>,
}

/// Strain stencils of the predictor and of an out-of-plane field `u` at site
/// `l` over all offsets with `|rho| <= radius` whose target lies in the set.
pub fn strain(disl: &ScrewDislocation, set: &SiteSet, u: &[f64], l: usize, radius: f64) -> Result<StrainStencil> {
    Error::check_index(l, set.len())?;
    let x = set.sites[l];
    let slip = disl.in_slip_region(&[x[0], x[1]]);
    let su = if slip { Some(slip_s(disl, set, u)) } else { None };
    let mut rho = Vec::new();
    let mut e = Vec::new();
    let mut du = Vec::new();
    for r in disl.lattice.points_in_ball(&[0.0; 3], radius) {
        if norm(&r) == 0.0 {
            continue;
        }
        let t = [x[0] + r[0], x[1] + r[1]];
        let Some(k) = set.find(&t) else { continue };
        if slip {
            // S* shifts the evaluation site by b12 below the plane; for the
            // slipped fields both ends are taken at the shifted site
            let base = if x[1] > disl.core[1] { [x[0], x[1]] } else { [x[0] + disl.b12[0], x[1] + disl.b12[1]] };
            let tb = [base[0] + r[0], base[1] + r[1]];
            e.push(disl.slipped_predictor(&tb)? - disl.slipped_predictor(&base)?);
            let su = su.as_ref().expect("slip field");
            let (Some(i0), Some(i1)) = (set.find(&base), set.find(&tb)) else { continue };
            match (su[i0], su[i1]) {
                (Some(a), Some(b)) => du.push(b - a),
                _ => {
                    e.pop();
                    continue;
                }
            }
        } else {
            e.push(disl.predictor_u0(&t)? - disl.predictor_u0(&[x[0], x[1]])?);
            du.push(u[k] - u[l]);
        }
        rho.push(r);
    }
    Ok(StrainStencil { site: l, rho, e, du })
}

/// A finite-domain dislocation problem: sites in `B_{R + R_b}(x^)`, the inner
/// ball free, out-of-plane displacements only.
#[derive(Clone, Debug)]
pub struct DislocationDomain {
    pub disl: ScrewDislocation,
    pub set: SiteSet,
    pub partition: Partition,
    pub r: f64,
    pub r_b: f64,
}

impl DislocationDomain {
    pub fn new(disl: &ScrewDislocation, r: f64, r_b: f64) -> Result<Self> {
        disl.validate()?;
        let set = SiteSet::ball(disl, r + r_b);
        let partition = partition_about(&set.sites, &disl.core3(), r, r_b)?;
        Ok(DislocationDomain { disl: disl.clone(), set, partition, r, r_b })
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Ok(Geometry { pos: self.disl.base_positions(&self.set.sites)?, cell: None, column: Some(self.disl.b3) })
    }

    pub fn problem(&self, params: &ModelParams, ne: f64) -> Result<EquilibriumProblem> {
        self.problem_in(params, Mode::Canonical { ne })
    }

    /// Anti-plane relaxation problem in the given ensemble.
    pub fn problem_in(&self, params: &ModelParams, mode: Mode) -> Result<EquilibriumProblem> {
        let mut p = EquilibriumProblem::new(*params, self.geometry()?, self.partition.free.clone(), vec![2], mode)?;
        p.skip_interpenetration = true;
        Ok(p)
    }
}

/// Force constants for anti-plane preconditioning of dislocation problems.
pub fn antiplane_force_constants(params: &ModelParams, disl: &ScrewDislocation, r_pc: f64) -> Result<ForceConstants> {
    ForceConstants::homogeneous(params, &disl.lattice, Some(disl.b3), &[2], r_pc)
}

/// Canonical relaxation of the dislocation core region with `Ne = N + offset`,
/// started from `u = 0` and `tau0`.
pub fn solve_dislocation(
    domain: &DislocationDomain,
    params: &ModelParams,
    ne_offset: f64,
    tau0: f64,
    settings: SolverSettings,
    preconditioner: Option<Arc<ForceConstants>>,
) -> Result<(EquilibriumProblem, EquilibriumSolution)> {
    let n = domain.set.len() as f64;
    let mut prob = domain.problem(params, n + ne_offset)?.with_settings(settings);
    prob.preconditioner = preconditioner;
    let u0 = vec![[0.0; 3]; prob.len()];
    let sol = solve_canonical(&prob, &u0, tau0)?;
    Ok((prob, sol))
}

/// Grand-canonical relaxation of the dislocation core region at fixed `tau`,
/// started from `u = 0`.
pub fn solve_dislocation_grand(
    domain: &DislocationDomain,
    params: &ModelParams,
    tau: f64,
    settings: SolverSettings,
    preconditioner: Option<Arc<ForceConstants>>,
) -> Result<(EquilibriumProblem, EquilibriumSolution)> {
    let mut prob = domain.problem_in(params, Mode::GrandCanonical { tau })?.with_settings(settings);
    prob.preconditioner = preconditioner;
    let u0 = vec![[0.0; 3]; prob.len()];
    let sol = solve_grand_canonical(&prob, &u0)?;
    Ok((prob, sol))
}

/// Largest difference of the local quantity at `probes` between the actual
/// configuration `y0 + u` and the configuration rebuilt around each probe
/// from `e + D'u`.
pub fn slip_invariance_residual(
    domain: &DislocationDomain,
    params: &ModelParams,
    u3: &[f64],
    probes: &[usize],
    kind: QoIKind,
    tau: f64,
) -> Result<f64> {
    let disl = &domain.disl;
    let base = disl.base_positions(&domain.set.sites)?;
    let pos: Vec<Vec3> = base.iter().zip(u3).map(|(b, u)| [b[0], b[1], b[2] + u]).collect();
    let sys = System::new(Geometry { pos, cell: None, column: Some(disl.b3) }, *params)?;
    let mut worst = 0.0f64;
    let radius = 2.0 * (domain.r + domain.r_b) + 1.0;
    for &l in probes {
        let a = local_qoi(&sys.spec, params, l, kind, tau)?;
        let st = strain(disl, &domain.set, u3, l, radius)?;
        let x = domain.set.sites[l];
        let z0 = base[l][2] + u3[l];
        let mut rebuilt = vec![[f64::NAN; 3]; domain.set.len()];
        rebuilt[l] = [x[0], x[1], z0];
        for (k, r) in st.rho.iter().enumerate() {
            let t = domain.set.find(&[x[0] + r[0], x[1] + r[1]]).expect("stencil target");
            rebuilt[t] = [x[0] + r[0], x[1] + r[1], z0 + st.e[k] + st.du[k]];
        }
        if rebuilt.iter().flatten().any(|c| c.is_nan()) {
            return Err(Error::domain("strain stencil does not cover the domain"));
        }
        let alt = System::new(Geometry { pos: rebuilt, cell: None, column: Some(disl.b3) }, *params)?;
        let b = local_qoi(&alt.spec, params, l, kind, tau)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Largest change of the total quantities when the cut moves to the other
/// half-line.
pub fn branch_cut_residual(domain: &DislocationDomain, params: &ModelParams, u3: &[f64], tau: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    let build = |d: &ScrewDislocation| -> Result<System> {
        let base = d.base_positions(&domain.set.sites)?;
        let pos = base.iter().zip(u3).map(|(b, u)| [b[0], b[1], b[2] + u]).collect();
        System::new(Geometry { pos, cell: None, column: Some(d.b3) }, *params)
    };
    let a = build(&domain.disl.with_cut(CutSide::Right))?;
    let b = build(&domain.disl.with_cut(CutSide::Left))?;
    for kind in QoIKind::ALL {
        worst = worst.max((a.total_qoi(kind, tau) - b.total_qoi(kind, tau)).abs());
    }
    Ok(worst)
}

/// `(|l - x^|, max over nearest-neighbour sigma of |e_sigma(l)|)` for every
/// site of the set away from the core.
pub fn predictor_strain_profile(disl: &ScrewDislocation, set: &SiteSet, r_min: f64) -> Result<Vec<(f64, f64)>> {
    let zero = vec![0.0; set.len()];
    let nn = disl.lattice.nearest_neighbor_distance() * (1.0 + 1e-9);
    let mut out = Vec::new();
    for l in 0..set.len() {
        let r = norm(&sub(&set.sites[l], &disl.core3()));
        if r < r_min {
            continue;
        }
        let st = strain(disl, set, &zero, l, nn)?;
        if st.rho.len() < 6 {
            continue;
        }
        out.push((r, st.e.iter().fold(0.0f64, |a, b| a.max(b.abs()))));
    }
    Ok(out)
}

/// Writes `site l_x l_y u0_3` rows.
pub fn write_predictor(path: &Path, disl: &ScrewDislocation, set: &SiteSet, header: &str) -> Result<()> {
    let mut s = String::new();
    for line in header.lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str("# site l_x l_y u0_3\n");
    for (i, p) in set.sites.iter().enumerate() {
        let _ = writeln!(s, "{i} {:.16e} {:.16e} {:.16e}", p[0], p[1], disl.predictor_u0(&[p[0], p[1]])?);
    }
    std::fs::write(path, s)?;
    Ok(())
}
