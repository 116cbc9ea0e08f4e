//! Finite-domain equilibrium: damped Newton on the coupled force-balance and
//! electron-count equations (canonical) or on force balance at fixed `tau`
//! (grand canonical).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forces::{
    coords_of, coupled_jacobian, default_fd_step, force, gather, scatter, Coord, ForceField, LinearResponse,
};
use crate::hamiltonian::Geometry;
use crate::lattice::{build_torus, validate_configuration, BravaisLattice};
use crate::model::{ModelParams, QoIKind};
use crate::observables::System;
use crate::{add, norm, sub, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Solve for displacements and `mu` at electron count `ne`.
    Canonical { ne: f64 },
    /// Solve for displacements at fixed `tau`.
    GrandCanonical { tau: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    /// `||F||_inf` at success.
    pub force_tol: f64,
    /// `|N - Ne| / Ne` at success (canonical).
    pub count_tol: f64,
    pub armijo: f64,
    pub max_halvings: usize,
    /// Largest number of unknowns solved with the dense finite-difference Jacobian.
    pub dense_limit: usize,
    pub gmres_restart: usize,
    pub gmres_max_iterations: usize,
    /// Relative singular-value threshold for a singular dense Jacobian.
    pub singular_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 100,
            force_tol: 1e-9,
            count_tol: 1e-10,
            armijo: 1e-4,
            max_halvings: 30,
            dense_limit: 200,
            gmres_restart: 100,
            gmres_max_iterations: 2000,
            singular_tol: 1e-13,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EquilibriumProblem {
    pub params: ModelParams,
    /// Configuration at zero unknown displacement; its positions label the sites.
    pub base: Geometry,
    /// Sites whose displacements are unknowns. All others stay fixed.
    pub free: Vec<usize>,
    /// Displacement components that are unknowns.
    pub axes: Vec<usize>,
    pub mode: Mode,
    pub settings: SolverSettings,
    pub preconditioner: Option<Arc<ForceConstants>>,
    /// Skip the non-interpenetration check (anti-plane problems leave in-plane
    /// distances unchanged).
    pub skip_interpenetration: bool,
}

impl EquilibriumProblem {
    pub fn new(params: ModelParams, base: Geometry, free: Vec<usize>, axes: Vec<usize>, mode: Mode) -> Result<Self> {
        params.validate()?;
        let n = base.len();
        for &s in &free {
            Error::check_index(s, n)?;
        }
        if axes.is_empty() || axes.iter().any(|&a| a > 2) {
            return Err(Error::config("displacement axes must be a non-empty subset of 0, 1, 2"));
        }
        if let Mode::Canonical { ne } = mode {
            if !(ne > 0.0 && ne < 2.0 * n as f64) {
                return Err(Error::domain(format!("electron count {ne} outside (0, {})", 2 * n)));
            }
        }
        let mut free = free;
        free.sort_unstable();
        free.dedup();
        Ok(EquilibriumProblem {
            params,
            base,
            free,
            axes,
            mode,
            settings: SolverSettings::default(),
            preconditioner: None,
            skip_interpenetration: false,
        })
    }

    pub fn with_settings(mut self, settings: SolverSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_preconditioner(mut self, pc: Arc<ForceConstants>) -> Self {
        self.preconditioner = Some(pc);
        self
    }

    pub fn coords(&self) -> Vec<Coord> {
        coords_of(&self.free, &self.axes)
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        matches!(self.mode, Mode::Canonical { .. })
    }

    /// Clamped sites: every site that is not free.
    pub fn clamped_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.len()];
        for &s in &self.free {
            m[s] = false;
        }
        m
    }

    pub fn geometry(&self, u: &[Vec3]) -> Geometry {
        self.base.displaced(u)
    }

    fn check_displacement(&self, u: &[Vec3]) -> Result<()> {
        if u.len() != self.len() {
            return Err(Error::domain("displacement length differs from site count"));
        }
        let clamped = self.clamped_mask();
        for (i, d) in u.iter().enumerate() {
            if clamped[i] && d.iter().any(|&c| c != 0.0) {
                return Err(Error::domain(format!("clamped site {i} has a nonzero displacement")));
            }
        }
        Ok(())
    }
}

/// Force and count residual at one state.
#[derive(Clone, Debug)]
pub struct Residual {
    /// Forces on free sites, zero elsewhere.
    pub force: ForceField,
    /// `N / Ne - 1` (canonical) or zero.
    pub count: f64,
    /// `N(y, tau)`.
    pub electrons: f64,
    pub system: System,
}

impl Residual {
    pub fn force_inf(&self) -> f64 {
        self.force.iter().flatten().fold(0.0, |a, b| a.max(b.abs()))
    }
}

/// `T(u, tau) = (-F, N / Ne - 1)` at `y = base + u`.
pub fn residual(problem: &EquilibriumProblem, u: &[Vec3], tau: f64) -> Result<Residual> {
    problem.check_displacement(u)?;
    let geom = problem.geometry(u);
    if !problem.skip_interpenetration {
        validate_configuration(&problem.base.pos, &geom.pos, problem.params.m_accum, geom.cell.as_ref())
            .into_result()?;
    }
    let system = System::new(geom, problem.params)?;
    let full = force(&system, tau);
    let mut f = vec![[0.0; 3]; problem.len()];
    for &(s, a) in &problem.coords() {
        f[s][a] = full[s][a];
    }
    let electrons = system.total_qoi(QoIKind::Number, tau);
    let count = match problem.mode {
        Mode::Canonical { ne } => electrons / ne - 1.0,
        Mode::GrandCanonical { .. } => 0.0,
    };
    Ok(Residual { force: f, count, electrons, system })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub force_inf: f64,
    pub count_residual: f64,
    pub step_length: f64,
    pub linear_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumSolution {
    /// Displacements of every site (exact zeros on clamped sites).
    pub u: Vec<Vec3>,
    /// `mu` (canonical) or the fixed `tau` (grand canonical).
    pub tau: f64,
    pub mode: Mode,
    pub force_residual: f64,
    /// `|N - Ne| / Ne`, zero in grand-canonical mode.
    pub count_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub linear_solver: String,
    pub trace: Vec<IterationRecord>,
}

impl EquilibriumSolution {
    pub fn mu(&self) -> f64 {
        self.tau
    }
}

fn merit(r: &Residual, coords: &[Coord], canonical: bool) -> f64 {
    let f = gather(&r.force, coords);
    let mut s: f64 = f.iter().map(|x| x * x).sum();
    if canonical {
        s += r.count * r.count;
    }
    s
}

fn converged(r: &Residual, s: &SolverSettings, canonical: bool) -> bool {
    r.force_inf() <= s.force_tol && (!canonical || r.count.abs() <= s.count_tol)
}

/// Canonical solve from `u0` and initial `tau0`.
pub fn solve_canonical(problem: &EquilibriumProblem, u0: &[Vec3], tau0: f64) -> Result<EquilibriumSolution> {
    if !problem.is_canonical() {
        return Err(Error::config("solve_canonical needs a canonical problem"));
    }
    newton(problem, u0, tau0)
}

/// Grand-canonical solve at the problem's fixed `tau`.
pub fn solve_grand_canonical(problem: &EquilibriumProblem, u0: &[Vec3]) -> Result<EquilibriumSolution> {
    match problem.mode {
        Mode::GrandCanonical { tau } => newton(problem, u0, tau),
        Mode::Canonical { .. } => Err(Error::config("solve_grand_canonical needs a grand-canonical problem")),
    }
}

/// Newton direction for `J d = -T`.
struct Direction {
    du: Vec<f64>,
    dtau: f64,
    forcing: f64,
    linear_iterations: usize,
    solver: &'static str,
}

fn dense_direction(problem: &EquilibriumProblem, r: &Residual, u: &[Vec3], tau: f64) -> Result<Direction> {
    let coords = problem.coords();
    let j = coupled_jacobian(&r.system, &coords, tau, default_fd_step(u))?;
    let canonical = problem.is_canonical();
    let a = match problem.mode {
        Mode::Canonical { ne } => j.matrix(ne),
        Mode::GrandCanonical { .. } => j.neg_du_force.clone(),
    };
    let n = a.nrows();
    let sv = a.singular_values().map_err(|_| Error::Eigen)?;
    let (smax, smin) = (sv[0], sv[n - 1]);
    if !(smin > problem.settings.singular_tol * smax) {
        return Err(Error::Stability { smallest_singular_value: smin });
    }
    let mut rhs = Mat::<f64>::zeros(n, 1);
    for (k, &(s, ax)) in coords.iter().enumerate() {
        rhs[(k, 0)] = r.force[s][ax];
    }
    if canonical {
        rhs[(n - 1, 0)] = -r.count;
    }
    let x = a.partial_piv_lu().solve(&rhs);
    let du = (0..coords.len()).map(|k| x[(k, 0)]).collect();
    let dtau = if canonical { x[(n - 1, 0)] } else { 0.0 };
    Ok(Direction { du, dtau, forcing: 0.0, linear_iterations: 0, solver: "dense-fd" })
}

fn krylov_direction(problem: &EquilibriumProblem, r: &Residual, tau: f64) -> Result<Direction> {
    let coords = problem.coords();
    let n = problem.len();
    let nc = coords.len();
    let canonical = problem.is_canonical();
    let ne = match problem.mode {
        Mode::Canonical { ne } => ne,
        Mode::GrandCanonical { .. } => 1.0,
    };
    let lr = LinearResponse::new(&r.system, tau);
    let dim = nc + canonical as usize;
    let apply = |x: &[f64]| -> Vec<f64> {
        let s = if canonical { x[nc] } else { 0.0 };
        let (df, dn) = lr.apply(&scatter(&x[..nc], &coords, n), s);
        let mut y: Vec<f64> = gather(&df, &coords).iter().map(|v| -v).collect();
        if canonical {
            y.push(dn / ne);
        }
        y
    };
    let dn_tau = crate::forces::dn_dtau(&r.system.spec, &r.system.params, tau) / ne;
    let pc = problem.preconditioner.as_ref().map(|fc| fc.assemble(&problem.base.pos, &coords)).transpose()?;
    let precond = |x: &[f64]| -> Vec<f64> {
        let mut y = match &pc {
            Some(p) => p.solve(&x[..nc]),
            None => x[..nc].to_vec(),
        };
        if canonical {
            y.push(x[nc] / dn_tau);
        }
        y
    };
    let mut b = gather(&r.force, &coords);
    if canonical {
        b.push(-r.count);
    }
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let forcing = bnorm.min(0.1);
    let out = gmres(apply, precond, &b, forcing, problem.settings.gmres_restart, problem.settings.gmres_max_iterations);
    debug_assert_eq!(out.x.len(), dim);
    log::debug!("gmres: {} iterations, relative residual {:.3e}", out.iterations, out.relative_residual);
    Ok(Direction {
        du: out.x[..nc].to_vec(),
        dtau: if canonical { out.x[nc] } else { 0.0 },
        forcing: out.relative_residual.min(0.999),
        linear_iterations: out.iterations,
        solver: "gmres",
    })
}

fn newton(problem: &EquilibriumProblem, u0: &[Vec3], tau0: f64) -> Result<EquilibriumSolution> {
    let settings = &problem.settings;
    let coords = problem.coords();
    let canonical = problem.is_canonical();
    let mut u = u0.to_vec();
    let mut tau = tau0;
    let mut r = residual(problem, &u, tau)?;
    let mut phi = merit(&r, &coords, canonical);
    let mut trace = vec![IterationRecord {
        iteration: 0,
        force_inf: r.force_inf(),
        count_residual: r.count.abs(),
        step_length: 0.0,
        linear_iterations: 0,
    }];
    let dense = coords.len() + canonical as usize <= settings.dense_limit;
    let solver = if dense { "dense-fd" } else { "gmres" };
    let finish = |u: Vec<Vec3>, tau: f64, r: &Residual, it: usize, ok: bool, trace: Vec<IterationRecord>| {
        EquilibriumSolution {
            u,
            tau,
            mode: problem.mode,
            force_residual: r.force_inf(),
            count_residual: r.count.abs(),
            iterations: it,
            converged: ok,
            linear_solver: solver.to_string(),
            trace,
        }
    };
    for it in 1..=settings.max_iterations {
        if converged(&r, settings, canonical) {
            return Ok(finish(u, tau, &r, it - 1, true, trace));
        }
        let dir = if dense { dense_direction(problem, &r, &u, tau)? } else { krylov_direction(problem, &r, tau)? };
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.max_halvings {
            let step = scatter(&dir.du.iter().map(|v| alpha * v).collect::<Vec<_>>(), &coords, problem.len());
            let ut: Vec<Vec3> = u.iter().zip(&step).map(|(a, b)| add(a, b)).collect();
            let tt = tau + alpha * dir.dtau;
            if let Ok(rt) = residual(problem, &ut, tt) {
                let pt = merit(&rt, &coords, canonical);
                if pt <= (1.0 - 2.0 * settings.armijo * alpha * (1.0 - dir.forcing)) * phi {
                    accepted = Some((ut, tt, rt, pt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((ut, tt, rt, pt)) = accepted else {
            let best = finish(u, tau, &r, it, false, trace);
            return Err(Error::NonConvergence {
                iterations: it,
                residual: phi.sqrt(),
                best: Some(Box::new(best)),
            });
        };
        u = ut;
        tau = tt;
        r = rt;
        phi = pt;
        trace.push(IterationRecord {
            iteration: it,
            force_inf: r.force_inf(),
            count_residual: r.count.abs(),
            step_length: alpha,
            linear_iterations: dir.linear_iterations,
        });
        log::debug!(
            "newton {it} ({}): |F| = {:.3e}, count = {:.3e}, step = {alpha}",
            dir.solver,
            r.force_inf(),
            r.count.abs()
        );
    }
    if converged(&r, settings, canonical) {
        return Ok(finish(u, tau, &r, settings.max_iterations, true, trace));
    }
    let best = finish(u, tau, &r, settings.max_iterations, false, trace);
    Err(Error::NonConvergence {
        iterations: settings.max_iterations,
        residual: phi.sqrt(),
        best: Some(Box::new(best)),
    })
}

/// Result of a GMRES solve.
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Restarted GMRES with right preconditioning for `A x = b`, stopping at
/// relative residual `tol`.
pub fn gmres<A, P>(apply: A, precond: P, b: &[f64], tol: f64, restart: usize, max_iterations: usize) -> GmresOutcome
where
    A: Fn(&[f64]) -> Vec<f64>,
    P: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let nrm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let bnorm = nrm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return GmresOutcome { x, iterations: 0, relative_residual: 0.0 };
    }
    let mut total = 0;
    let mut rel;
    while total < max_iterations {
        let ax = apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let beta = nrm(&r);
        rel = beta / bnorm;
        if rel <= tol {
            break;
        }
        let m = restart.min(max_iterations - total).max(1);
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|c| c / beta).collect()];
        let mut z: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let zk = precond(&v[k]);
            let mut w = apply(&zk);
            z.push(zk);
            // modified Gram-Schmidt, applied twice for stability
            for _ in 0..2 {
                for (i, vi) in v.iter().enumerate() {
                    let d: f64 = w.iter().zip(vi).map(|(a, c)| a * c).sum();
                    h[i][k] += d;
                    for (wj, vj) in w.iter_mut().zip(vi) {
                        *wj -= d * vj;
                    }
                }
            }
            let hn = nrm(&w);
            h[k + 1][k] = hn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let den = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if den == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= tol || hn == 0.0 || total >= max_iterations {
                break;
            }
            v.push(w.iter().map(|c| c / hn).collect());
        }
        // back substitution
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (yi, zi) in y.iter().zip(&z) {
            for (xj, zj) in x.iter_mut().zip(zi) {
                *xj += yi * zj;
            }
        }
        if rel <= tol || k_used == 0 {
            break;
        }
    }
    let ax = apply(&x);
    let r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
    GmresOutcome { x, iterations: total, relative_residual: nrm(&r) / bnorm }
}

/// Force constants of the homogeneous crystal, `Phi_ab(rho) = d^2 G /
/// du_a(0) du_b(rho)` at fixed `tau`, truncated at `r_pc` with the acoustic
/// sum rule restored.
#[derive(Clone, Debug)]
pub struct ForceConstants {
    pub lattice: BravaisLattice,
    pub axes: Vec<usize>,
    pub r_pc: f64,
    /// `(rho, Phi(rho))`, including `rho = 0`.
    pub blocks: Vec<(Vec3, [[f64; 3]; 3])>,
}

/// Factorised preconditioner matrix over a set of coordinates.
pub enum Factored {
    Cholesky(faer::linalg::solvers::Llt<f64>),
    Lu(faer::linalg::solvers::PartialPivLu<f64>),
}

impl Factored {
    pub fn solve(&self, x: &[f64]) -> Vec<f64> {
        let rhs = Mat::from_fn(x.len(), 1, |i, _| x[i]);
        let y = match self {
            Factored::Cholesky(c) => c.solve(&rhs),
            Factored::Lu(l) => l.solve(&rhs),
        };
        (0..x.len()).map(|i| y[(i, 0)]).collect()
    }
}

fn key(v: &Vec3) -> [i64; 3] {
    [(v[0] * 1e6).round() as i64, (v[1] * 1e6).round() as i64, (v[2] * 1e6).round() as i64]
}

impl ForceConstants {
    /// Computes force constants on a homogeneous torus (optionally with the
    /// out-of-plane column period) by linear response at its own half-filling
    /// Fermi level.
    pub fn homogeneous(
        params: &ModelParams,
        lattice: &BravaisLattice,
        column: Option<f64>,
        axes: &[usize],
        r_pc: f64,
    ) -> Result<Self> {
        let a = lattice.nearest_neighbor_distance();
        let reach = 2.0 * (r_pc + params.rc) + 2.0;
        let l = ((reach / a).ceil() as usize).max(6);
        let (sites, cell) = build_torus(lattice, l, false)?;
        let geom = Geometry { pos: sites.clone(), cell: Some(cell.clone()), column };
        let sys = System::new(geom, *params)?;
        let mu = sys.solve_mu(sys.len() as f64)?.mu;
        let lr = LinearResponse::new(&sys, mu);
        let origin = sites
            .iter()
            .position(|p| norm(p) < 1e-9)
            .ok_or_else(|| Error::config("torus has no site at the origin"))?;
        let mut cols = Vec::new();
        for &ax in axes {
            let mut v = vec![[0.0; 3]; sites.len()];
            v[origin][ax] = 1.0;
            cols.push(lr.apply(&v, 0.0).0);
        }
        let mut blocks: Vec<(Vec3, [[f64; 3]; 3])> = Vec::new();
        for (j, p) in sites.iter().enumerate() {
            // minimum-image offset from the origin site
            let mut best = sub(p, &sites[origin]);
            for s in cell.unit_shifts() {
                let c = add(&sub(p, &sites[origin]), &s);
                if norm(&c) < norm(&best) {
                    best = c;
                }
            }
            if norm(&best) > r_pc || j == origin {
                continue;
            }
            let mut blk = [[0.0; 3]; 3];
            for (ia, &a_ax) in axes.iter().enumerate() {
                for &b_ax in axes {
                    blk[a_ax][b_ax] = -cols[ia][j][b_ax];
                }
            }
            blocks.push((best, blk));
        }
        let mut diag = [[0.0; 3]; 3];
        for (_, b) in &blocks {
            for i in 0..3 {
                for k in 0..3 {
                    diag[i][k] -= b[i][k];
                }
            }
        }
        // symmetrise the self block
        for i in 0..3 {
            for k in 0..i {
                let m = 0.5 * (diag[i][k] + diag[k][i]);
                diag[i][k] = m;
                diag[k][i] = m;
            }
        }
        blocks.push(([0.0; 3], diag));
        Ok(ForceConstants { lattice: lattice.clone(), axes: axes.to_vec(), r_pc, blocks })
    }

    /// Dense matrix `K[(i, a), (j, b)] = Phi_ab(x_j - x_i)` over `coords`,
    /// using in-plane offsets of `reference`, factorised.
    pub fn assemble(&self, reference: &[Vec3], coords: &[Coord]) -> Result<Factored> {
        let table: HashMap<[i64; 3], [[f64; 3]; 3]> = self.blocks.iter().map(|(r, b)| (key(r), *b)).collect();
        let d = self.lattice.dim();
        let inplane = |p: &Vec3| -> Vec3 {
            let mut q = [0.0; 3];
            q[..d].copy_from_slice(&p[..d]);
            q
        };
        let n = coords.len();
        let mut k = Mat::<f64>::zeros(n, n);
        for (i, &(si, ai)) in coords.iter().enumerate() {
            for (j, &(sj, aj)) in coords.iter().enumerate() {
                let rho = sub(&inplane(&reference[sj]), &inplane(&reference[si]));
                if norm(&rho) > self.r_pc + 1e-9 {
                    continue;
                }
                if let Some(b) = table.get(&key(&rho)) {
                    k[(i, j)] = b[ai][aj];
                }
            }
        }
        let ks = Mat::from_fn(n, n, |i, j| 0.5 * (k[(i, j)] + k[(j, i)]));
        match ks.llt(Side::Lower) {
            Ok(c) => Ok(Factored::Cholesky(c)),
            Err(_) => {
                log::debug!("preconditioner is not positive definite; using LU");
                Ok(Factored::Lu(ks.partial_piv_lu()))
            }
        }
    }
}

/// Writes `<stem>.dat` (per-site table) and `<stem>.json` (summary).
pub fn write_solution(stem: &Path, problem: &EquilibriumProblem, sol: &EquilibriumSolution, header: &str) -> Result<()> {
    let r = residual(problem, &sol.u, sol.tau).ok();
    let clamped = problem.clamped_mask();
    let mut s = String::new();
    for line in header.lines() {
        let _ = writeln!(s, "# {line}");
    }
    s.push_str("# site l_x l_y l_z u_x u_y u_z f_x f_y f_z clamped\n");
    for i in 0..problem.len() {
        let l = problem.base.pos[i];
        let f = r.as_ref().map(|r| r.force[i]).unwrap_or([f64::NAN; 3]);
        let _ = write!(s, "{i}");
        for v in l.iter().chain(&sol.u[i]).chain(&f) {
            let _ = write!(s, " {v:.16e}");
        }
        let _ = writeln!(s, " {}", clamped[i] as u8);
    }
    std::fs::write(stem.with_extension("dat"), s)?;
    let summary = serde_json::json!({
        "mu": sol.tau,
        "mode": sol.mode,
        "iterations": sol.iterations,
        "force_residual": sol.force_residual,
        "count_residual": sol.count_residual,
        "converged": sol.converged,
        "linear_solver": sol.linear_solver,
        "trace": sol.trace,
    });
    std::fs::write(
        stem.with_extension("json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?,
    )?;
    Ok(())
}
