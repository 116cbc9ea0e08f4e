//! Grand-canonical forces, electron-count gradients and the blocks of the
//! coupled displacement/chemical-potential Jacobian.

use faer::Mat;
use rayon::prelude::*;

use crate::error::Result;
use crate::hamiltonian::{
    assemble_from_bonds, d_hamiltonian_from_bonds, directional_dh, grad_trace, BondList, PatternValues,
};
use crate::model::{ModelParams, QoIKind};
use crate::observables::{solve_mu, ChemicalPotential, System};
use crate::spectral::{eig_sym, SpectralData};
use crate::{add, scale, Vec3};

/// One force vector per site.
pub type ForceField = Vec<Vec3>;

/// A displacement coordinate `(site, axis)`.
pub type Coord = (usize, usize);

/// Coordinates of the listed sites along the listed axes, site-major.
pub fn coords_of(sites: &[usize], axes: &[usize]) -> Vec<Coord> {
    sites.iter().flat_map(|&s| axes.iter().map(move |&a| (s, a))).collect()
}

pub fn gather(field: &[Vec3], coords: &[Coord]) -> Vec<f64> {
    coords.iter().map(|&(s, a)| field[s][a]).collect()
}

pub fn scatter(values: &[f64], coords: &[Coord], n: usize) -> Vec<Vec3> {
    let mut out = vec![[0.0; 3]; n];
    for (&(s, a), v) in coords.iter().zip(values) {
        out[s][a] = *v;
    }
    out
}

fn weights(spec: &SpectralData, params: &ModelParams, kind: QoIKind, tau: f64) -> Vec<f64> {
    spec.eigenvalues.iter().map(|&l| params.kernel_dx(kind, l, tau)).collect()
}

/// `F_l = -dG/dy(l) = -2 sum_s f(lambda_s - tau) <psi_s| dH/dy(l) |psi_s>`.
pub fn force(sys: &System, tau: f64) -> ForceField {
    let p = sys.spec.weighted_pattern(&sys.bonds, &weights(&sys.spec, &sys.params, QoIKind::Grand, tau));
    grad_trace(&sys.bonds, &sys.params, &p).iter().map(|g| scale(g, -1.0)).collect()
}

/// The same force, one coordinate at a time from the sparse derivative
/// matrices and per-state expectation values.
pub fn force_hellmann_feynman(sys: &System, tau: f64, coords: &[Coord]) -> Vec<f64> {
    let w = weights(&sys.spec, &sys.params, QoIKind::Grand, tau);
    coords
        .par_iter()
        .map(|&(m, a)| -state_expectation(sys, &w, m, a))
        .collect()
}

/// `sum_s w_s <psi_s| dH/d[y(m)]_a |psi_s>`.
fn state_expectation(sys: &System, w: &[f64], m: usize, a: usize) -> f64 {
    let dh = d_hamiltonian_from_bonds(&sys.bonds, &sys.params, m, a);
    let mut acc = 0.0;
    for (s, ws) in w.iter().enumerate() {
        if *ws == 0.0 {
            continue;
        }
        let col = sys.spec.psi.col(s);
        let v: f64 = dh.entries.iter().map(|&(i, j, x)| col[i] * x * col[j]).sum();
        acc += ws * v;
    }
    acc
}

/// Force field at `mu(y)` for electron count `ne`; equals `-dE/dy` including
/// the implicit dependence of `mu` on `y`.
pub fn grad_helmholtz(sys: &System, ne: f64) -> Result<(ForceField, ChemicalPotential)> {
    let mu = solve_mu(&sys.spec, &sys.params, ne)?;
    Ok((force(sys, mu.mu), mu))
}

/// `dN/dtau = -2 sum_s f'(lambda_s - tau)`, strictly positive.
pub fn dn_dtau(spec: &SpectralData, params: &ModelParams, tau: f64) -> f64 {
    -weights(spec, params, QoIKind::Number, tau).iter().sum::<f64>()
}

/// `dN/d[y(m)]_a = 2 sum_s f'(lambda_s - tau) <psi_s| dH/d[y(m)]_a |psi_s>`
/// by per-coordinate expectation values.
pub fn dn_du(sys: &System, tau: f64, coords: &[Coord]) -> Vec<f64> {
    let w = weights(&sys.spec, &sys.params, QoIKind::Number, tau);
    coords.par_iter().map(|&(m, a)| state_expectation(sys, &w, m, a)).collect()
}

/// `dF/dtau` on every site, from the weighted pattern with weights `2 f'`.
pub fn dtau_force(sys: &System, tau: f64) -> ForceField {
    let p = sys.spec.weighted_pattern(&sys.bonds, &weights(&sys.spec, &sys.params, QoIKind::Number, tau));
    grad_trace(&sys.bonds, &sys.params, &p)
}

/// Force field at new positions sharing the bond topology of `bonds`.
pub fn force_at(bonds: &BondList, params: &ModelParams, pos: &[Vec3], tau: f64) -> Result<ForceField> {
    let mut b = bonds.clone();
    b.refresh(pos);
    let spec = eig_sym(&assemble_from_bonds(&b, params))?;
    let w = weights(&spec, params, QoIKind::Grand, tau);
    let p = spec.weighted_pattern(&b, &w);
    Ok(grad_trace(&b, params, &p).iter().map(|g| scale(g, -1.0)).collect())
}

/// Finite-difference step `1e-5 (1 + |u|_inf)`.
pub fn default_fd_step(u: &[Vec3]) -> f64 {
    let m = u.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
    1e-5 * (1.0 + m)
}

/// Asymmetry of the finite-difference force block above which a warning is raised.
pub const JACOBIAN_ASYMMETRY_WARN: f64 = 1e-5;

/// Blocks of the Jacobian of `T(u, tau) = (-F, N / Ne - 1)` over a set of
/// displacement coordinates.
#[derive(Clone, Debug)]
pub struct CoupledJacobian {
    /// `-dF/du`, symmetrised.
    pub neg_du_force: Mat<f64>,
    /// `dF/dtau`.
    pub dtau_force: Vec<f64>,
    /// `dN/du`.
    pub du_count: Vec<f64>,
    /// `dN/dtau`.
    pub dtau_count: f64,
    /// `max |A - A^T| / max(1, max |A|)` before symmetrisation.
    pub asymmetry: f64,
    pub warning: bool,
}

impl CoupledJacobian {
    /// `[-dF/du, -dF/dtau; dN/du / Ne, dN/dtau / Ne]`.
    pub fn matrix(&self, ne: f64) -> Mat<f64> {
        let n = self.dtau_force.len();
        Mat::from_fn(n + 1, n + 1, |i, j| match (i < n, j < n) {
            (true, true) => self.neg_du_force[(i, j)],
            (true, false) => -self.dtau_force[i],
            (false, true) => self.du_count[j] / ne,
            (false, false) => self.dtau_count / ne,
        })
    }

    /// Largest `|dF/dtau - dN/du|` over all coordinates.
    pub fn cross_residual(&self) -> f64 {
        self.dtau_force
            .iter()
            .zip(&self.du_count)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Force block by central differences of analytic forces, the remaining
/// blocks analytically.
pub fn coupled_jacobian(sys: &System, coords: &[Coord], tau: f64, step: f64) -> Result<CoupledJacobian> {
    let n = coords.len();
    let cols: Vec<Vec<f64>> = coords
        .par_iter()
        .map(|&(m, a)| -> Result<Vec<f64>> {
            let mut plus = sys.geom.pos.clone();
            let mut minus = sys.geom.pos.clone();
            plus[m][a] += step;
            minus[m][a] -= step;
            let fp = force_at(&sys.bonds, &sys.params, &plus, tau)?;
            let fm = force_at(&sys.bonds, &sys.params, &minus, tau)?;
            Ok(coords.iter().map(|&(s, b)| -(fp[s][b] - fm[s][b]) / (2.0 * step)).collect())
        })
        .collect::<Result<_>>()?;
    let a = Mat::from_fn(n, n, |i, j| cols[j][i]);
    let mut asym = 0.0f64;
    let mut amax = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
            amax = amax.max(a[(i, j)].abs());
        }
    }
    let asymmetry = asym / amax.max(1.0);
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let warning = asymmetry > JACOBIAN_ASYMMETRY_WARN;
    if warning {
        log::warn!("finite-difference force block asymmetry {asymmetry:.3e}; step {step:.3e} may be too coarse");
    }
    Ok(CoupledJacobian {
        neg_du_force: sym,
        dtau_force: gather(&dtau_force(sys, tau), coords),
        du_count: dn_du(sys, tau, coords),
        dtau_count: dn_dtau(&sys.spec, &sys.params, tau),
        asymmetry,
        warning,
    })
}

/// Analytic first-order response of forces and electron number to a
/// displacement direction `v` and a change `s` of `tau`, by first-order
/// perturbation theory in the eigenbasis.
pub struct LinearResponse<'a> {
    sys: &'a System,
    tau: f64,
    /// Divided differences of `2 f(. - tau)` over eigenvalue pairs.
    ldiv: Mat<f64>,
    /// `2 f'(lambda_s - tau)`.
    dw: Vec<f64>,
    /// Occupation pattern `Psi diag(2 f) Psi^T`.
    occ: PatternValues,
}

impl<'a> LinearResponse<'a> {
    pub fn new(sys: &'a System, tau: f64) -> Self {
        let p = &sys.params;
        let lam = &sys.spec.eigenvalues;
        let w = weights(&sys.spec, p, QoIKind::Grand, tau);
        let dw = weights(&sys.spec, p, QoIKind::Number, tau);
        let n = lam.len();
        let ldiv = Mat::from_fn(n, n, |s, t| {
            let d = lam[s] - lam[t];
            if d.abs() > 1e-6 {
                (w[s] - w[t]) / d
            } else {
                p.kernel_dx(QoIKind::Number, 0.5 * (lam[s] + lam[t]), tau)
            }
        });
        let occ = sys.spec.weighted_pattern(&sys.bonds, &w);
        LinearResponse { sys, tau, ldiv, dw, occ }
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `(dF[v, s], dN[v, s])` for every site.
    pub fn apply(&self, v: &[Vec3], s: f64) -> (ForceField, f64) {
        let sys = self.sys;
        let bonds = &sys.bonds;
        let params = &sys.params;
        let n = sys.len();
        let phi = &sys.spec.phi;
        let psi = &sys.spec.psi;
        // Y = Phi dH, column i = sum_j dH_ji phi(:, j)
        let dh = directional_dh(bonds, params, v);
        let mut y = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            let d = dh.diag[i];
            if d != 0.0 {
                for s in 0..n {
                    y[(s, i)] += d * phi[(s, i)];
                }
            }
        }
        for (b, &x) in bonds.bonds.iter().zip(&dh.bond) {
            if x == 0.0 {
                continue;
            }
            for s in 0..n {
                y[(s, b.i)] += x * phi[(s, b.j)];
                y[(s, b.j)] += x * phi[(s, b.i)];
            }
        }
        let m = &y * psi;
        let mut dn = 0.0;
        let mut x = Mat::from_fn(n, n, |s, t| self.ldiv[(s, t)] * m[(s, t)]);
        for st in 0..n {
            x[(st, st)] = self.dw[st] * (m[(st, st)] - s);
            dn += x[(st, st)];
        }
        // dP_ij = sum_s phi(s, i) (X Phi)(s, j)
        let z = &x * phi;
        let mut dp = PatternValues::zeros(bonds);
        let dotc = |i: usize, j: usize| -> f64 { (0..n).map(|s| phi[(s, i)] * z[(s, j)]).sum() };
        for i in 0..n {
            dp.diag[i] = dotc(i, i);
        }
        for (k, b) in bonds.bonds.iter().enumerate() {
            dp.bond[k] = dotc(b.i, b.j);
        }
        let g1 = grad_trace(bonds, params, &dp);
        let g2 = self.frozen_occupation_term(v);
        let df = g1.iter().zip(&g2).map(|(a, b)| scale(&add(a, b), -1.0)).collect();
        (df, dn)
    }

    /// Derivative of `grad Tr(P H(y))` along `v` at frozen `P`, by central
    /// differences of the exact gradient.
    fn frozen_occupation_term(&self, v: &[Vec3]) -> Vec<Vec3> {
        let vmax = v.iter().flatten().fold(0.0f64, |a, b| a.max(b.abs()));
        let n = self.sys.len();
        if vmax == 0.0 {
            return vec![[0.0; 3]; n];
        }
        let eps = 1e-5 / vmax;
        let shifted = |sgn: f64| -> Vec<Vec3> {
            let pos: Vec<Vec3> =
                self.sys.geom.pos.iter().zip(v).map(|(p, d)| add(p, &scale(d, sgn * eps))).collect();
            let mut b = self.sys.bonds.clone();
            b.refresh(&pos);
            grad_trace(&b, &self.sys.params, &self.occ)
        };
        let (gp, gm) = (shifted(1.0), shifted(-1.0));
        gp.iter()
            .zip(&gm)
            .map(|(a, b)| [(a[0] - b[0]) / (2.0 * eps), (a[1] - b[1]) / (2.0 * eps), (a[2] - b[2]) / (2.0 * eps)])
            .collect()
    }
}
