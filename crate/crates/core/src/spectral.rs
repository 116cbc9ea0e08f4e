//! Dense symmetric eigendecomposition and resolvent contour quadrature.

use faer::linalg::solvers::DenseSolveCore;
use faer::prelude::*;
use faer::{c64, Mat, Side};

use crate::error::{Error, Result};
use crate::hamiltonian::{BondList, PatternValues};
use crate::model::{ModelParams, QoIKind};
use crate::{norm, sub, Vec3};

/// Eigenpairs of a symmetric Hamiltonian in ascending order.
#[derive(Clone, Debug)]
pub struct SpectralData {
    pub eigenvalues: Vec<f64>,
    /// Columns are the eigenvectors `psi_s`.
    pub psi: Mat<f64>,
    /// Transpose of `psi`: column `l` holds `[psi_s]_l` for all `s`.
    pub phi: Mat<f64>,
}

/// Largest `|H_ij - H_ji|`.
pub fn asymmetry(h: &Mat<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..h.ncols() {
        for i in j + 1..h.nrows() {
            worst = worst.max((h[(i, j)] - h[(j, i)]).abs());
        }
    }
    worst
}

/// Full eigendecomposition. Each eigenvector is normalised so that its first
/// component with magnitude above `1e-12` is positive.
pub fn eig_sym(h: &Mat<f64>) -> Result<SpectralData> {
    let n = h.nrows();
    if h.ncols() != n {
        return Err(Error::NotSymmetric { asymmetry: f64::INFINITY });
    }
    let scale = 1.0 + h.norm_max();
    let asym = asymmetry(h);
    if asym > 1e-12 * scale || !asym.is_finite() {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    if n == 0 {
        return Ok(SpectralData { eigenvalues: vec![], psi: Mat::zeros(0, 0), phi: Mat::zeros(0, 0) });
    }
    let e = h.self_adjoint_eigen(Side::Lower).map_err(|_| Error::Eigen)?;
    let eigenvalues: Vec<f64> = e.S().column_vector().iter().copied().collect();
    let mut psi = e.U().to_owned();
    for s in 0..n {
        let mut col = psi.col_mut(s);
        let first = (0..n).find(|&i| col[i].abs() > 1e-12).unwrap_or(0);
        if col[first] < 0.0 {
            for i in 0..n {
                col[i] = -col[i];
            }
        }
    }
    let phi = psi.transpose().to_owned();
    Ok(SpectralData { eigenvalues, psi, phi })
}

impl SpectralData {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `[psi_s]_l` for all `s`.
    #[inline]
    pub fn site_column(&self, l: usize) -> &[f64] {
        self.phi.col(l).try_as_col_major().expect("owned matrix is column major").as_slice()
    }

    /// `sum_s w_s [psi_s]_l^2`.
    pub fn local_weighted(&self, l: usize, w: &[f64]) -> f64 {
        self.site_column(l).iter().zip(w).map(|(c, w)| w * c * c).sum()
    }

    /// Entries of `Psi diag(w) Psi^T` on the diagonal and on every bond.
    pub fn weighted_pattern(&self, bonds: &BondList, w: &[f64]) -> PatternValues {
        let n = self.len();
        let mut out = PatternValues::zeros(bonds);
        let weighted: Vec<Vec<f64>> = (0..n)
            .map(|l| self.site_column(l).iter().zip(w).map(|(c, w)| c * w).collect())
            .collect();
        for l in 0..n {
            out.diag[l] = weighted[l].iter().zip(self.site_column(l)).map(|(a, b)| a * b).sum();
        }
        for (k, b) in bonds.bonds.iter().enumerate() {
            out.bond[k] = weighted[b.i].iter().zip(self.site_column(b.j)).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Max residual `||H psi_s - lambda_s psi_s|| / (1 + |lambda_s|)` and max
    /// deviation of `Psi^T Psi` from the identity.
    pub fn check_invariants(&self, h: &Mat<f64>) -> (f64, f64) {
        let hp = h * &self.psi;
        let mut res: f64 = 0.0;
        for s in 0..self.len() {
            let mut r2 = 0.0;
            for i in 0..self.len() {
                let d = hp[(i, s)] - self.eigenvalues[s] * self.psi[(i, s)];
                r2 += d * d;
            }
            res = res.max(r2.sqrt() / (1.0 + self.eigenvalues[s].abs()));
        }
        let g = &self.phi * &self.psi;
        let mut orth: f64 = 0.0;
        for i in 0..self.len() {
            for j in 0..self.len() {
                let e = if i == j { 1.0 } else { 0.0 };
                orth = orth.max((g[(i, j)] - e).abs());
            }
        }
        (res, orth)
    }
}

/// Elliptic contour `z(theta) = c + a cos(theta) + i b sin(theta)` traversed
/// counter-clockwise, discretised with the periodic trapezoidal rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contour {
    pub center: f64,
    /// Real semi-axis.
    pub semi_real: f64,
    /// Imaginary semi-axis; must stay below `pi / beta`.
    pub semi_imag: f64,
    /// Initial node count of the adaptive rule.
    pub nodes: usize,
}

/// Largest node count tried before reporting non-convergence.
pub const MAX_CONTOUR_NODES: usize = 1 << 14;

/// Default real margin between spectrum and contour.
pub const CONTOUR_MARGIN: f64 = 1.0;

/// Gershgorin interval containing the spectrum of `h`.
pub fn gershgorin_bounds(h: &Mat<f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..h.nrows() {
        let r: f64 = (0..h.ncols()).filter(|&j| j != i).map(|j| h[(i, j)].abs()).sum();
        lo = lo.min(h[(i, i)] - r);
        hi = hi.max(h[(i, i)] + r);
    }
    (lo, hi)
}

impl Contour {
    /// Contour around `[lo, hi]` with real margin 1 and height `0.5 pi / beta`.
    pub fn around(lo: f64, hi: f64, beta: f64) -> Self {
        Contour {
            center: 0.5 * (lo + hi),
            semi_real: 0.5 * (hi - lo) + CONTOUR_MARGIN,
            semi_imag: 0.5 * std::f64::consts::PI / beta,
            nodes: 32,
        }
    }

    /// Contour enclosing the Gershgorin interval of `h`.
    pub fn enclosing(h: &Mat<f64>, beta: f64) -> Self {
        let (lo, hi) = gershgorin_bounds(h);
        Self::around(lo, hi, beta)
    }

    pub fn with_height_fraction(mut self, fraction: f64, beta: f64) -> Self {
        self.semi_imag = fraction * std::f64::consts::PI / beta;
        self
    }

    /// Checks the height bound and that `[lo, hi]` lies strictly inside.
    pub fn validate(&self, beta: f64, lo: f64, hi: f64) -> Result<()> {
        if !(self.semi_imag > 0.0 && self.semi_imag < std::f64::consts::PI / beta) {
            return Err(Error::config(format!(
                "contour half-height {} must lie in (0, pi/beta = {})",
                self.semi_imag,
                std::f64::consts::PI / beta
            )));
        }
        if !(lo > self.center - self.semi_real && hi < self.center + self.semi_real) {
            return Err(Error::config("contour does not enclose the spectrum"));
        }
        if self.nodes < 4 || !self.nodes.is_power_of_two() {
            return Err(Error::config("contour node count must be a power of two >= 4"));
        }
        Ok(())
    }

    fn point(&self, theta: f64) -> (c64, c64) {
        let (s, c) = theta.sin_cos();
        (
            c64::new(self.center + self.semi_real * c, self.semi_imag * s),
            c64::new(-self.semi_real * s, self.semi_imag * c),
        )
    }

    /// Adaptive evaluation of `-(1/2 pi i) oint g(z) dz` for `g` with
    /// `g(conj z) = conj g(z)`. Node sets are nested, so each doubling only
    /// evaluates the new nodes.
    pub fn integrate<F>(&self, mut g: F) -> Result<f64>
    where
        F: FnMut(c64) -> Result<c64>,
    {
        // values[k] = g(z_k) z'(theta_k) at theta_k = 2 pi k / m, k = 0..=m/2
        let mut m = self.nodes;
        let mut values = Vec::with_capacity(m / 2 + 1);
        for k in 0..=m / 2 {
            let (z, dz) = self.point(2.0 * std::f64::consts::PI * k as f64 / m as f64);
            values.push(g(z)? * dz);
        }
        let sum = |values: &[c64], m: usize| -> f64 {
            // -(1/2 pi i) * (2 pi / m) = i / m; conjugate pairs give 2 Re.
            let w = |v: c64| (c64::new(0.0, 1.0) * v).re / m as f64;
            let half = values.len() - 1;
            let mut s = w(values[0]) + w(values[half]);
            for v in &values[1..half] {
                s += 2.0 * w(*v);
            }
            s
        };
        let mut prev = sum(&values, m);
        loop {
            let m2 = 2 * m;
            let mut next = Vec::with_capacity(m2 / 2 + 1);
            for (k, v) in values.iter().enumerate() {
                next.push(*v);
                if k < values.len() - 1 {
                    let (z, dz) = self.point(2.0 * std::f64::consts::PI * (2 * k + 1) as f64 / m2 as f64);
                    next.push(g(z)? * dz);
                }
            }
            values = next;
            m = m2;
            let cur = sum(&values, m);
            let change = (cur - prev).abs();
            if change <= 1e-10 * cur.abs().max(1.0) {
                return Ok(cur);
            }
            if 2 * m > MAX_CONTOUR_NODES {
                return Err(Error::Quadrature { nodes: m, change });
            }
            prev = cur;
        }
    }
}

fn shifted(h: &Mat<f64>, z: c64) -> Mat<c64> {
    Mat::from_fn(h.nrows(), h.ncols(), |i, j| {
        let v = c64::new(h[(i, j)], 0.0);
        if i == j {
            v - z
        } else {
            v
        }
    })
}

/// `A(tau) = -(1/2 pi i) oint a(z, tau) Tr[(H - z)^-1] dz`.
pub fn trace_qoi_contour(
    h: &Mat<f64>,
    params: &ModelParams,
    kind: QoIKind,
    tau: f64,
    contour: &Contour,
) -> Result<f64> {
    let (lo, hi) = gershgorin_bounds(h);
    contour.validate(params.beta, lo, hi)?;
    contour.integrate(|z| {
        let inv = shifted(h, z).partial_piv_lu().inverse();
        let mut tr = c64::new(0.0, 0.0);
        for i in 0..h.nrows() {
            tr += inv[(i, i)];
        }
        Ok(params.kernel_c(kind, z, tau) * tr)
    })
}

/// Site-local part `-(1/2 pi i) oint a(z, tau) [(H - z)^-1]_ll dz`.
pub fn local_qoi_contour(
    h: &Mat<f64>,
    site: usize,
    params: &ModelParams,
    kind: QoIKind,
    tau: f64,
    contour: &Contour,
) -> Result<f64> {
    Error::check_index(site, h.nrows())?;
    let (lo, hi) = gershgorin_bounds(h);
    contour.validate(params.beta, lo, hi)?;
    let n = h.nrows();
    contour.integrate(|z| {
        let mut e = Mat::<c64>::zeros(n, 1);
        e[(site, 0)] = c64::new(1.0, 0.0);
        let x = shifted(h, z).partial_piv_lu().solve(&e);
        Ok(params.kernel_c(kind, z, tau) * x[(site, 0)])
    })
}

/// `(r_lk, |[(H - z)^-1]_lk|)` for every site `k`, sorted by distance.
pub fn resolvent_decay_probe(h: &Mat<f64>, pos: &[Vec3], z: c64, site: usize) -> Result<Vec<(f64, f64)>> {
    Error::check_index(site, h.nrows())?;
    let spec = eig_sym(h)?;
    let dist = spec
        .eigenvalues
        .iter()
        .map(|&l| (c64::new(l, 0.0) - z).norm())
        .fold(f64::INFINITY, f64::min);
    if dist <= 1e-8 {
        return Err(Error::IllConditioned { distance: dist });
    }
    let n = h.nrows();
    let mut e = Mat::<c64>::zeros(n, 1);
    e[(site, 0)] = c64::new(1.0, 0.0);
    let x = shifted(h, z).partial_piv_lu().solve(&e);
    let mut out: Vec<(f64, f64)> = (0..n).map(|k| (norm(&sub(&pos[k], &pos[site])), x[(k, 0)].norm())).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::assemble_open;
    use rand::{Rng, SeedableRng};

    fn random_sym(n: usize, seed: u64) -> Mat<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut a = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-1.0..1.0);
                a[(i, j)] = v;
                a[(j, i)] = v;
            }
        }
        a
    }

    fn cluster(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let side = (n as f64).sqrt().ceil() as usize;
        (0..n)
            .map(|k| [(k % side) as f64 + rng.gen_range(-0.1..0.1), (k / side) as f64 + rng.gen_range(-0.1..0.1), 0.0])
            .collect()
    }

    #[test]
    fn dimer_closed_form() {
        let (a, b) = (0.3, -0.8);
        let h = faer::mat![[a, b], [b, a]];
        let s = eig_sym(&h).unwrap();
        assert!((s.eigenvalues[0] - (a - b.abs())).abs() < 1e-15);
        assert!((s.eigenvalues[1] - (a + b.abs())).abs() < 1e-15);
        let r = 0.5f64.sqrt();
        // lower state (1, -sgn b)/sqrt2 = (1, 1)/sqrt2 for b < 0
        assert!((s.psi[(0, 0)] - r).abs() < 1e-15 && (s.psi[(1, 0)] - r).abs() < 1e-15);
        assert!((s.psi[(0, 1)] - r).abs() < 1e-15 && (s.psi[(1, 1)] + r).abs() < 1e-15);
    }

    #[test]
    fn diagonal_sorted() {
        let h = faer::mat![[3.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 2.0]];
        assert_eq!(eig_sym(&h).unwrap().eigenvalues, vec![-1.0, 2.0, 3.0]);
    }

    #[test]
    fn rejects_nonsymmetric() {
        let h = faer::mat![[1.0, 0.5], [0.4, 1.0]];
        assert!(matches!(eig_sym(&h), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn random_invariants_and_sign_convention() {
        let h = random_sym(8, 4);
        let s = eig_sym(&h).unwrap();
        let (res, orth) = s.check_invariants(&h);
        assert!(res <= 1e-10, "{res}");
        assert!(orth <= 1e-12, "{orth}");
        for k in 0..8 {
            let first = (0..8).map(|i| s.psi[(i, k)]).find(|v| v.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
        assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn contour_matches_eigen_sum() {
        let m = ModelParams::default();
        let h = assemble_open(&cluster(10, 1), &m).unwrap();
        let s = eig_sym(&h).unwrap();
        let tau = s.eigenvalues[4] + 0.05;
        let c = Contour::enclosing(&h, m.beta);
        for kind in QoIKind::ALL {
            let exact: f64 = s.eigenvalues.iter().map(|&l| m.kernel(kind, l, tau)).sum();
            let q = trace_qoi_contour(&h, &m, kind, tau, &c).unwrap();
            assert!((q - exact).abs() <= 1e-8, "{kind:?}: {q} vs {exact}");
        }
    }

    #[test]
    fn one_by_one() {
        let m = ModelParams::default();
        let h = faer::mat![[0.37]];
        let c = Contour::enclosing(&h, m.beta);
        for kind in QoIKind::ALL {
            let q = trace_qoi_contour(&h, &m, kind, 0.1, &c).unwrap();
            assert!((q - m.kernel(kind, 0.37, 0.1)).abs() <= 1e-10);
        }
    }

    #[test]
    fn contour_height_independence() {
        let m = ModelParams::default();
        let h = assemble_open(&cluster(9, 8), &m).unwrap();
        let base = Contour::enclosing(&h, m.beta);
        let a = trace_qoi_contour(&h, &m, QoIKind::Grand, 0.2, &base.with_height_fraction(0.35, m.beta)).unwrap();
        let b = trace_qoi_contour(&h, &m, QoIKind::Grand, 0.2, &base.with_height_fraction(0.65, m.beta)).unwrap();
        assert!((a - b).abs() <= 1e-9);
        assert!(base.with_height_fraction(1.0, m.beta).validate(m.beta, 0.0, 0.0).is_err());
    }

    #[test]
    fn local_contour_sums_and_matches_eigenvectors() {
        let m = ModelParams::default();
        let h = assemble_open(&cluster(8, 2), &m).unwrap();
        let s = eig_sym(&h).unwrap();
        let c = Contour::enclosing(&h, m.beta);
        let tau = 0.4;
        let total = trace_qoi_contour(&h, &m, QoIKind::Number, tau, &c).unwrap();
        let w: Vec<f64> = s.eigenvalues.iter().map(|&l| m.kernel(QoIKind::Number, l, tau)).collect();
        let mut sum = 0.0;
        for l in 0..8 {
            let q = local_qoi_contour(&h, l, &m, QoIKind::Number, tau, &c).unwrap();
            assert!((q - s.local_weighted(l, &w)).abs() <= 1e-8);
            sum += q;
        }
        assert!((sum - total).abs() <= 1e-9);
        let dimer = assemble_open(&[[0.0; 3], [1.0, 0.0, 0.0]], &m).unwrap();
        let cd = Contour::enclosing(&dimer, m.beta);
        let a = local_qoi_contour(&dimer, 0, &m, QoIKind::Helmholtz, 0.1, &cd).unwrap();
        let b = local_qoi_contour(&dimer, 1, &m, QoIKind::Helmholtz, 0.1, &cd).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn quadrature_converges_geometrically() {
        let m = ModelParams::default();
        let h = assemble_open(&cluster(6, 3), &m).unwrap();
        let s = eig_sym(&h).unwrap();
        let exact: f64 = s.eigenvalues.iter().map(|&l| m.kernel(QoIKind::Grand, l, 0.3)).sum();
        let c = Contour::enclosing(&h, m.beta);
        let mut errs = Vec::new();
        for p in 7..12 {
            let fixed = Contour { nodes: 1 << p, ..c };
            // one doubling step only: evaluate with the tolerance loop bypassed
            let mut vals = 0.0;
            let mm = fixed.nodes;
            for k in 0..mm {
                let th = 2.0 * std::f64::consts::PI * k as f64 / mm as f64;
                let (z, dz) = fixed.point(th);
                let inv = shifted(&h, z).partial_piv_lu().inverse();
                let mut tr = c64::new(0.0, 0.0);
                for i in 0..h.nrows() {
                    tr += inv[(i, i)];
                }
                vals += (c64::new(0.0, 1.0) * m.kernel_c(QoIKind::Grand, z, 0.3) * tr * dz).re / mm as f64;
            }
            errs.push((vals - exact).abs());
        }
        // once resolved, doubling at least halves the error
        let resolved: Vec<f64> = errs.iter().copied().filter(|e| *e > 1e-13).collect();
        for w in resolved.windows(2) {
            assert!(w[1] < 0.5 * w[0], "{errs:?}");
        }
    }

    #[test]
    fn resolvent_probe() {
        let h = faer::mat![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]];
        let pos = vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let t = resolvent_decay_probe(&h, &pos, c64::new(1.5, 0.3), 0).unwrap();
        assert_eq!(t[1].1, 0.0);
        assert_eq!(t[2].1, 0.0);
        assert!(matches!(
            resolvent_decay_probe(&h, &pos, c64::new(2.0, 1e-10), 0),
            Err(Error::IllConditioned { .. })
        ));

        let m = ModelParams::default();
        let chain: Vec<Vec3> = (0..60).map(|i| [i as f64, 0.0, 0.0]).collect();
        let hc = assemble_open(&chain, &m).unwrap();
        let s = eig_sym(&hc).unwrap();
        let mid = 0.5 * (s.eigenvalues[0] + s.eigenvalues[59]);
        let slope = |im: f64| {
            let t = resolvent_decay_probe(&hc, &chain, c64::new(mid, im), 30).unwrap();
            let pts: Vec<(f64, f64)> = t.iter().filter(|p| p.0 > 0.5 && p.0 < 25.0).map(|p| (p.0, p.1.ln())).collect();
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            sxy / sxx
        };
        let s1 = slope(0.3);
        let s2 = slope(0.9);
        assert!(s1 < 0.0);
        assert!(s2 <= s1 + 1e-3);
    }
}
