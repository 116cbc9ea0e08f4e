//! Total and site-local quantities of interest, chemical potentials and the
//! Fermi level of the homogeneous crystal.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{assemble_from_bonds, BlochShell, BondList, Geometry};
use crate::lattice::{build_torus, BravaisLattice};
use crate::model::{ModelParams, QoIKind};
use crate::spectral::{eig_sym, SpectralData};
use crate::{norm, Vec3};

/// A geometry with its bond list and eigendecomposition.
#[derive(Clone, Debug)]
pub struct System {
    pub params: ModelParams,
    pub geom: Geometry,
    pub bonds: BondList,
    pub spec: SpectralData,
}

impl System {
    pub fn new(geom: Geometry, params: ModelParams) -> Result<Self> {
        params.validate()?;
        let bonds = BondList::new(&geom, &params)?;
        let h = assemble_from_bonds(&bonds, &params);
        let spec = eig_sym(&h)?;
        Ok(System { params, geom, bonds, spec })
    }

    pub fn len(&self) -> usize {
        self.geom.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geom.is_empty()
    }

    pub fn total_qoi(&self, kind: QoIKind, tau: f64) -> f64 {
        total_qoi(&self.spec, &self.params, kind, tau)
    }

    pub fn local_qoi(&self, site: usize, kind: QoIKind, tau: f64) -> Result<f64> {
        local_qoi(&self.spec, &self.params, site, kind, tau)
    }

    pub fn solve_mu(&self, ne: f64) -> Result<ChemicalPotential> {
        solve_mu(&self.spec, &self.params, ne)
    }
}

/// `sum_s a(lambda_s, tau)`.
pub fn total_qoi(spec: &SpectralData, params: &ModelParams, kind: QoIKind, tau: f64) -> f64 {
    spec.eigenvalues.iter().map(|&l| params.kernel(kind, l, tau)).sum()
}

/// `sum_s a(lambda_s, tau) [psi_s]_l^2`.
pub fn local_qoi(spec: &SpectralData, params: &ModelParams, site: usize, kind: QoIKind, tau: f64) -> Result<f64> {
    Error::check_index(site, spec.len())?;
    let w: Vec<f64> = spec.eigenvalues.iter().map(|&l| params.kernel(kind, l, tau)).collect();
    Ok(spec.local_weighted(site, &w))
}

/// All site-local values at once.
pub fn local_qoi_all(spec: &SpectralData, params: &ModelParams, kind: QoIKind, tau: f64) -> Vec<f64> {
    let w: Vec<f64> = spec.eigenvalues.iter().map(|&l| params.kernel(kind, l, tau)).collect();
    (0..spec.len()).map(|l| spec.local_weighted(l, &w)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChemicalPotential {
    pub mu: f64,
    /// `|N(y, mu) - Ne|`.
    pub residual: f64,
    pub iterations: usize,
}

/// `dN/dtau = -2 sum_s f'(lambda_s - tau) > 0`.
pub fn dn_dtau_eigs(eigs: &[f64], params: &ModelParams, tau: f64) -> f64 {
    eigs.iter().map(|&l| -2.0 * params.fermi_deriv(l - tau)).sum()
}

/// Unique `mu` with `2 sum_s f(lambda_s - mu) = ne`.
pub fn solve_mu(spec: &SpectralData, params: &ModelParams, ne: f64) -> Result<ChemicalPotential> {
    solve_mu_eigs(&spec.eigenvalues, params, ne)
}

pub fn solve_mu_eigs(eigs: &[f64], params: &ModelParams, ne: f64) -> Result<ChemicalPotential> {
    let n = eigs.len() as f64;
    if !(ne > 0.0 && ne < 2.0 * n) {
        return Err(Error::domain(format!("electron count {ne} outside (0, {})", 2.0 * n)));
    }
    let count = |t: f64| -> f64 { eigs.iter().map(|&l| params.kernel(QoIKind::Number, l, t)).sum() };
    let slack = 10.0 / params.beta;
    let mut lo = eigs[0] - slack;
    let mut hi = eigs[eigs.len() - 1] + slack;
    while count(lo) >= ne {
        lo -= slack;
    }
    while count(hi) <= ne {
        hi += slack;
    }
    let tol = 1e-12 * ne.max(1.0);
    let mut tau = {
        // interpolate between the bracket ends for the first guess
        let (nl, nh) = (count(lo), count(hi));
        lo + (ne - nl) / (nh - nl) * (hi - lo)
    };
    for it in 1..=200 {
        let c = count(tau);
        let r = c - ne;
        if r.abs() <= tol {
            return Ok(ChemicalPotential { mu: tau, residual: r.abs(), iterations: it });
        }
        if r > 0.0 {
            hi = tau;
        } else {
            lo = tau;
        }
        let d = dn_dtau_eigs(eigs, params, tau);
        let mut next = tau - r / d;
        if !(d > 0.0) || !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (hi - lo) <= 4.0 * f64::EPSILON * (1.0 + tau.abs()) {
            return Ok(ChemicalPotential { mu: tau, residual: r.abs(), iterations: it });
        }
        tau = next;
    }
    let r = (count(tau) - ne).abs();
    Ok(ChemicalPotential { mu: tau, residual: r, iterations: 200 })
}

/// Helmholtz free energy `E(y) = E(y, mu(y))` at electron count `ne`.
pub fn helmholtz_energy(spec: &SpectralData, params: &ModelParams, ne: f64) -> Result<(f64, ChemicalPotential)> {
    let mu = solve_mu(spec, params, ne)?;
    Ok((total_qoi(spec, params, QoIKind::Helmholtz, mu.mu), mu))
}

/// Grand potential `G(y, tau)`.
pub fn grand_potential(spec: &SpectralData, params: &ModelParams, tau: f64) -> f64 {
    total_qoi(spec, params, QoIKind::Grand, tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FermiMethod {
    BlochQuadrature,
    SupercellExtrapolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FermiLevelHom {
    pub mu_hom: f64,
    pub method: FermiMethod,
    /// Final resolution: k-points per axis, or torus size per axis.
    pub resolution: usize,
    /// `(resolution, mu)` for every refinement level.
    pub history: Vec<(usize, f64)>,
}

/// Midpoint k-grid values `lambda(k)` with `n` points per reciprocal axis.
pub fn bloch_grid(shell: &BravaisLattice, sym: &BlochShell, n: usize) -> Vec<f64> {
    let d = shell.dim();
    let b = shell.reciprocal();
    let total = n.pow(d as u32);
    let mut out = Vec::with_capacity(total);
    let mut m = vec![0usize; d];
    for _ in 0..total {
        let mut k = [0.0; 3];
        for j in 0..d {
            let t = (m[j] as f64 + 0.5) / n as f64;
            for c in 0..3 {
                k[c] += t * b[j][c];
            }
        }
        out.push(sym.eval(&k));
        for j in 0..d {
            m[j] += 1;
            if m[j] < n {
                break;
            }
            m[j] = 0;
        }
    }
    out
}

/// Root of `mean f(lambda - mu) = 1/2` over a sample of band energies.
pub fn half_filling_level(lams: &[f64], params: &ModelParams) -> f64 {
    let n = lams.len() as f64;
    let g = |mu: f64| lams.iter().map(|&l| params.fermi(l - mu)).sum::<f64>() / n - 0.5;
    let dg = |mu: f64| -lams.iter().map(|&l| params.fermi_deriv(l - mu)).sum::<f64>() / n;
    let mut lo = lams.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = lams.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let v = g(mu);
        if v == 0.0 {
            break;
        }
        if v > 0.0 {
            hi = mu;
        } else {
            lo = mu;
        }
        let d = dg(mu);
        let mut next = mu - v / d;
        if !(d > 0.0) || !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - mu).abs() <= 1e-15 * (1.0 + mu.abs()) || hi - lo <= 4.0 * f64::EPSILON * (1.0 + mu.abs()) {
            mu = next;
            break;
        }
        mu = next;
    }
    mu
}

fn max_bloch_resolution(d: usize) -> usize {
    match d {
        1 => 1 << 22,
        2 => 4096,
        _ => 160,
    }
}

/// Fermi level from midpoint Brillouin-zone quadrature, doubling the grid
/// from `n_k` until successive values differ by at most `1e-10`.
pub fn fermi_level_bloch(
    params: &ModelParams,
    lattice: &BravaisLattice,
    column: Option<f64>,
    n_k: usize,
) -> Result<FermiLevelHom> {
    let shell = BlochShell::new(params, lattice, column)?;
    let mut n = n_k.max(2);
    let mut history = Vec::new();
    let mut prev = half_filling_level(&bloch_grid(lattice, &shell, n), params);
    history.push((n, prev));
    loop {
        if 2 * n > max_bloch_resolution(lattice.dim()) {
            return Ok(FermiLevelHom { mu_hom: prev, method: FermiMethod::BlochQuadrature, resolution: n, history });
        }
        n *= 2;
        let mu = half_filling_level(&bloch_grid(lattice, &shell, n), params);
        history.push((n, mu));
        if (mu - prev).abs() <= 1e-10 {
            return Ok(FermiLevelHom { mu_hom: mu, method: FermiMethod::BlochQuadrature, resolution: n, history });
        }
        prev = mu;
    }
}

/// Tori with at most this many sites are diagonalised densely.
pub const DENSE_TORUS_LIMIT: usize = 1600;

/// Hopping stencil of a homogeneous torus in integer lattice coordinates.
struct TorusStencil {
    diag: f64,
    offsets: Vec<(Vec<i64>, f64)>,
}

impl TorusStencil {
    fn new(params: &ModelParams, lattice: &BravaisLattice) -> Self {
        let mut rho = 0.0;
        let mut offsets = Vec::new();
        for p in lattice.points_in_ball(&[0.0; 3], params.rc) {
            let r = norm(&p);
            if r == 0.0 || r >= params.rc {
                continue;
            }
            rho += params.rho_d(r).0;
            offsets.push((lattice.lattice_coords(&p).expect("lattice point"), params.hop_d(r).0));
        }
        TorusStencil { diag: params.ons(rho), offsets }
    }

    fn spread(&self) -> f64 {
        self.offsets.iter().map(|(_, t)| t.abs()).sum()
    }

    /// `y = (H - c) x / h` on an `L^d` torus.
    fn apply(&self, l: usize, d: usize, c: f64, h: f64, x: &[f64], y: &mut [f64]) {
        let total = x.len();
        let li = l as i64;
        let stride: Vec<usize> = (0..d).map(|j| l.pow(j as u32)).collect();
        // precompute flattened neighbour index shifts per offset as per-axis deltas
        for idx in 0..total {
            let mut acc = (self.diag - c) * x[idx];
            let mut coords = [0i64; 3];
            let mut rem = idx;
            for j in 0..d {
                coords[j] = (rem % l) as i64;
                rem /= l;
            }
            for (o, t) in &self.offsets {
                let mut k = 0usize;
                for j in 0..d {
                    k += ((coords[j] + o[j]).rem_euclid(li)) as usize * stride[j];
                }
                acc += t * x[k];
            }
            y[idx] = acc / h;
        }
    }
}

/// Chebyshev moments `<e_0 | T_k(H~) | e_0>` for `k < 2 m` via the doubling
/// identities.
fn chebyshev_moments(st: &TorusStencil, l: usize, d: usize, c: f64, h: f64, m: usize) -> Vec<f64> {
    let total = l.pow(d as u32);
    let mut v0 = vec![0.0; total];
    v0[0] = 1.0;
    let mut v1 = vec![0.0; total];
    st.apply(l, d, c, h, &v0, &mut v1);
    let mut mu = vec![0.0; 2 * m];
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    mu[0] = 1.0;
    mu[1] = v1[0];
    let mut tmp = vec![0.0; total];
    let (mut prev, mut cur) = (v0, v1);
    // cur = v_k, prev = v_{k-1}
    for k in 1..m {
        // mu_{2k} = 2<v_k,v_k> - mu_0 ; mu_{2k-1} = 2<v_k,v_{k-1}> - mu_1
        mu[2 * k] = 2.0 * dotp(&cur, &cur) - mu[0];
        mu[2 * k - 1] = 2.0 * dotp(&cur, &prev) - mu[1];
        st.apply(l, d, c, h, &cur, &mut tmp);
        for i in 0..total {
            tmp[i] = 2.0 * tmp[i] - prev[i];
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut cur, &mut tmp);
    }
    mu[2 * m - 1] = 2.0 * dotp(&cur, &prev) - mu[1];
    mu
}

/// Chebyshev coefficients of `x -> f(h x + c - mu)` from Chebyshev-Gauss nodes.
fn fermi_coefficients(params: &ModelParams, c: f64, h: f64, mu: f64, m: usize) -> Vec<f64> {
    let q = 2 * m;
    let mut coef = vec![0.0; m];
    for j in 0..q {
        let th = std::f64::consts::PI * (j as f64 + 0.5) / q as f64;
        let x = th.cos();
        let fj = params.fermi(h * x + c - mu);
        let (mut t0, mut t1) = (1.0, x);
        coef[0] += fj;
        if m > 1 {
            coef[1] += fj * x;
        }
        for ck in coef.iter_mut().skip(2) {
            let t2 = 2.0 * x * t1 - t0;
            *ck += fj * t2;
            t0 = t1;
            t1 = t2;
        }
    }
    for (k, ck) in coef.iter_mut().enumerate() {
        *ck *= if k == 0 { 1.0 } else { 2.0 } / q as f64;
    }
    coef
}

/// Half-filling Fermi level of a large homogeneous torus from Chebyshev
/// moments of the local density of states at one (hence every) site.
fn torus_level_chebyshev(params: &ModelParams, lattice: &BravaisLattice, l: usize) -> f64 {
    let d = lattice.dim();
    let st = TorusStencil::new(params, lattice);
    let c = st.diag;
    let h = 1.01 * st.spread() + 1e-3;
    // Bernstein ellipse through the nearest pole of f, at height pi/beta
    let eps = std::f64::consts::PI / (params.beta * h);
    let rate = eps.asinh();
    let m = (((20.0 / rate) as usize).max(64)).next_power_of_two();
    let moments = chebyshev_moments(&st, l, d, c, h, m);
    let n_mom = 2 * m;
    let local = |mu: f64| -> f64 {
        let coef = fermi_coefficients(params, c, h, mu, n_mom);
        coef.iter().zip(&moments).map(|(a, b)| a * b).sum::<f64>() - 0.5
    };
    // the site density is monotone in mu, so bisection is reliable
    let (mut a, mut b) = (c - h, c + h);
    while b - a > 2.0 * f64::EPSILON * (1.0 + a.abs().max(b.abs())) {
        let x = 0.5 * (a + b);
        if x <= a || x >= b {
            break;
        }
        if local(x) > 0.0 {
            b = x;
        } else {
            a = x;
        }
    }
    0.5 * (a + b)
}

/// Fermi level of a homogeneous torus with `l` sites per axis at `Ne = N`.
pub fn torus_fermi_level(params: &ModelParams, lattice: &BravaisLattice, l: usize) -> Result<f64> {
    let (sites, cell) = build_torus(lattice, l, false)?;
    cell.check_width(params.rc)?;
    if sites.len() <= DENSE_TORUS_LIMIT {
        let sys = System::new(Geometry::torus(sites, cell), *params)?;
        let n = sys.len() as f64;
        Ok(sys.solve_mu(n)?.mu)
    } else {
        Ok(torus_level_chebyshev(params, lattice, l))
    }
}

/// Fermi level from homogeneous tori of increasing size: the last value, or an
/// Aitken-accelerated value when the last two sizes still disagree by more
/// than `1e-10` and the differences contract.
pub fn fermi_level_supercell(params: &ModelParams, lattice: &BravaisLattice, sizes: &[usize]) -> Result<FermiLevelHom> {
    params.validate()?;
    if sizes.is_empty() {
        return Err(Error::config("no torus sizes given"));
    }
    let mut history = Vec::new();
    for &l in sizes {
        history.push((l, torus_fermi_level(params, lattice, l)?));
    }
    let k = history.len();
    let mut mu = history[k - 1].1;
    if k >= 3 {
        let (a, b, c) = (history[k - 3].1, history[k - 2].1, history[k - 1].1);
        let (d1, d2) = (b - a, c - b);
        if d2.abs() > 1e-10 && d2.abs() < d1.abs() && d1 * d2 > 0.0 {
            mu = c - d2 * d2 / (d2 - d1);
        }
    }
    Ok(FermiLevelHom {
        mu_hom: mu,
        method: FermiMethod::SupercellExtrapolation,
        resolution: sizes[k - 1],
        history,
    })
}

/// On-site slope `c1` for which the homogeneous crystal at half filling is
/// free of hydrostatic stress at fixed `tau = mu_hom`.
///
/// The band occupations do not depend on `c1` (it shifts all bands rigidly),
/// so `c1* = -<2 f(lambda_k - mu) sum_rho hop'(|rho|) |rho| cos(k.rho)> /
/// sum_rho rho'(|rho|) |rho|`.
pub fn stress_free_c1(params: &ModelParams, lattice: &BravaisLattice, n_k: usize) -> Result<f64> {
    let shell = BlochShell::new(params, lattice, None)?;
    let lams = bloch_grid(lattice, &shell, n_k);
    let mu = half_filling_level(&lams, params);
    let pts: Vec<Vec3> = lattice
        .points_in_ball(&[0.0; 3], params.rc)
        .into_iter()
        .filter(|p| norm(p) > 0.0)
        .collect();
    let denom: f64 = pts.iter().map(|p| params.rho_d(norm(p)).1 * norm(p)).sum();
    let d = lattice.dim();
    let b = lattice.reciprocal();
    let total = n_k.pow(d as u32);
    let mut m = vec![0usize; d];
    let mut acc = 0.0;
    for idx in 0..total {
        let mut k = [0.0; 3];
        for j in 0..d {
            let t = (m[j] as f64 + 0.5) / n_k as f64;
            for c in 0..3 {
                k[c] += t * b[j][c];
            }
        }
        let s: f64 = pts.iter().map(|p| params.hop_d(norm(p)).1 * norm(p) * crate::dot(&k, p).cos()).sum();
        acc += 2.0 * params.fermi(lams[idx] - mu) * s;
        for j in 0..d {
            m[j] += 1;
            if m[j] < n_k {
                break;
            }
            m[j] = 0;
        }
    }
    Ok(-(acc / total as f64) / denom)
}

/// The relaxation preset with `c1` set to the stress-free value for `lattice`.
pub fn relaxation_params(lattice: &BravaisLattice) -> Result<ModelParams> {
    let mut p = ModelParams::relaxation();
    let n_k = match lattice.dim() {
        1 => 4096,
        2 => 256,
        _ => 48,
    };
    p.c1 = stress_free_c1(&p, lattice, n_k)?;
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConstant {
    pub name: String,
    pub value: f64,
    pub method: String,
    pub resolution: String,
    pub date: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceFile {
    pub schema_version: u32,
    pub code_version: String,
    #[serde(default)]
    pub constant: Vec<ReferenceConstant>,
}

/// Shipped reference constants.
pub const REFERENCE_CONSTANTS: &str = include_str!("../data/reference_constants.toml");

pub fn parse_reference_constants(text: &str) -> Result<ReferenceFile> {
    toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
}

pub fn reference_constant(name: &str) -> Result<f64> {
    parse_reference_constants(REFERENCE_CONSTANTS)?
        .constant
        .into_iter()
        .find(|c| c.name == name)
        .map(|c| c.value)
        .ok_or_else(|| Error::config(format!("unknown reference constant `{name}`")))
}

pub fn write_reference_constants(path: &Path, constants: Vec<ReferenceConstant>) -> Result<()> {
    let file = ReferenceFile { schema_version: 1, code_version: crate::VERSION.to_string(), constant: constants };
    let text = toml::to_string_pretty(&file).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::assemble_open;
    use rand::{Rng, SeedableRng};

    fn p() -> ModelParams {
        ModelParams::default()
    }

    fn spec_of(pos: &[Vec3], m: &ModelParams) -> SpectralData {
        eig_sym(&assemble_open(pos, m).unwrap()).unwrap()
    }

    fn cluster(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let side = (n as f64).sqrt().ceil() as usize;
        (0..n)
            .map(|k| [(k % side) as f64 + rng.gen_range(-0.1..0.1), (k / side) as f64 + rng.gen_range(-0.1..0.1), 0.0])
            .collect()
    }

    #[test]
    fn dimer_count_and_single_atom_grand() {
        let m = p();
        let s = spec_of(&[[0.0; 3], [1.0, 0.0, 0.0]], &m);
        assert!((total_qoi(&s, &m, QoIKind::Number, m.eps0 + m.c1) - 2.0).abs() < 1e-15);
        let one = spec_of(&[[0.0; 3]], &m);
        let tau = 0.2;
        let expect = 2.0 / m.beta * (1.0 - m.fermi(m.eps0 - tau)).ln();
        assert!((total_qoi(&one, &m, QoIKind::Grand, tau) - expect).abs() < 1e-15);
    }

    #[test]
    fn energy_identity_summed() {
        let m = p();
        let s = spec_of(&cluster(12, 3), &m);
        for &tau in &[-0.7, 0.1, 0.9] {
            let e = total_qoi(&s, &m, QoIKind::Helmholtz, tau);
            let n = total_qoi(&s, &m, QoIKind::Number, tau);
            let g = total_qoi(&s, &m, QoIKind::Grand, tau);
            assert!((e - tau * n - g).abs() < 1e-12);
        }
    }

    #[test]
    fn local_parts_sum_to_total() {
        let m = p();
        let s = spec_of(&cluster(20, 4), &m);
        for kind in QoIKind::ALL {
            let total = total_qoi(&s, &m, kind, 0.3);
            let sum: f64 = local_qoi_all(&s, &m, kind, 0.3).iter().sum();
            assert!((sum - total).abs() <= 1e-11 * total.abs().max(1.0));
        }
        let d = spec_of(&[[0.0; 3], [1.0, 0.0, 0.0]], &m);
        for kind in QoIKind::ALL {
            let a = local_qoi(&d, &m, 0, kind, 0.1).unwrap();
            assert!((a - 0.5 * total_qoi(&d, &m, kind, 0.1)).abs() < 1e-14);
        }
        assert!(local_qoi(&d, &m, 2, QoIKind::Number, 0.0).is_err());
    }

    #[test]
    fn mu_examples() {
        let m = p();
        let one = spec_of(&[[0.0; 3]], &m);
        let mu = solve_mu(&one, &m, 1.0).unwrap();
        assert!((mu.mu - one.eigenvalues[0]).abs() < 1e-12);
        let d = spec_of(&[[0.0; 3], [1.0, 0.0, 0.0]], &m);
        assert!((solve_mu(&d, &m, 2.0).unwrap().mu - (m.eps0 + m.c1)).abs() < 1e-12);
        assert!(solve_mu(&d, &m, 4.0).is_err());
        assert!(solve_mu(&d, &m, 0.0).is_err());
        let s = spec_of(&cluster(15, 2), &m);
        for ne in [0.5, 7.3, 15.0, 29.0] {
            let r = solve_mu(&s, &m, ne).unwrap();
            assert!(r.residual <= 1e-10 * ne);
        }
    }

    #[test]
    fn mu_half_filled_ring() {
        let m = p();
        for n in [8usize, 16, 32] {
            let (s, c) = build_torus(&BravaisLattice::chain(1.0), n, false).unwrap();
            let sys = System::new(Geometry::torus(s, c), m).unwrap();
            let mu = sys.solve_mu(n as f64).unwrap().mu;
            assert!((mu - m.ons(2.0 * m.rho(1.0).unwrap())).abs() <= 1e-10);
        }
    }

    #[test]
    fn helmholtz_occupation_form() {
        let m = p();
        let s = spec_of(&[[0.0; 3], [1.0, 0.0, 0.0]], &m);
        let (e, mu) = helmholtz_energy(&s, &m, 2.0).unwrap();
        // direct Mermin functional with minimising occupations
        let mut direct = 0.0;
        for &l in &s.eigenvalues {
            let f = 1.0 / (1.0 + (m.beta * (l - mu.mu)).exp());
            direct += 2.0 * l * f + 2.0 / m.beta * (f * f.ln() + (1.0 - f) * (1.0 - f).ln());
        }
        assert!((e - direct).abs() < 1e-12);
        let g = grand_potential(&s, &m, mu.mu);
        assert!((e - (mu.mu * 2.0 + g)).abs() < 1e-12);
    }

    #[test]
    fn bloch_chain_is_symmetric() {
        let m = p();
        let l = BravaisLattice::chain(1.0);
        let expect = m.ons(2.0 * m.rho(1.0).unwrap());
        let shell = BlochShell::new(&m, &l, None).unwrap();
        for n in [8usize, 10, 64] {
            let mu = half_filling_level(&bloch_grid(&l, &shell, n), &m);
            assert!((mu - expect).abs() < 1e-13);
        }
        let f = fermi_level_bloch(&m, &l, None, 16).unwrap();
        assert!((f.mu_hom - expect).abs() < 1e-13);
    }

    #[test]
    fn bloch_grid_doubling_contracts() {
        let m = ModelParams { rc: 2.5, ..p() };
        let l = BravaisLattice::chain(1.0);
        let f = fermi_level_bloch(&m, &l, None, 4).unwrap();
        let diffs: Vec<f64> = f.history.windows(2).map(|w| (w[1].1 - w[0].1).abs()).collect();
        assert!(diffs.last().unwrap() <= &1e-10);
        assert!(diffs.len() >= 2);
        assert!(diffs[diffs.len() - 1] < diffs[0]);
    }

    #[test]
    fn supercell_chain_exact() {
        let m = p();
        let l = BravaisLattice::chain(1.0);
        let f = fermi_level_supercell(&m, &l, &[8, 12, 16]).unwrap();
        for (_, mu) in &f.history {
            assert!((mu - m.ons(2.0 * m.rho(1.0).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn chebyshev_route_matches_dense_torus() {
        let m = p();
        let l = BravaisLattice::square(1.0);
        let (s, c) = build_torus(&l, 12, false).unwrap();
        let sys = System::new(Geometry::torus(s, c), m).unwrap();
        let dense = sys.solve_mu(144.0).unwrap().mu;
        let cheb = torus_level_chebyshev(&m, &l, 12);
        // the site density at the Chebyshev level, evaluated by eigenvectors
        let w: Vec<f64> = sys.spec.eigenvalues.iter().map(|&x| m.fermi(x - cheb)).collect();
        let v = sys.spec.local_weighted(0, &w); assert!((v - 0.5).abs() < 1e-12, "{v}");
        assert!((dense - cheb).abs() < 1e-8, "{dense} {cheb}");
    }

    #[test]
    fn stress_free_chain_has_zero_pressure() {
        let l = BravaisLattice::chain(1.0);
        let mut m = ModelParams::relaxation();
        m.c1 = stress_free_c1(&m, &l, 4096).unwrap();
        // pressure by finite differences of the grand potential per site under uniform scaling
        let mu = fermi_level_bloch(&m, &l, None, 1024).unwrap().mu_hom;
        let g = |s: f64| {
            let ls = BravaisLattice::chain(s);
            let shell = BlochShell::new(&m, &ls, None).unwrap();
            let lams = bloch_grid(&ls, &shell, 4096);
            lams.iter().map(|&x| m.kernel(QoIKind::Grand, x, mu)).sum::<f64>() / lams.len() as f64
        };
        let h = 1e-5;
        let p = (g(1.0 + h) - g(1.0 - h)) / (2.0 * h);
        assert!(p.abs() < 1e-8, "{p}");
    }

    #[test]
    fn reference_constants_parse() {
        let f = parse_reference_constants(REFERENCE_CONSTANTS).unwrap();
        assert_eq!(f.schema_version, 1);
        assert!(reference_constant("mu_hom_square_default").unwrap() > 3.0);
        assert!(reference_constant("nope").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        write_reference_constants(&path, f.constant.clone()).unwrap();
        let back = parse_reference_constants(&std::fs::read_to_string(path).unwrap()).unwrap();
        assert_eq!(back.constant, f.constant);
    }
}
