//! Tight-binding Hamiltonians for open clusters, tori and screw-dislocation
//! columns, their analytic position derivatives and the Bloch symbol of a
//! homogeneous crystal.
//!
//! Matrix elements are `H_ll = ons(sum_j rho(r_lj)) + sum_images hop(|B a|)` and
//! `H_lk = sum_images hop(r_lk)`. Periodic images come from an in-plane cell
//! (torus) and/or an out-of-plane column period.

use std::fmt::Write as _;
use std::path::Path;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::lattice::Cell;
use crate::lattice::{BravaisLattice, Grid};
use crate::model::ModelParams;
use crate::{add, dot, norm, sub, Vec3};

/// Extra reach of bond lists beyond the cutoff, so small perturbations of a
/// geometry can reuse its bond topology.
pub const BOND_SKIN: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Current atomic positions `y(l)`.
    pub pos: Vec<Vec3>,
    /// In-plane periodic cell (torus model).
    pub cell: Option<Cell>,
    /// Out-of-plane period along `e3` (dislocation column model).
    pub column: Option<f64>,
}

impl Geometry {
    pub fn open(pos: Vec<Vec3>) -> Self {
        Geometry { pos, cell: None, column: None }
    }

    pub fn torus(pos: Vec<Vec3>, cell: Cell) -> Self {
        Geometry { pos, cell: Some(cell), column: None }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn with_positions(&self, pos: Vec<Vec3>) -> Self {
        Geometry { pos, ..self.clone() }
    }

    /// Same geometry with every position displaced by `u`.
    pub fn displaced(&self, u: &[Vec3]) -> Self {
        self.with_positions(self.pos.iter().zip(u).map(|(p, d)| add(p, d)).collect())
    }

    fn check(&self, params: &ModelParams) -> Result<()> {
        if let Some(c) = &self.cell {
            c.check_width(params.rc)?;
        }
        if let Some(b) = self.column {
            if !(b > 0.0) {
                return Err(Error::config("column period must be positive"));
            }
        }
        if self.pos.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::domain("non-finite atomic position"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// Periodic image shift added to `y(j) - y(i)`.
    pub shift: Vec3,
    /// `y(j) + shift - y(i)`.
    pub d: Vec3,
    pub r: f64,
}

/// All interacting pairs (including periodic images) of a geometry, with
/// constant self-image contributions per site.
#[derive(Clone, Debug)]
pub struct BondList {
    pub n: usize,
    pub bonds: Vec<Bond>,
    /// `sum_{a != 0} hop(|shift_a|)` per site.
    pub self_hop: f64,
    /// `sum_{a != 0} rho(|shift_a|)` per site.
    pub self_rho: f64,
    cutoff: f64,
}

fn image_shifts(geom: &Geometry, reach: f64) -> Vec<Vec3> {
    match &geom.cell {
        Some(c) => c.shifts_within(reach),
        None => vec![[0.0; 3]],
    }
}

impl BondList {
    /// Bonds with `r < rc + BOND_SKIN`.
    pub fn new(geom: &Geometry, params: &ModelParams) -> Result<Self> {
        geom.check(params)?;
        let cutoff = params.rc + BOND_SKIN;
        let shifts = image_shifts(geom, cutoff);
        let n = geom.len();
        let mut bonds = Vec::new();
        let nmax = geom.column.map(|b| (cutoff / b).ceil() as i64 + 1).unwrap_or(0);
        let push = |i: usize, j: usize, base: Vec3, bonds: &mut Vec<Bond>| {
            for s in &shifts {
                let dxy = add(&base, s);
                if (dxy[0] * dxy[0] + dxy[1] * dxy[1]).sqrt() >= cutoff {
                    continue;
                }
                match geom.column {
                    None => {
                        let r = norm(&dxy);
                        if r < cutoff {
                            bonds.push(Bond { i, j, shift: *s, d: dxy, r });
                        }
                    }
                    Some(b) => {
                        let n0 = -(dxy[2] / b).round() as i64;
                        for k in n0 - nmax..=n0 + nmax {
                            let sh = [s[0], s[1], s[2] + k as f64 * b];
                            let d = add(&base, &sh);
                            let r = norm(&d);
                            if r < cutoff {
                                bonds.push(Bond { i, j, shift: sh, d, r });
                            }
                        }
                    }
                }
            }
        };
        if geom.cell.is_some() || n < 64 {
            for i in 0..n {
                for j in i + 1..n {
                    push(i, j, sub(&geom.pos[j], &geom.pos[i]), &mut bonds);
                }
            }
        } else {
            let grid = Grid::new(&geom.pos, cutoff);
            for i in 0..n {
                let mut near = Vec::new();
                grid.for_each_near(&geom.pos[i], |j| {
                    if j > i {
                        near.push(j)
                    }
                });
                near.sort_unstable();
                for j in near {
                    push(i, j, sub(&geom.pos[j], &geom.pos[i]), &mut bonds);
                }
            }
        }
        let mut self_hop = 0.0;
        let mut self_rho = 0.0;
        let zs: Vec<f64> = match geom.column {
            Some(b) => (-nmax..=nmax).map(|k| k as f64 * b).collect(),
            None => vec![0.0],
        };
        for s in &shifts {
            for z in &zs {
                let r = norm(&[s[0], s[1], s[2] + z]);
                if r > 0.0 && r < params.rc {
                    self_hop += params.hop_d(r).0;
                    self_rho += params.rho_d(r).0;
                }
            }
        }
        Ok(BondList { n, bonds, self_hop, self_rho, cutoff })
    }

    /// Recomputes bond vectors for new positions, keeping the pair topology.
    /// Valid while no pair outside the list comes within the cutoff.
    pub fn refresh(&mut self, pos: &[Vec3]) {
        for b in &mut self.bonds {
            b.d = add(&sub(&pos[b.j], &pos[b.i]), &b.shift);
            b.r = norm(&b.d);
        }
    }

    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    /// Per-site `sum_j rho(r_lj)`, including self images.
    pub fn densities(&self, params: &ModelParams) -> Vec<f64> {
        let mut z = vec![self.self_rho; self.n];
        for b in &self.bonds {
            let (rho, _) = params.rho_d(b.r);
            z[b.i] += rho;
            z[b.j] += rho;
        }
        z
    }

    /// Neighbours of every site (indices only, possibly repeated for several
    /// images) within the true cutoff.
    pub fn adjacency(&self, rc: f64) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for b in &self.bonds {
            if b.r < rc {
                adj[b.i].push(b.j);
                adj[b.j].push(b.i);
            }
        }
        adj
    }
}

/// Values of a symmetric matrix on the sparsity pattern of a bond list: the
/// diagonal plus one value per bond (shared by `(i, j)` and `(j, i)`).
#[derive(Clone, Debug, PartialEq)]
pub struct PatternValues {
    pub diag: Vec<f64>,
    pub bond: Vec<f64>,
}

impl PatternValues {
    pub fn zeros(bonds: &BondList) -> Self {
        PatternValues { diag: vec![0.0; bonds.n], bond: vec![0.0; bonds.bonds.len()] }
    }

    /// `A += self` on a dense matrix.
    pub fn add_to_dense(&self, bonds: &BondList, a: &mut Mat<f64>) {
        for (i, v) in self.diag.iter().enumerate() {
            a[(i, i)] += v;
        }
        for (b, v) in bonds.bonds.iter().zip(&self.bond) {
            a[(b.i, b.j)] += v;
            a[(b.j, b.i)] += v;
        }
    }

    /// `Tr(A X)` for a symmetric `X` sampled on the same pattern.
    pub fn trace_product(&self, bonds: &BondList, x: &PatternValues) -> f64 {
        let _ = bonds;
        let d: f64 = self.diag.iter().zip(&x.diag).map(|(a, b)| a * b).sum();
        let o: f64 = self.bond.iter().zip(&x.bond).map(|(a, b)| a * b).sum();
        d + 2.0 * o
    }
}

/// Dense Hamiltonian of any geometry.
pub fn assemble(geom: &Geometry, params: &ModelParams) -> Result<Mat<f64>> {
    let bonds = BondList::new(geom, params)?;
    Ok(assemble_from_bonds(&bonds, params))
}

pub fn assemble_from_bonds(bonds: &BondList, params: &ModelParams) -> Mat<f64> {
    let n = bonds.n;
    let z = bonds.densities(params);
    let mut h = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = params.ons(z[i]) + bonds.self_hop;
    }
    for b in &bonds.bonds {
        let (t, _) = params.hop_d(b.r);
        h[(b.i, b.j)] += t;
        h[(b.j, b.i)] += t;
    }
    h
}

/// Hamiltonian of a finite cluster with free-space distances.
pub fn assemble_open(pos: &[Vec3], params: &ModelParams) -> Result<Mat<f64>> {
    assemble(&Geometry::open(pos.to_vec()), params)
}

/// Hamiltonian of a periodic cell; every face-to-face width must exceed `2 Rc`.
pub fn assemble_torus(pos: &[Vec3], cell: &Cell, params: &ModelParams) -> Result<Mat<f64>> {
    assemble(&Geometry::torus(pos.to_vec(), cell.clone()), params)
}

/// Hamiltonian values on the bond pattern (no dense storage).
pub fn pattern_hamiltonian(bonds: &BondList, params: &ModelParams) -> PatternValues {
    let z = bonds.densities(params);
    PatternValues {
        diag: z.iter().map(|&v| params.ons(v) + bonds.self_hop).collect(),
        bond: bonds.bonds.iter().map(|b| params.hop_d(b.r).0).collect(),
    }
}

/// Nonzero entries of `dH / d[y(m)]_i`, stored symmetrically as triplets.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianDerivative {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl HamiltonianDerivative {
    pub fn to_dense(&self) -> Mat<f64> {
        let mut m = Mat::<f64>::zeros(self.n, self.n);
        for &(i, j, v) in &self.entries {
            m[(i, j)] += v;
        }
        m
    }

    /// `<x | dH | y>`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.entries.iter().map(|&(i, j, v)| x[i] * v * y[j]).sum()
    }
}

/// Analytic derivative of every matrix element with respect to `[y(m)]_axis`.
pub fn d_hamiltonian(geom: &Geometry, params: &ModelParams, m: usize, axis: usize) -> Result<HamiltonianDerivative> {
    Error::check_index(m, geom.len())?;
    if axis > 2 {
        return Err(Error::Index { index: axis, len: 3 });
    }
    let bonds = BondList::new(geom, params)?;
    Ok(d_hamiltonian_from_bonds(&bonds, params, m, axis))
}

pub fn d_hamiltonian_from_bonds(bonds: &BondList, params: &ModelParams, m: usize, axis: usize) -> HamiltonianDerivative {
    let mut entries = Vec::new();
    let mut diag = std::collections::BTreeMap::<usize, f64>::new();
    for b in &bonds.bonds {
        if b.i == b.j || (b.i != m && b.j != m) || b.r >= params.rc {
            continue;
        }
        // d r / d y(m)_axis
        let sign = if b.j == m { 1.0 } else { -1.0 };
        let dr = sign * b.d[axis] / b.r;
        if dr == 0.0 {
            continue;
        }
        let (_, dt) = params.hop_d(b.r);
        let (_, drho) = params.rho_d(b.r);
        entries.push((b.i, b.j, dt * dr));
        entries.push((b.j, b.i, dt * dr));
        let dz = params.ons_deriv(0.0) * drho * dr;
        *diag.entry(b.i).or_default() += dz;
        *diag.entry(b.j).or_default() += dz;
    }
    entries.extend(diag.into_iter().map(|(i, v)| (i, i, v)));
    HamiltonianDerivative { n: bonds.n, entries }
}

/// Directional derivative `sum_(m,a) v_m,a dH/d[y(m)]_a` on the bond pattern.
pub fn directional_dh(bonds: &BondList, params: &ModelParams, v: &[Vec3]) -> PatternValues {
    let mut out = PatternValues::zeros(bonds);
    let c1 = params.ons_deriv(0.0);
    for (k, b) in bonds.bonds.iter().enumerate() {
        if b.r >= params.rc {
            continue;
        }
        let dr = dot(&b.d, &sub(&v[b.j], &v[b.i])) / b.r;
        let (_, dt) = params.hop_d(b.r);
        let (_, drho) = params.rho_d(b.r);
        out.bond[k] = dt * dr;
        out.diag[b.i] += c1 * drho * dr;
        out.diag[b.j] += c1 * drho * dr;
    }
    out
}

/// Gradient of `Tr(P H(y))` with respect to every position, for a symmetric
/// `P` given on the bond pattern.
pub fn grad_trace(bonds: &BondList, params: &ModelParams, p: &PatternValues) -> Vec<Vec3> {
    let mut g = vec![[0.0; 3]; bonds.n];
    let c1 = params.ons_deriv(0.0);
    for (k, b) in bonds.bonds.iter().enumerate() {
        if b.r >= params.rc {
            continue;
        }
        let (_, dt) = params.hop_d(b.r);
        let (_, drho) = params.rho_d(b.r);
        let w = (2.0 * p.bond[k] * dt + c1 * drho * (p.diag[b.i] + p.diag[b.j])) / b.r;
        for a in 0..3 {
            g[b.j][a] += w * b.d[a];
            g[b.i][a] -= w * b.d[a];
        }
    }
    g
}

/// Neighbour shell of a homogeneous crystal for Bloch sums.
#[derive(Clone, Debug)]
pub struct BlochShell {
    /// `ons(sum rho) + hop` contributions with zero in-plane offset.
    pub onsite: f64,
    /// In-plane offsets and summed hopping values.
    pub terms: Vec<(Vec3, f64)>,
}

impl BlochShell {
    pub fn new(params: &ModelParams, lattice: &BravaisLattice, column: Option<f64>) -> Result<Self> {
        params.validate()?;
        let pts = lattice.points_in_ball(&[0.0; 3], params.rc);
        let mut rho_sum = 0.0;
        let mut onsite_hop = 0.0;
        let mut terms = Vec::new();
        for p in pts {
            let zs: Vec<f64> = match column {
                None => vec![0.0],
                Some(b) => {
                    let n = (params.rc / b).ceil() as i64 + 1;
                    (-n..=n).map(|k| k as f64 * b).collect()
                }
            };
            let mut hop = 0.0;
            for z in zs {
                let r = norm(&[p[0], p[1], p[2] + z]);
                if r == 0.0 || r >= params.rc {
                    continue;
                }
                rho_sum += params.rho_d(r).0;
                hop += params.hop_d(r).0;
            }
            if norm(&p) == 0.0 {
                onsite_hop += hop;
            } else if hop != 0.0 {
                terms.push((p, hop));
            }
        }
        Ok(BlochShell { onsite: params.ons(rho_sum) + onsite_hop, terms })
    }

    /// Complex Bloch symbol `(re, im)`.
    pub fn symbol(&self, k: &Vec3) -> (f64, f64) {
        let mut re = self.onsite;
        let mut im = 0.0;
        for (p, t) in &self.terms {
            let ph = dot(k, p);
            re += t * ph.cos();
            im += t * ph.sin();
        }
        (re, im)
    }

    pub fn eval(&self, k: &Vec3) -> f64 {
        self.symbol(k).0
    }
}

/// Bloch eigenvalue `lambda(k)` of the homogeneous crystal.
pub fn bloch_hamiltonian(params: &ModelParams, lattice: &BravaisLattice, k: &Vec3) -> Result<f64> {
    bloch_hamiltonian_column(params, lattice, None, k)
}

pub fn bloch_hamiltonian_column(
    params: &ModelParams,
    lattice: &BravaisLattice,
    column: Option<f64>,
    k: &Vec3,
) -> Result<f64> {
    let shell = BlochShell::new(params, lattice, column)?;
    let (re, im) = shell.symbol(k);
    let scale: f64 = 1.0 + shell.terms.iter().map(|(_, t)| t.abs()).sum::<f64>();
    if im.abs() > 1e-12 * scale {
        return Err(Error::domain(format!("Bloch symbol has imaginary part {im:e}")));
    }
    Ok(re)
}

/// Row-major dense dump with 17 significant digits.
pub fn matrix_to_string(h: &Mat<f64>) -> String {
    let mut s = String::new();
    for i in 0..h.nrows() {
        for j in 0..h.ncols() {
            if j > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.16e}", h[(i, j)]);
        }
        s.push('\n');
    }
    s
}

pub fn write_matrix(path: &Path, h: &Mat<f64>) -> Result<()> {
    std::fs::write(path, matrix_to_string(h))?;
    Ok(())
}
