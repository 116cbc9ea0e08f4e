//! Bravais lattices, point-defect reference configurations, clamped and
//! periodic domains, displacement seminorms and the non-interpenetration check.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{norm, sub, Vec3};

/// Tolerance used when deciding whether a point sits on a ball boundary or on
/// a lattice site.
pub const GEOMETRY_TOL: f64 = 1e-9;

/// Stencil weights below this value are dropped from seminorm sums.
pub const STENCIL_WEIGHT_FLOOR: f64 = 1e-16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BravaisLattice {
    /// Lattice vectors (columns of `A`), padded to three components.
    pub vectors: Vec<Vec3>,
}

fn det(m: &[Vec3], d: usize) -> f64 {
    match d {
        1 => m[0][0],
        2 => m[0][0] * m[1][1] - m[1][0] * m[0][1],
        _ => {
            m[0][0] * (m[1][1] * m[2][2] - m[2][1] * m[1][2]) - m[1][0] * (m[0][1] * m[2][2] - m[2][1] * m[0][2])
                + m[2][0] * (m[0][1] * m[1][2] - m[1][1] * m[0][2])
        }
    }
}

/// Inverse of the `d x d` matrix whose columns are `cols`, returned row-wise:
/// `inv[i]` is the i-th row, so `frac_i = inv[i] . x`.
fn inverse_rows(cols: &[Vec3]) -> Result<Vec<Vec3>> {
    let d = cols.len();
    let det = det(cols, d);
    if det.abs() < 1e-14 {
        return Err(Error::config("lattice matrix is singular"));
    }
    let mut rows = vec![[0.0; 3]; d];
    match d {
        1 => rows[0][0] = 1.0 / cols[0][0],
        2 => {
            let (a, b, c, e) = (cols[0][0], cols[1][0], cols[0][1], cols[1][1]);
            rows[0] = [e / det, -b / det, 0.0];
            rows[1] = [-c / det, a / det, 0.0];
        }
        _ => {
            let m = |r: usize, c: usize| cols[c][r];
            for i in 0..3 {
                for j in 0..3 {
                    // cofactor of (j, i)
                    let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                    let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                    rows[i][j] = (m(r0, c0) * m(r1, c1) - m(r0, c1) * m(r1, c0)) / det;
                }
            }
        }
    }
    Ok(rows)
}

fn lex_cmp(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])).then(a[2].total_cmp(&b[2]))
}

/// Sorts positions lexicographically by coordinates (x first).
pub fn sort_lexicographic(points: &mut [Vec3]) {
    for p in points.iter_mut() {
        for c in p.iter_mut() {
            *c += 0.0;
        }
    }
    points.sort_by(lex_cmp);
}

impl BravaisLattice {
    pub fn new(vectors: Vec<Vec3>) -> Result<Self> {
        let d = vectors.len();
        if !(1..=3).contains(&d) {
            return Err(Error::config(format!("lattice dimension must be 1, 2 or 3, got {d}")));
        }
        for v in &vectors {
            if v[d..].iter().any(|&c| c != 0.0) {
                return Err(Error::config("lattice vectors must lie in the first d coordinates"));
            }
        }
        inverse_rows(&vectors)?;
        Ok(BravaisLattice { vectors })
    }

    pub fn chain(a: f64) -> Self {
        BravaisLattice { vectors: vec![[a, 0.0, 0.0]] }
    }

    pub fn square(a: f64) -> Self {
        BravaisLattice { vectors: vec![[a, 0.0, 0.0], [0.0, a, 0.0]] }
    }

    pub fn triangular(a: f64) -> Self {
        BravaisLattice { vectors: vec![[a, 0.0, 0.0], [0.5 * a, 0.5 * 3f64.sqrt() * a, 0.0]] }
    }

    pub fn cubic(a: f64) -> Self {
        BravaisLattice { vectors: vec![[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]] }
    }

    /// Builds `A` from its columns given as plain slices of length `d`.
    pub fn custom(columns: &[Vec<f64>]) -> Result<Self> {
        let d = columns.len();
        let mut vectors = Vec::with_capacity(d);
        for c in columns {
            if c.len() != d {
                return Err(Error::config("lattice matrix must be square"));
            }
            let mut v = [0.0; 3];
            v[..d].copy_from_slice(c);
            vectors.push(v);
        }
        BravaisLattice::new(vectors)
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    pub fn det(&self) -> f64 {
        det(&self.vectors, self.dim())
    }

    /// Volume (length, area) per site.
    pub fn cell_volume(&self) -> f64 {
        self.det().abs()
    }

    pub fn point(&self, n: &[i64]) -> Vec3 {
        let mut p = [0.0; 3];
        for (c, v) in n.iter().zip(&self.vectors) {
            for k in 0..3 {
                p[k] += *c as f64 * v[k];
            }
        }
        p
    }

    /// Fractional coordinates of `x` in the lattice basis.
    pub fn fractional(&self, x: &Vec3) -> Vec<f64> {
        let rows = inverse_rows(&self.vectors).expect("validated lattice");
        rows.iter().map(|r| crate::dot(r, x)).collect()
    }

    /// Integer coordinates of `x` if it is a lattice point.
    pub fn lattice_coords(&self, x: &Vec3) -> Option<Vec<i64>> {
        let f = self.fractional(x);
        let n: Vec<i64> = f.iter().map(|v| v.round() as i64).collect();
        if norm(&sub(&self.point(&n), x)) <= GEOMETRY_TOL * (1.0 + norm(x)) {
            Some(n)
        } else {
            None
        }
    }

    /// Reciprocal vectors `b_i` with `b_i . a_j = 2 pi delta_ij`.
    pub fn reciprocal(&self) -> Vec<Vec3> {
        let rows = inverse_rows(&self.vectors).expect("validated lattice");
        rows.iter().map(|r| crate::scale(r, 2.0 * std::f64::consts::PI)).collect()
    }

    pub fn nearest_neighbor_distance(&self) -> f64 {
        let pts = self.points_in_ball(&[0.0; 3], 3.0 * self.vectors.iter().map(norm).fold(0.0, f64::max));
        pts.iter().map(norm).filter(|&r| r > GEOMETRY_TOL).fold(f64::INFINITY, f64::min)
    }

    /// All lattice points in the closed ball `|x - center| <= radius`, sorted
    /// lexicographically.
    pub fn points_in_ball(&self, center: &Vec3, radius: f64) -> Vec<Vec3> {
        let d = self.dim();
        let rows = inverse_rows(&self.vectors).expect("validated lattice");
        let c = self.fractional(center);
        let mut lo = vec![0i64; d];
        let mut hi = vec![0i64; d];
        for i in 0..d {
            let span = radius * norm(&rows[i]) + 1.0;
            lo[i] = (c[i] - span).floor() as i64;
            hi[i] = (c[i] + span).ceil() as i64;
        }
        let mut out = Vec::new();
        let mut n = lo.clone();
        loop {
            let p = self.point(&n);
            if norm(&sub(&p, center)) <= radius + GEOMETRY_TOL {
                out.push(p);
            }
            let mut k = 0;
            loop {
                if k == d {
                    sort_lexicographic(&mut out);
                    return out;
                }
                n[k] += 1;
                if n[k] <= hi[k] {
                    break;
                }
                n[k] = lo[k];
                k += 1;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    None,
    /// Remove the lattice site at this position.
    Vacancy(Vec3),
    /// Insert an extra atom at this position.
    Interstitial(Vec3),
}

impl DefectKind {
    fn position(&self) -> Option<&Vec3> {
        match self {
            DefectKind::None => None,
            DefectKind::Vacancy(p) | DefectKind::Interstitial(p) => Some(p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub lattice: BravaisLattice,
    pub sites: Vec<Vec3>,
    pub defect_core_radius: f64,
    pub defect: DefectKind,
}

impl ReferenceConfig {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lattice.dim()
    }

    /// Sub-configuration of the sites in the closed ball `B_radius(0)`.
    pub fn restrict(&self, radius: f64) -> ReferenceConfig {
        ReferenceConfig {
            sites: self.sites.iter().copied().filter(|p| norm(p) <= radius + GEOMETRY_TOL).collect(),
            ..self.clone()
        }
    }
}

/// All sites of `lattice` in `B_{r_total}(0)` with the defect applied.
pub fn build_point_defect(
    lattice: &BravaisLattice,
    r_total: f64,
    kind: DefectKind,
    r_def: f64,
) -> Result<ReferenceConfig> {
    if !(r_def >= 0.0) || !(r_total > r_def) {
        return Err(Error::InvalidDefect(format!(
            "need R_total > R_def >= 0, got R_total = {r_total}, R_def = {r_def}"
        )));
    }
    let mut sites = lattice.points_in_ball(&[0.0; 3], r_total);
    if let Some(p) = kind.position() {
        if p.iter().any(|c| !c.is_finite()) || p[lattice.dim()..].iter().any(|&c| c != 0.0) {
            return Err(Error::InvalidDefect("defect position has invalid coordinates".into()));
        }
        if norm(p) > r_def + GEOMETRY_TOL {
            return Err(Error::InvalidDefect(format!(
                "defect at distance {} lies outside the core ball of radius {r_def}",
                norm(p)
            )));
        }
    }
    match &kind {
        DefectKind::None => {}
        DefectKind::Vacancy(p) => {
            let idx = sites
                .iter()
                .position(|s| norm(&sub(s, p)) <= GEOMETRY_TOL)
                .ok_or_else(|| Error::InvalidDefect("vacancy position is not a lattice site".into()))?;
            sites.remove(idx);
        }
        DefectKind::Interstitial(p) => {
            if lattice.lattice_coords(p).is_some() {
                return Err(Error::InvalidDefect("interstitial coincides with a lattice site".into()));
            }
            sites.push(*p);
            sort_lexicographic(&mut sites);
        }
    }
    Ok(ReferenceConfig {
        lattice: lattice.clone(),
        sites,
        defect_core_radius: r_def,
        defect: kind,
    })
}

/// Free sites (`|l| <= R`) and clamped buffer sites (`R < |l| <= R + R_b`) as
/// indices into `reference.sites`. Sites beyond `R + R_b` belong to neither.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub free: Vec<usize>,
    pub clamped: Vec<usize>,
}

pub fn partition_clamped(reference: &ReferenceConfig, r: f64, r_b: f64) -> Result<Partition> {
    partition_about(&reference.sites, &[0.0; 3], r, r_b)
}

/// As [`partition_clamped`] but with balls centred at `center`.
pub fn partition_about(sites: &[Vec3], center: &Vec3, r: f64, r_b: f64) -> Result<Partition> {
    if !(r > 0.0) || !(r_b > 0.0) {
        return Err(Error::domain(format!("need R > 0 and R_b > 0, got {r}, {r_b}")));
    }
    let mut free = Vec::new();
    let mut clamped = Vec::new();
    for (i, s) in sites.iter().enumerate() {
        let d = norm(&sub(s, center));
        if d <= r + GEOMETRY_TOL {
            free.push(i);
        } else if d <= r + r_b + GEOMETRY_TOL {
            clamped.push(i);
        }
    }
    Ok(Partition { free, clamped })
}

/// Buffer width `max(min_width, c_b ln R)`.
pub fn buffer_width(r: f64, c_b: f64, min_width: f64) -> f64 {
    (c_b * r.max(1.0).ln()).max(min_width)
}

/// Periodic supercell spanned by `d` translation vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub vectors: Vec<Vec3>,
}

impl Cell {
    pub fn new(vectors: Vec<Vec3>) -> Result<Self> {
        inverse_rows(&vectors)?;
        Ok(Cell { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    /// Distances between opposite faces of the cell.
    pub fn widths(&self) -> Vec<f64> {
        let rows = inverse_rows(&self.vectors).expect("validated cell");
        rows.iter().map(|r| 1.0 / norm(r)).collect()
    }

    pub fn min_width(&self) -> f64 {
        self.widths().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn shift(&self, alpha: &[i64]) -> Vec3 {
        let mut s = [0.0; 3];
        for (a, v) in alpha.iter().zip(&self.vectors) {
            for k in 0..3 {
                s[k] += *a as f64 * v[k];
            }
        }
        s
    }

    /// All image shifts `B alpha` with `|alpha_j| <= reach_j`, where `reach_j`
    /// covers every image closer than `cutoff` to the home cell.
    pub fn shifts_within(&self, cutoff: f64) -> Vec<Vec3> {
        let d = self.dim();
        let reach: Vec<i64> = self.widths().iter().map(|w| (cutoff / w).ceil() as i64 + 1).collect();
        let mut out = Vec::new();
        let mut a: Vec<i64> = reach.iter().map(|r| -r).collect();
        loop {
            out.push(self.shift(&a));
            let mut k = 0;
            loop {
                if k == d {
                    return out;
                }
                a[k] += 1;
                if a[k] <= reach[k] {
                    break;
                }
                a[k] = -reach[k];
                k += 1;
            }
        }
    }

    /// Image shifts with `alpha in {-1, 0, 1}^d`.
    pub fn unit_shifts(&self) -> Vec<Vec3> {
        let d = self.dim();
        let mut out = Vec::with_capacity(3usize.pow(d as u32));
        let mut a = vec![-1i64; d];
        loop {
            out.push(self.shift(&a));
            let mut k = 0;
            loop {
                if k == d {
                    return out;
                }
                a[k] += 1;
                if a[k] <= 1 {
                    break;
                }
                a[k] = -1;
                k += 1;
            }
        }
    }

    /// Fails unless every face-to-face width exceeds `2 rc`.
    pub fn check_width(&self, rc: f64) -> Result<()> {
        let w = self.min_width();
        if w <= 2.0 * rc {
            return Err(Error::config(format!(
                "periodic cell width {w} does not exceed twice the cutoff {rc}"
            )));
        }
        Ok(())
    }
}

/// Torus distance `min_alpha |p - q + B alpha|` over `alpha in {-1,0,1}^d`.
pub fn torus_distance(p: &Vec3, q: &Vec3, cell: &Cell, rc: f64) -> Result<f64> {
    cell.check_width(rc)?;
    Ok(min_image_distance(p, q, cell))
}

pub(crate) fn min_image_distance(p: &Vec3, q: &Vec3, cell: &Cell) -> f64 {
    let d = sub(p, q);
    cell.unit_shifts()
        .iter()
        .map(|s| norm(&crate::add(&d, s)))
        .fold(f64::INFINITY, f64::min)
}

/// Homogeneous torus of `n^d` sites of `lattice` with cell `n A`, optionally
/// with a vacancy at the origin. Sites are sorted lexicographically.
pub fn build_torus(lattice: &BravaisLattice, n: usize, vacancy: bool) -> Result<(Vec<Vec3>, Cell)> {
    if n == 0 {
        return Err(Error::config("torus size must be positive"));
    }
    let d = lattice.dim();
    let mut sites = Vec::with_capacity(n.pow(d as u32));
    let mut m = vec![0i64; d];
    loop {
        if !(vacancy && m.iter().all(|&c| c == 0)) {
            sites.push(lattice.point(&m));
        }
        let mut k = 0;
        loop {
            if k == d {
                sort_lexicographic(&mut sites);
                let cell = Cell::new(lattice.vectors.iter().map(|v| crate::scale(v, n as f64)).collect())?;
                return Ok((sites, cell));
            }
            m[k] += 1;
            if (m[k] as usize) < n {
                break;
            }
            m[k] = 0;
            k += 1;
        }
    }
}

/// Pairs `(i, j, r)` with `i < j` and distance `r <= cutoff`. Under a cell the
/// distance of every image within range is listed separately.
pub fn pairs_within(points: &[Vec3], cutoff: f64, cell: Option<&Cell>) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    match cell {
        Some(c) => {
            let shifts = c.shifts_within(cutoff);
            for i in 0..points.len() {
                for j in i + 1..points.len() {
                    let d = sub(&points[j], &points[i]);
                    for s in &shifts {
                        let r = norm(&crate::add(&d, s));
                        if r <= cutoff {
                            out.push((i, j, r));
                        }
                    }
                }
            }
        }
        None => {
            let grid = Grid::new(points, cutoff);
            for i in 0..points.len() {
                grid.for_each_near(&points[i], |j| {
                    if j > i {
                        let r = norm(&sub(&points[j], &points[i]));
                        if r <= cutoff {
                            out.push((i, j, r));
                        }
                    }
                });
            }
        }
    }
    out
}

/// Uniform bucket grid in the first two coordinates.
pub(crate) struct Grid {
    size: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl Grid {
    pub(crate) fn new(points: &[Vec3], size: f64) -> Self {
        let size = size.max(1e-6);
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, size)).or_default().push(i);
        }
        Grid { size, buckets }
    }

    fn key(p: &Vec3, size: f64) -> (i64, i64) {
        ((p[0] / size).floor() as i64, (p[1] / size).floor() as i64)
    }

    /// Visits every point within one bucket of `p` (a superset of the ball of
    /// radius `size`).
    pub(crate) fn for_each_near(&self, p: &Vec3, mut f: impl FnMut(usize)) {
        let (kx, ky) = Self::key(p, self.size);
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(b) = self.buckets.get(&(kx + dx, ky + dy)) {
                    for &j in b {
                        f(j);
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Seminorms {
    /// `|Du(l)|_gamma` for every site.
    pub per_site: Vec<f64>,
    /// `||Du||_{l2_gamma}` over the selected subset.
    pub l2: f64,
    /// `||Du||_{l1_gamma}` over the selected subset.
    pub l1: f64,
}

/// Stencil truncation radius at which `exp(-2 gamma r)` drops below `1e-16`.
pub fn truncation_radius(gamma: f64) -> f64 {
    -STENCIL_WEIGHT_FLOOR.ln() / (2.0 * gamma)
}

/// Weighted difference seminorms of a displacement field.
///
/// `|Du(l)|_gamma^2 = sum_rho exp(-2 gamma |rho|) |u(l + rho) - u(l)|^2`, the sum
/// running over the other sites within the truncation radius. `subset`
/// restricts the aggregates (not the stencils) to the given sites.
pub fn seminorms(
    sites: &[Vec3],
    u: &[Vec3],
    gamma: f64,
    cell: Option<&Cell>,
    subset: Option<&[usize]>,
) -> Result<Seminorms> {
    if !(gamma > 0.0) {
        return Err(Error::domain(format!("seminorm weight gamma must be positive, got {gamma}")));
    }
    if u.len() != sites.len() {
        return Err(Error::domain("displacement and site counts differ"));
    }
    let rt = truncation_radius(gamma);
    let mut sq = vec![0.0; sites.len()];
    for (i, j, r) in pairs_within(sites, rt, cell) {
        let w = (-2.0 * gamma * r).exp();
        let du = sub(&u[j], &u[i]);
        let v = w * crate::dot(&du, &du);
        sq[i] += v;
        sq[j] += v;
    }
    let per_site: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..sites.len()).collect();
            &all
        }
    };
    let mut l2 = 0.0;
    let mut l1 = 0.0;
    for &i in idx {
        Error::check_index(i, sites.len())?;
        l2 += sq[i];
        l1 += per_site[i];
    }
    Ok(Seminorms { per_site, l2: l2.sqrt(), l1 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpenetrationReport {
    /// Smallest ratio `|y(l) - y(k)| / |l - k|` over all pairs.
    pub worst_ratio: f64,
    pub worst_pair: Option<(usize, usize)>,
    /// Every pair violating the bound, with its ratio.
    pub violations: Vec<(usize, usize, f64)>,
}

impl InterpenetrationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        match self.violations.iter().min_by(|a, b| a.2.total_cmp(&b.2)) {
            None => Ok(()),
            Some(&(i, j, r)) => Err(Error::Interpenetration(i, j, r)),
        }
    }
}

/// Checks `|y(l) - y(k)| >= m |l - k|` for every pair of sites. Distances are
/// torus distances when `cell` is given. Never fails; violations are reported.
pub fn validate_configuration(
    reference: &[Vec3],
    deformed: &[Vec3],
    m_accum: f64,
    cell: Option<&Cell>,
) -> InterpenetrationReport {
    let dist = |a: &Vec3, b: &Vec3| match cell {
        Some(c) => min_image_distance(a, b, c),
        None => norm(&sub(a, b)),
    };
    let mut worst_ratio = f64::INFINITY;
    let mut worst_pair = None;
    let mut violations = Vec::new();
    let n = reference.len().min(deformed.len());
    for i in 0..n {
        for j in i + 1..n {
            let r0 = dist(&reference[i], &reference[j]);
            if r0 <= 0.0 {
                violations.push((i, j, 0.0));
                continue;
            }
            let ratio = dist(&deformed[i], &deformed[j]) / r0;
            if ratio < worst_ratio {
                worst_ratio = ratio;
                worst_pair = Some((i, j));
            }
            if ratio < m_accum {
                violations.push((i, j, ratio));
            }
        }
    }
    if worst_pair.is_none() {
        worst_ratio = 1.0;
    }
    InterpenetrationReport { worst_ratio, worst_pair, violations }
}

/// Writes a site table: one row per site with index, reference position,
/// displacement and clamped flag.
pub fn write_site_table(path: &Path, dim: usize, sites: &[Vec3], u: &[Vec3], clamped: &[bool]) -> Result<()> {
    std::fs::write(path, site_table_string(dim, sites, u, clamped))?;
    Ok(())
}

pub fn site_table_string(dim: usize, sites: &[Vec3], u: &[Vec3], clamped: &[bool]) -> String {
    let axes = ["x", "y", "z"];
    let mut s = String::from("# index");
    for a in &axes[..dim] {
        let _ = write!(s, " l_{a}");
    }
    for a in &axes {
        let _ = write!(s, " u_{a}");
    }
    s.push_str(" clamped\n");
    for i in 0..sites.len() {
        let _ = write!(s, "{i}");
        for k in 0..dim {
            let _ = write!(s, " {:.16e}", sites[i][k]);
        }
        for k in 0..3 {
            let _ = write!(s, " {:.16e}", u[i][k]);
        }
        let _ = writeln!(s, " {}", clamped[i] as u8);
    }
    s
}

/// Parsed site table.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTable {
    pub dim: usize,
    pub sites: Vec<Vec3>,
    pub u: Vec<Vec3>,
    pub clamped: Vec<bool>,
}

pub fn read_site_table(path: &Path) -> Result<SiteTable> {
    parse_site_table(&std::fs::read_to_string(path)?)
}

pub fn parse_site_table(text: &str) -> Result<SiteTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty site table".into()))?;
    let cols: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
    let dim = cols.iter().filter(|c| c.starts_with("l_")).count();
    if !(1..=3).contains(&dim) || cols.len() != dim + 5 {
        return Err(Error::Parse(format!("unrecognised site table header `{header}`")));
    }
    let mut t = SiteTable { dim, sites: vec![], u: vec![], clamped: vec![] };
    for (row, line) in lines.enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != cols.len() {
            return Err(Error::Parse(format!("row {row}: expected {} columns", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("row {row}: {e}")));
        let mut p = [0.0; 3];
        for k in 0..dim {
            p[k] = num(f[1 + k])?;
        }
        let mut u = [0.0; 3];
        for k in 0..3 {
            u[k] = num(f[1 + dim + k])?;
        }
        t.sites.push(p);
        t.u.push(u);
        t.clamped.push(match f[4 + dim] {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse(format!("row {row}: bad clamped flag `{other}`"))),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn chain_vacancy_enumeration() {
        let r = build_point_defect(&BravaisLattice::chain(1.0), 5.5, DefectKind::Vacancy([0.0; 3]), 1.0).unwrap();
        let xs: Vec<f64> = r.sites.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-5.0, -4.0, -3.0, -2.0, -1.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn square_ball_count_matches_brute_force() {
        let r = build_point_defect(&BravaisLattice::square(1.0), 2.5, DefectKind::None, 0.0).unwrap();
        let mut count = 0;
        for i in -5i32..=5 {
            for j in -5i32..=5 {
                if ((i * i + j * j) as f64).sqrt() <= 2.5 {
                    count += 1;
                }
            }
        }
        assert_eq!(count, 21);
        assert_eq!(r.len(), count);
    }

    #[test]
    fn interstitial_adds_one_site() {
        let l = BravaisLattice::square(1.0);
        let hom = build_point_defect(&l, 6.0, DefectKind::None, 1.0).unwrap();
        let int = build_point_defect(&l, 6.0, DefectKind::Interstitial([0.5, 0.5, 0.0]), 1.0).unwrap();
        assert_eq!(int.len(), hom.len() + 1);
        let mut sorted = int.sites.clone();
        sort_lexicographic(&mut sorted);
        assert_eq!(sorted, int.sites);
    }

    #[test]
    fn defect_outside_core_is_rejected() {
        let l = BravaisLattice::chain(1.0);
        assert!(matches!(
            build_point_defect(&l, 10.0, DefectKind::Vacancy([3.0, 0.0, 0.0]), 1.0),
            Err(Error::InvalidDefect(_))
        ));
        assert!(build_point_defect(&l, 10.0, DefectKind::Vacancy([0.5, 0.0, 0.0]), 1.0).is_err());
        assert!(build_point_defect(&l, 1.0, DefectKind::None, 2.0).is_err());
    }

    #[test]
    fn clamped_partition_chain() {
        let l = BravaisLattice::chain(1.0);
        let r = build_point_defect(&l, 10.0, DefectKind::Vacancy([0.0; 3]), 1.0).unwrap();
        let p = partition_clamped(&r, 3.2, 2.0).unwrap();
        let xs = |v: &[usize]| v.iter().map(|&i| r.sites[i][0] as i64).collect::<Vec<_>>();
        assert_eq!(xs(&p.free), vec![-3, -2, -1, 1, 2, 3]);
        assert_eq!(xs(&p.clamped), vec![-5, -4, 4, 5]);
    }

    #[test]
    fn buffer_rule() {
        assert_eq!(buffer_width(10.0, 4.0, 8.0), 4.0 * 10f64.ln());
        assert_eq!(buffer_width(2.0, 4.0, 8.0), 8.0);
        assert!(buffer_width(200.0, 1.0, 0.1) > 5.0);
    }

    #[test]
    fn torus_distance_examples() {
        let c1 = Cell::new(vec![[10.0, 0.0, 0.0]]).unwrap();
        assert!((torus_distance(&[1.0, 0.0, 0.0], &[9.0, 0.0, 0.0], &c1, 1.8).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(torus_distance(&[3.0, 0.0, 0.0], &[3.0, 0.0, 0.0], &c1, 1.8).unwrap(), 0.0);
        let c2 = Cell::new(vec![[10.0, 0.0, 0.0], [0.0, 10.0, 0.0]]).unwrap();
        let (p, q) = ([9.0, 0.0, 0.0], [0.0, 9.0, 0.0]);
        let mut brute = f64::INFINITY;
        for a in -2..=2 {
            for b in -2..=2 {
                let d = [p[0] - q[0] + 10.0 * a as f64, p[1] - q[1] + 10.0 * b as f64, 0.0];
                brute = brute.min(norm(&d));
            }
        }
        let t = torus_distance(&p, &q, &c2, 1.8).unwrap();
        assert!((t - brute).abs() < 1e-14);
        assert!((t - 2f64.sqrt()).abs() < 1e-14);
        let small = Cell::new(vec![[3.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(torus_distance(&p, &q, &small, 1.8), Err(Error::Configuration(_))));
    }

    #[test]
    fn torus_builder() {
        let (s, c) = build_torus(&BravaisLattice::triangular(1.0), 6, true).unwrap();
        assert_eq!(s.len(), 35);
        assert!((c.min_width() - 6.0 * 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn seminorms_of_constant_fields_vanish() {
        let r = build_point_defect(&BravaisLattice::square(1.0), 4.0, DefectKind::None, 0.0).unwrap();
        for c in [[0.0; 3], [0.3, -1.2, 0.0]] {
            let u = vec![c; r.len()];
            let s = seminorms(&r.sites, &u, 1.0, None, None).unwrap();
            assert_eq!(s.l2, 0.0);
            assert_eq!(s.l1, 0.0);
        }
        assert!(seminorms(&r.sites, &vec![[0.0; 3]; r.len()], 0.0, None, None).is_err());
    }

    #[test]
    fn indicator_seminorms_match_direct_sum() {
        let gamma = 1.0;
        let sites: Vec<Vec3> = (-30..=30).map(|i| [i as f64, 0.0, 0.0]).collect();
        let u: Vec<Vec3> = sites.iter().map(|p| [if p[0] == 0.0 { 1.0 } else { 0.0 }, 0.0, 0.0]).collect();
        let s = seminorms(&sites, &u, gamma, None, None).unwrap();
        // oracle: explicit double loop over all ordered pairs
        let mut sq = vec![0.0; sites.len()];
        for i in 0..sites.len() {
            for j in 0..sites.len() {
                if i != j {
                    let r = (sites[i][0] - sites[j][0]).abs();
                    if r <= truncation_radius(gamma) {
                        sq[i] += (-2.0 * gamma * r).exp() * (u[j][0] - u[i][0]).powi(2);
                    }
                }
            }
        }
        let l2: f64 = sq.iter().sum::<f64>().sqrt();
        let l1: f64 = sq.iter().map(|v| v.sqrt()).sum();
        assert!((s.l2 - l2).abs() < 1e-14);
        assert!((s.l1 - l1).abs() < 1e-13);
    }

    #[test]
    fn interpenetration_checks() {
        let sites: Vec<Vec3> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        let rep = validate_configuration(&sites, &sites, 0.5, None);
        assert!(rep.ok());
        assert_eq!(rep.worst_ratio, 1.0);
        let mut y = sites.clone();
        y[1][0] -= 0.95;
        let rep = validate_configuration(&sites, &y, 0.5, None);
        assert!(!rep.ok());
        assert_eq!(rep.worst_pair, Some((0, 1)));
        assert!(matches!(rep.into_result(), Err(Error::Interpenetration(0, 1, _))));
    }

    #[test]
    fn small_random_displacements_pass() {
        let m = 0.5;
        let r = build_point_defect(&BravaisLattice::square(1.0), 5.0, DefectKind::None, 0.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let bound = 0.999 * (1.0 - m) / 2.0 / 2f64.sqrt();
        let y: Vec<Vec3> = r
            .sites
            .iter()
            .map(|p| [p[0] + rng.gen_range(-bound..bound), p[1] + rng.gen_range(-bound..bound), 0.0])
            .collect();
        assert!(validate_configuration(&r.sites, &y, m, None).ok());
    }

    #[test]
    fn site_table_roundtrip() {
        let sites = vec![[0.0, 1.0, 0.0], [1.0, 0.5, 0.0]];
        let u = vec![[1e-3, -2.5e-7, 0.0], [0.0, 0.0, 0.25]];
        let clamped = vec![false, true];
        let t = parse_site_table(&site_table_string(2, &sites, &u, &clamped)).unwrap();
        assert_eq!(t.dim, 2);
        assert_eq!(t.sites, sites);
        assert_eq!(t.u, u);
        assert_eq!(t.clamped, clamped);
        assert!(parse_site_table("# nonsense\n1 2").is_err());
    }

    #[test]
    fn reciprocal_vectors() {
        let l = BravaisLattice::triangular(1.0);
        let b = l.reciprocal();
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 2.0 * std::f64::consts::PI } else { 0.0 };
                assert!((crate::dot(&b[i], &l.vectors[j]) - expect).abs() < 1e-12);
            }
        }
        assert!((l.nearest_neighbor_distance() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn homogeneous_reference_equals_enumeration(r in 1.0f64..7.0) {
            let l = BravaisLattice::square(1.0);
            let a = build_point_defect(&l, r, DefectKind::None, 0.5).unwrap();
            let mut brute = Vec::new();
            let k = r.ceil() as i64;
            for i in -k..=k {
                for j in -k..=k {
                    let p = [i as f64, j as f64, 0.0];
                    if norm(&p) <= r + GEOMETRY_TOL {
                        brute.push(p);
                    }
                }
            }
            sort_lexicographic(&mut brute);
            prop_assert_eq!(a.sites, brute);
        }

        #[test]
        fn seminorm_weight_monotonicity(seed in 0u64..1000, gamma in 0.3f64..2.0) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sites: Vec<Vec3> = (0..25).map(|i| [(i % 5) as f64, (i / 5) as f64, 0.0]).collect();
            let u: Vec<Vec3> = sites.iter().map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.0]).collect();
            let a = seminorms(&sites, &u, gamma, None, None).unwrap();
            let b = seminorms(&sites, &u, 2.0 * gamma, None, None).unwrap();
            prop_assert!(b.l2 <= a.l2 * (1.0 + 1e-14));
            // l1 <= sqrt(N) l2
            prop_assert!(a.l1 <= (sites.len() as f64).sqrt() * a.l2 * (1.0 + 1e-12));
        }

        #[test]
        fn torus_distance_is_a_metric(
            p in prop::array::uniform3(0.0f64..10.0),
            q in prop::array::uniform3(0.0f64..10.0),
            w in prop::array::uniform3(0.0f64..10.0),
        ) {
            let c = Cell::new(vec![[10.0, 0.0, 0.0], [0.0, 8.0, 0.0]]).unwrap();
            let (p, q, w) = ([p[0], 0.8 * p[1], 0.0], [q[0], 0.8 * q[1], 0.0], [w[0], 0.8 * w[1], 0.0]);
            let d = |a: &Vec3, b: &Vec3| torus_distance(a, b, &c, 1.8).unwrap();
            let dpq = d(&p, &q);
            prop_assert!((dpq - d(&q, &p)).abs() < 1e-12);
            prop_assert!(dpq <= d(&p, &w) + d(&w, &q) + 1e-12);
        }
    }
}
