//! Thermodynamic-limit studies: Fermi-level and displacement convergence
//! sweeps, locality and pointwise-limit probes, and rate fitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dislocation::{antiplane_force_constants, solve_dislocation, solve_dislocation_grand, DislocationDomain, ScrewDislocation};
use crate::equilibrium::{
    solve_canonical, solve_grand_canonical, EquilibriumProblem, EquilibriumSolution, ForceConstants, Mode,
    SolverSettings,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{grad_trace, BondList, Geometry};
use crate::lattice::{build_point_defect, build_torus, buffer_width, partition_clamped, seminorms, BravaisLattice, Cell, DefectKind};
use crate::model::{ModelParams, QoIKind};
use crate::observables::System;
use crate::{norm, sub, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    /// `log y = slope log x + intercept`.
    LogLog,
    /// `log y = slope x + intercept`.
    SemiLog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// Absolute Pearson correlation of the transformed data.
    pub correlation: f64,
    pub points: usize,
    pub discarded: usize,
}

/// Least-squares line through transformed `(x, y)` data after dropping the
/// first `discard` points.
pub fn fit_rate(points: &[(f64, f64)], mode: FitMode, discard: usize) -> Result<RateFit> {
    let used = points.get(discard..).unwrap_or(&[]);
    if used.len() < 4 {
        return Err(Error::InsufficientPoints { needed: 4, got: used.len() });
    }
    let mut xs = Vec::with_capacity(used.len());
    let mut ys = Vec::with_capacity(used.len());
    for &(x, y) in used {
        if !(y > 0.0) || (mode == FitMode::LogLog && !(x > 0.0)) {
            return Err(Error::domain(format!("cannot take logarithms of ({x}, {y})")));
        }
        xs.push(if mode == FitMode::LogLog { x.ln() } else { x });
        ys.push(y.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("all abscissae coincide"));
    }
    let slope = sxy / sxx;
    let correlation = if syy == 0.0 { 1.0 } else { (sxy / (sxx * syy).sqrt()).abs() };
    Ok(RateFit { slope, intercept: my - slope * mx, correlation, points: used.len(), discarded: discard })
}

/// Default discard: the two smallest domains, keeping at least four points.
pub fn default_discard(n: usize) -> usize {
    2usize.min(n.saturating_sub(4))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub r: f64,
    pub n_sites: usize,
    pub ne: f64,
    pub mu: f64,
    pub mu_error: f64,
    /// Displacement error in the weighted seminorm, when measured.
    pub du_error: Option<f64>,
    pub iterations: usize,
    pub force_residual: f64,
    pub count_residual: f64,
    pub linear_solver: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub study: String,
    pub records: Vec<StudyRecord>,
    /// Quantity fitted: `mu_error` or `du_error`.
    pub fitted: String,
    pub rate_theory: f64,
    /// Acceptance bound on the fitted slope.
    pub threshold: f64,
    pub fit: Option<RateFit>,
    pub discard: usize,
}

pub const CSV_COLUMNS: [&str; 10] = [
    "R",
    "N_R",
    "Ne_R",
    "mu_R",
    "mu_error",
    "du_error",
    "iterations",
    "force_residual",
    "count_residual",
    "linear_solver",
];

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl StudyResult {
    pub fn new(study: &str, fitted: &str, rate_theory: f64, threshold: f64) -> Self {
        StudyResult {
            study: study.to_string(),
            records: Vec::new(),
            fitted: fitted.to_string(),
            rate_theory,
            threshold,
            fit: None,
            discard: 0,
        }
    }

    fn values(&self) -> Vec<(f64, f64)> {
        self.records
            .iter()
            .map(|r| (r.r, if self.fitted == "du_error" { r.du_error.unwrap_or(f64::NAN) } else { r.mu_error }))
            .collect()
    }

    /// Fits the tail after the default discard. Records must have strictly
    /// increasing `R`.
    pub fn fit(&mut self) -> Result<RateFit> {
        if self.records.windows(2).any(|w| !(w[1].r > w[0].r)) {
            return Err(Error::domain("study radii must increase strictly"));
        }
        self.discard = default_discard(self.records.len());
        let f = fit_rate(&self.values(), FitMode::LogLog, self.discard)?;
        self.fit = Some(f);
        Ok(f)
    }

    pub fn pass(&self) -> bool {
        self.fit.map(|f| f.slope <= self.threshold).unwrap_or(false)
    }

    pub fn csv(&self, header: &str) -> String {
        let mut s = String::new();
        for line in header.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str(&CSV_COLUMNS.join(","));
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                fmt17(r.r),
                r.n_sites,
                fmt17(r.ne),
                fmt17(r.mu),
                fmt17(r.mu_error),
                r.du_error.map(fmt17).unwrap_or_else(|| "nan".into()),
                r.iterations,
                fmt17(r.force_residual),
                fmt17(r.count_residual),
                r.linear_solver
            );
        }
        s
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "study": self.study,
            "rate_theory": self.rate_theory,
            "rate_fitted": self.fit.map(|f| f.slope),
            "correlation": self.fit.map(|f| f.correlation),
            "threshold": self.threshold,
            "pass": self.pass(),
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json`.
    pub fn write(&self, stem: &Path, header: &str) -> Result<()> {
        std::fs::write(stem.with_extension("csv"), self.csv(header))?;
        let js = serde_json::to_string_pretty(&self.summary()).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(stem.with_extension("json"), js)?;
        Ok(())
    }
}

/// Boundary regime of a point-defect domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Ball of radius `R` free, buffer of width `R_b` clamped at `u = 0`.
    Clamped,
    /// Torus with `2R` sites per axis, one site far from the defect pinned.
    Torus,
}

/// Fixed ingredients of a point-defect sweep.
#[derive(Clone, Debug)]
pub struct PointDefectSetup {
    pub lattice: BravaisLattice,
    pub params: ModelParams,
    /// Vacancy at the origin when true, otherwise the perfect crystal.
    pub vacancy: bool,
    /// `R_b = max(rb_min, c_b ln R)`.
    pub c_b: f64,
    pub rb_min: f64,
    pub gamma: f64,
    pub mu_hom: f64,
    pub settings: SolverSettings,
    pub preconditioner: Option<Arc<ForceConstants>>,
}

impl PointDefectSetup {
    pub fn axes(&self) -> Vec<usize> {
        (0..self.lattice.dim()).collect()
    }

    pub fn buffer(&self, r: f64) -> f64 {
        buffer_width(r, self.c_b, self.rb_min)
    }

    /// Reference geometry and free sites for radius `r`.
    pub fn domain(&self, regime: Regime, r: f64) -> Result<(Geometry, Vec<usize>)> {
        match regime {
            Regime::Clamped => {
                let kind = if self.vacancy { DefectKind::Vacancy([0.0; 3]) } else { DefectKind::None };
                let rb = self.buffer(r);
                let cfg = build_point_defect(&self.lattice, r + rb, kind, 0.0)?;
                let part = partition_clamped(&cfg, r, rb)?;
                Ok((Geometry::open(cfg.sites), part.free))
            }
            Regime::Torus => {
                let l = (2.0 * r).round() as usize;
                let (sites, cell) = build_torus(&self.lattice, l, self.vacancy)?;
                let pin = farthest_from_origin(&sites, &cell);
                let free = (0..sites.len()).filter(|&i| i != pin).collect();
                Ok((Geometry::torus(sites, cell), free))
            }
        }
    }
}

fn farthest_from_origin(sites: &[Vec3], cell: &Cell) -> usize {
    let mut best = (0, -1.0);
    for (i, s) in sites.iter().enumerate() {
        let d = cell
            .unit_shifts()
            .iter()
            .map(|t| norm(&crate::add(s, t)))
            .fold(f64::INFINITY, f64::min);
        if d > best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Relaxed state of one domain.
#[derive(Clone, Debug)]
pub struct Relaxed {
    pub r: f64,
    pub geometry: Geometry,
    pub free: Vec<usize>,
    pub ne: f64,
    pub solution: EquilibriumSolution,
    pub seconds: f64,
}

impl Relaxed {
    pub fn n_sites(&self) -> usize {
        self.geometry.len()
    }

    pub fn record(&self, mu_hom: f64, du_error: Option<f64>) -> StudyRecord {
        StudyRecord {
            r: self.r,
            n_sites: self.n_sites(),
            ne: self.ne,
            mu: self.solution.tau,
            mu_error: (self.solution.tau - mu_hom).abs(),
            du_error,
            iterations: self.solution.iterations,
            force_residual: self.solution.force_residual,
            count_residual: self.solution.count_residual,
            linear_solver: self.solution.linear_solver.clone(),
        }
    }
}

/// Ensemble of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ensemble {
    /// `Ne = N + offset`.
    Canonical { ne_offset: f64 },
    /// Fixed `tau`.
    GrandCanonical { tau: f64 },
}

/// Relaxes one point-defect domain from `u = 0`, `tau0 = mu_hom`.
pub fn relax_point_defect(setup: &PointDefectSetup, regime: Regime, r: f64, ensemble: Ensemble) -> Result<Relaxed> {
    let t0 = Instant::now();
    let (geom, free) = setup.domain(regime, r)?;
    let n = geom.len();
    let mode = match ensemble {
        Ensemble::Canonical { ne_offset } => Mode::Canonical { ne: n as f64 + ne_offset },
        Ensemble::GrandCanonical { tau } => Mode::GrandCanonical { tau },
    };
    let mut prob =
        EquilibriumProblem::new(setup.params, geom.clone(), free.clone(), setup.axes(), mode)?.with_settings(setup.settings.clone());
    prob.preconditioner = setup.preconditioner.clone();
    let u0 = vec![[0.0; 3]; n];
    let sol = match ensemble {
        Ensemble::Canonical { .. } => solve_canonical(&prob, &u0, setup.mu_hom)?,
        Ensemble::GrandCanonical { .. } => solve_grand_canonical(&prob, &u0)?,
    };
    let ne = match mode {
        Mode::Canonical { ne } => ne,
        Mode::GrandCanonical { .. } => sol_electrons(&prob, &sol)?,
    };
    log::info!("relaxed R = {r} ({n} sites) in {} Newton steps", sol.iterations);
    Ok(Relaxed { r, geometry: geom, free, ne, solution: sol, seconds: t0.elapsed().as_secs_f64() })
}

fn sol_electrons(prob: &EquilibriumProblem, sol: &EquilibriumSolution) -> Result<f64> {
    let sys = System::new(prob.geometry(&sol.u), prob.params)?;
    Ok(sys.total_qoi(QoIKind::Number, sol.tau))
}

/// Runs `task` for every radius on at most `workers` threads. Results keep
/// the order of `rs`; the first failure ends the list and is returned
/// alongside the completed prefix.
pub fn sweep<T, F>(rs: &[f64], workers: usize, task: F) -> (Vec<T>, Option<Error>)
where
    T: Send,
    F: Fn(f64) -> Result<T> + Sync,
{
    let run = || rs.par_iter().map(|&r| task(r)).collect::<Vec<_>>();
    let results = match rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build() {
        Ok(pool) => pool.install(run),
        Err(_) => run(),
    };
    let mut out = Vec::new();
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) => return (out, Some(e)),
        }
    }
    (out, None)
}

/// `||D(u_a - u_b)||_{l2_gamma}` with both fields placed on the sites of the
/// larger domain `b` (sites of `b` missing from `a` count as zero in `a`).
pub fn displacement_distance(a: &Relaxed, b: &Relaxed, gamma: f64) -> Result<f64> {
    let key = |p: &Vec3| [(p[0] * 1e6).round() as i64, (p[1] * 1e6).round() as i64, (p[2] * 1e6).round() as i64];
    let ua: BTreeMap<[i64; 3], Vec3> =
        a.geometry.pos.iter().zip(&a.solution.u).map(|(p, u)| (key(p), *u)).collect();
    let diff: Vec<Vec3> = b
        .geometry
        .pos
        .iter()
        .zip(&b.solution.u)
        .map(|(p, ub)| {
            let x = ua.get(&key(p)).copied().unwrap_or([0.0; 3]);
            sub(&x, ub)
        })
        .collect();
    Ok(seminorms(&b.geometry.pos, &diff, gamma, b.geometry.cell.as_ref(), None)?.l2)
}

/// `|mu_R - mu_hom|` study from a sweep.
pub fn mu_study_from(name: &str, runs: &[Relaxed], mu_hom: f64, rate_theory: f64, threshold: f64) -> StudyResult {
    let mut s = StudyResult::new(name, "mu_error", rate_theory, threshold);
    s.records = runs.iter().map(|r| r.record(mu_hom, None)).collect();
    s
}

/// Self-convergence of displacements against a reference run on a larger domain.
pub fn displacement_study_from(
    name: &str,
    runs: &[Relaxed],
    reference: &Relaxed,
    mu_hom: f64,
    gamma: f64,
    rate_theory: f64,
    threshold: f64,
) -> Result<StudyResult> {
    let mut s = StudyResult::new(name, "du_error", rate_theory, threshold);
    for r in runs {
        s.records.push(r.record(mu_hom, Some(displacement_distance(r, reference, gamma)?)));
    }
    Ok(s)
}

/// Distance between two sweeps over the same radii, e.g. grand-canonical
/// against canonical relaxations.
pub fn pairwise_study_from(
    name: &str,
    a: &[Relaxed],
    b: &[Relaxed],
    mu_hom: f64,
    gamma: f64,
    rate_theory: f64,
    threshold: f64,
) -> Result<StudyResult> {
    let mut s = StudyResult::new(name, "du_error", rate_theory, threshold);
    for (x, y) in a.iter().zip(b) {
        s.records.push(y.record(mu_hom, Some(displacement_distance(x, y, gamma)?)));
    }
    Ok(s)
}

/// `|mu_a(R) - mu_b(R)|` in the `mu_error` column.
pub fn mu_difference_study_from(name: &str, a: &[Relaxed], b: &[Relaxed], rate_theory: f64, threshold: f64) -> StudyResult {
    let mut s = StudyResult::new(name, "mu_error", rate_theory, threshold);
    for (x, y) in a.iter().zip(b) {
        s.records.push(y.record(x.solution.tau, None));
    }
    s
}

/// Fermi-level convergence sweep.
pub fn mu_convergence_study(
    setup: &PointDefectSetup,
    regime: Regime,
    rs: &[f64],
    ne_offset: f64,
    workers: usize,
) -> Result<(StudyResult, Vec<Relaxed>)> {
    let d = setup.lattice.dim() as f64;
    let rate = -(1f64.min(d / 2.0));
    let name = format!("mu-convergence-{}d-{regime:?}", setup.lattice.dim()).to_lowercase();
    let (runs, err) = sweep(rs, workers, |r| relax_point_defect(setup, regime, r, Ensemble::Canonical { ne_offset }));
    let mut s = mu_study_from(&name, &runs, setup.mu_hom, rate, rate + 0.1);
    if let Some(e) = err {
        log::error!("study aborted after {} radii: {e}", runs.len());
        return Err(e);
    }
    s.fit()?;
    Ok((s, runs))
}

/// Displacement self-convergence against a reference at `2 max(R)`.
pub fn displacement_convergence_study(
    setup: &PointDefectSetup,
    regime: Regime,
    rs: &[f64],
    workers: usize,
) -> Result<(StudyResult, Vec<Relaxed>, Relaxed)> {
    let r_max = 2.0 * rs.iter().copied().fold(0.0, f64::max);
    let ens = Ensemble::Canonical { ne_offset: 0.0 };
    let reference = relax_point_defect(setup, regime, r_max, ens)?;
    let (runs, err) = sweep(rs, workers, |r| relax_point_defect(setup, regime, r, ens));
    if let Some(e) = err {
        return Err(e);
    }
    let d = setup.lattice.dim() as f64;
    let rate = -(1f64.min(d / 2.0));
    let name = format!("displacement-convergence-{}d", setup.lattice.dim());
    let mut s = displacement_study_from(&name, &runs, &reference, setup.mu_hom, setup.gamma, rate, rate + 0.15)?;
    s.fit()?;
    Ok((s, runs, reference))
}

/// Per-shell maxima of `|Du(l)|_gamma` over free sites at distance
/// `r_lo <= |l - centre| <= r_hi`, binned into shells of unit width.
pub fn decay_profile(run: &Relaxed, centre: &Vec3, gamma: f64, r_lo: f64, r_hi: f64) -> Result<Vec<(f64, f64)>> {
    let sn = seminorms(&run.geometry.pos, &run.solution.u, gamma, run.geometry.cell.as_ref(), None)?;
    Ok(shell_maxima(&run.geometry.pos, &run.free, &sn.per_site, centre, r_lo, r_hi))
}

/// Far-field decay of a relaxed point-defect field: per-shell maxima of
/// `|Du(l)|_gamma` for `r_lo <= |l| <= r_hi` above `100 force_tol` (the
/// level at which solver noise dominates), and their log-log fit.
pub fn decay_fit(run: &Relaxed, gamma: f64, r_lo: f64, r_hi: f64, force_tol: f64) -> Result<(Vec<(f64, f64)>, RateFit)> {
    let profile: Vec<(f64, f64)> = decay_profile(run, &[0.0; 3], gamma, r_lo.max(1.0), r_hi)?
        .into_iter()
        .filter(|p| p.1 > 100.0 * force_tol)
        .collect();
    let fit = fit_rate(&profile, FitMode::LogLog, 0)?;
    Ok((profile, fit))
}

pub fn shell_maxima(pos: &[Vec3], sites: &[usize], values: &[f64], centre: &Vec3, r_lo: f64, r_hi: f64) -> Vec<(f64, f64)> {
    let mut shells: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for &i in sites {
        let r = norm(&sub(&pos[i], centre));
        if r < r_lo || r > r_hi {
            continue;
        }
        let e = shells.entry(r.floor() as i64).or_insert((r, 0.0));
        if values[i] > e.1 {
            *e = (r, values[i]);
        }
    }
    shells.into_values().filter(|(_, v)| *v > 0.0).collect()
}

/// Per-unit-shell maxima of a radial profile `(r, value)` with
/// `r_lo <= r <= r_hi`.
pub fn profile_shell_maxima(profile: &[(f64, f64)], r_lo: f64, r_hi: f64) -> Vec<(f64, f64)> {
    let mut shells: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for &(r, v) in profile.iter().filter(|p| p.0 >= r_lo && p.0 <= r_hi) {
        let e = shells.entry(r.floor() as i64).or_insert((r, 0.0));
        if v > e.1 {
            *e = (r, v);
        }
    }
    shells.into_values().filter(|(_, v)| *v > 0.0).collect()
}

/// Decay table of `|dA_l / d[y(m)]_i|` against `r_lm` with a semilog fit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalityTable {
    /// `(m, r_lm, max_i |dA_l / d[y(m)]_i|)`.
    pub rows: Vec<(usize, f64, f64)>,
    /// Decay rate `gamma_fit = -slope`.
    pub gamma_fit: f64,
    pub fit: RateFit,
}

/// Derivatives of a site-local quantity with respect to every position:
/// `dA_l/dy(m) = grad Tr(B H)` with `B = Psi diag(c) L diag(c) Psi^T`,
/// `c_s = [psi_s]_l` and `L` the divided differences of the kernel.
pub fn local_derivatives(sys: &System, site: usize, kind: QoIKind, tau: f64) -> Result<Vec<Vec3>> {
    Error::check_index(site, sys.len())?;
    let p = &sys.params;
    let lam = &sys.spec.eigenvalues;
    let n = lam.len();
    let a: Vec<f64> = lam.iter().map(|&x| p.kernel(kind, x, tau)).collect();
    let c = sys.spec.site_column(site).to_vec();
    let lmat = faer::Mat::from_fn(n, n, |s, t| {
        let d = lam[s] - lam[t];
        let l = if d.abs() > 1e-6 { (a[s] - a[t]) / d } else { p.kernel_dx(kind, 0.5 * (lam[s] + lam[t]), tau) };
        c[s] * l * c[t]
    });
    let b = &sys.spec.psi * &lmat * &sys.spec.phi;
    let mut pv = crate::hamiltonian::PatternValues::zeros(&sys.bonds);
    for i in 0..n {
        pv.diag[i] = b[(i, i)];
    }
    for (k, bd) in sys.bonds.bonds.iter().enumerate() {
        pv.bond[k] = b[(bd.i, bd.j)];
    }
    Ok(grad_trace(&sys.bonds, p, &pv))
}

/// Locality of a site-local quantity: semilog fit of derivative magnitudes
/// above `floor` (relative to the largest) against distance.
pub fn locality_probe(sys: &System, site: usize, kind: QoIKind, tau: f64, sites: &[usize]) -> Result<LocalityTable> {
    let g = local_derivatives(sys, site, kind, tau)?;
    let mut rows: Vec<(usize, f64, f64)> = sites
        .iter()
        .map(|&m| {
            let r = norm(&sub(&sys.geom.pos[m], &sys.geom.pos[site]));
            (m, r, g[m].iter().fold(0.0f64, |a, b| a.max(b.abs())))
        })
        .collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    let top = rows.iter().map(|r| r.2).fold(0.0, f64::max);
    // per-distance maxima above the rounding floor
    let mut by_r: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for &(_, r, v) in &rows {
        if r == 0.0 || v <= 1e-13 * top {
            continue;
        }
        let e = by_r.entry((r * 1e6).round() as i64).or_insert((r, 0.0));
        e.1 = e.1.max(v);
    }
    let pts: Vec<(f64, f64)> = by_r.into_values().collect();
    let fit = fit_rate(&pts, FitMode::SemiLog, 0)?;
    Ok(LocalityTable { rows, gamma_fit: -fit.slope, fit })
}

/// Nested-domain values `A_l(y^{Omega_R})`, their distances to the value on
/// the largest domain, and a semilog fit of those distances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointwiseTable {
    /// `(R, A_l, |A_l(R) - A_l(R_max)|)`.
    pub rows: Vec<(f64, f64, f64)>,
    pub fit: Option<RateFit>,
}

/// Local quantity at the site nearest `centre` for every domain
/// `{x in y : shape(x - centre) <= R}`.
pub fn pointwise_limit_probe<S>(
    params: &ModelParams,
    y: &[Vec3],
    centre: &Vec3,
    kind: QoIKind,
    tau: f64,
    rs: &[f64],
    shape: S,
) -> Result<PointwiseTable>
where
    S: Fn(&Vec3) -> f64,
{
    let mut vals = Vec::new();
    for &r in rs {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| shape(&sub(&y[i], centre)) <= r + 1e-9).collect();
        let pos: Vec<Vec3> = idx.iter().map(|&i| y[i]).collect();
        let site = (0..pos.len())
            .min_by(|&a, &b| norm(&sub(&pos[a], centre)).total_cmp(&norm(&sub(&pos[b], centre))))
            .ok_or_else(|| Error::domain("empty domain"))?;
        let sys = System::new(Geometry::open(pos), *params)?;
        vals.push((r, sys.local_qoi(site, kind, tau)?));
    }
    let last = vals.last().map(|v| v.1).unwrap_or(0.0);
    let rows: Vec<(f64, f64, f64)> = vals.iter().map(|&(r, a)| (r, a, (a - last).abs())).collect();
    let pts: Vec<(f64, f64)> = rows[..rows.len().saturating_sub(1)].iter().filter(|r| r.2 > 0.0).map(|r| (r.0, r.2)).collect();
    let fit = fit_rate(&pts, FitMode::SemiLog, 0).ok();
    Ok(PointwiseTable { rows, fit })
}

/// Euclidean ball shape for [`pointwise_limit_probe`].
pub fn ball_shape(v: &Vec3) -> f64 {
    norm(v)
}

/// Axis-aligned box shape (`max |v_i|`).
pub fn box_shape(v: &Vec3) -> f64 {
    v.iter().fold(0.0f64, |a, b| a.max(b.abs()))
}

/// A relaxed dislocation domain.
#[derive(Clone, Debug)]
pub struct RelaxedDislocation {
    pub domain: DislocationDomain,
    pub ne: f64,
    pub solution: EquilibriumSolution,
    pub seconds: f64,
}

impl RelaxedDislocation {
    pub fn record(&self, mu_hom: f64) -> StudyRecord {
        StudyRecord {
            r: self.domain.r,
            n_sites: self.domain.set.len(),
            ne: self.ne,
            mu: self.solution.tau,
            mu_error: (self.solution.tau - mu_hom).abs(),
            du_error: None,
            iterations: self.solution.iterations,
            force_residual: self.solution.force_residual,
            count_residual: self.solution.count_residual,
            linear_solver: self.solution.linear_solver.clone(),
        }
    }

    /// Per-shell maxima of `|D'u(l)|_gamma` over free sites.
    pub fn strain_decay(&self, gamma: f64, r_lo: f64, r_hi: f64) -> Result<Vec<(f64, f64)>> {
        let sites = &self.domain.set.sites;
        let sn = seminorms(sites, &self.solution.u, gamma, None, None)?;
        Ok(shell_maxima(sites, &self.domain.partition.free, &sn.per_site, &self.domain.disl.core3(), r_lo, r_hi))
    }
}

/// Setup of a dislocation sweep.
#[derive(Clone, Debug)]
pub struct DislocationSetup {
    pub disl: ScrewDislocation,
    pub params: ModelParams,
    pub c_b: f64,
    pub rb_min: f64,
    pub ne_offset: f64,
    pub mu_hom: f64,
    pub settings: SolverSettings,
    pub preconditioner: Option<Arc<ForceConstants>>,
}

impl DislocationSetup {
    pub fn with_preconditioner(mut self, r_pc: f64) -> Result<Self> {
        self.preconditioner = Some(Arc::new(antiplane_force_constants(&self.params, &self.disl, r_pc)?));
        Ok(self)
    }
}

pub fn relax_dislocation(setup: &DislocationSetup, r: f64, ensemble: Ensemble) -> Result<RelaxedDislocation> {
    let t0 = Instant::now();
    let rb = buffer_width(r, setup.c_b, setup.rb_min);
    let domain = DislocationDomain::new(&setup.disl, r, rb)?;
    let pc = setup.preconditioner.clone();
    let (ne, (_, sol)) = match ensemble {
        Ensemble::Canonical { ne_offset } => {
            let ne = domain.set.len() as f64 + ne_offset;
            (ne, solve_dislocation(&domain, &setup.params, ne_offset, setup.mu_hom, setup.settings.clone(), pc)?)
        }
        Ensemble::GrandCanonical { tau } => {
            let out = solve_dislocation_grand(&domain, &setup.params, tau, setup.settings.clone(), pc)?;
            (sol_electrons(&out.0, &out.1)?, out)
        }
    };
    log::info!("relaxed dislocation R = {r} ({} sites) in {} Newton steps", domain.set.len(), sol.iterations);
    Ok(RelaxedDislocation { domain, ne, solution: sol, seconds: t0.elapsed().as_secs_f64() })
}

/// Fermi-level convergence around a screw dislocation.
pub fn dislocation_mu_study(
    setup: &DislocationSetup,
    rs: &[f64],
    workers: usize,
) -> Result<(StudyResult, Vec<RelaxedDislocation>)> {
    let (runs, err) = sweep(rs, workers, |r| relax_dislocation(setup, r, Ensemble::Canonical { ne_offset: setup.ne_offset }));
    if let Some(e) = err {
        return Err(e);
    }
    let mut s = StudyResult::new("dislocation-mu-convergence", "mu_error", -1.0, -0.8);
    s.records = runs.iter().map(|r| r.record(setup.mu_hom)).collect();
    s.discard = 0;
    let f = fit_rate(&s.values(), FitMode::LogLog, 0)?;
    s.fit = Some(f);
    Ok((s, runs))
}

/// Bond list of a geometry, for callers that probe locality on custom sets.
pub fn bond_list(geom: &Geometry, params: &ModelParams) -> Result<BondList> {
    BondList::new(geom, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn fit_exact_power_and_exponential() {
        let pts: Vec<(f64, f64)> = (1..8).map(|k| (k as f64 * 3.0, 3.0 / (k as f64 * 3.0))).collect();
        let f = fit_rate(&pts, FitMode::LogLog, 0).unwrap();
        assert!((f.slope + 1.0).abs() < 1e-12 && (f.correlation - 1.0).abs() < 1e-12);
        let pts: Vec<(f64, f64)> = (0..8).map(|k| (k as f64, 5.0 * (-2.0 * k as f64).exp())).collect();
        let f = fit_rate(&pts, FitMode::SemiLog, 0).unwrap();
        assert!((f.slope + 2.0).abs() < 1e-12);
        assert!((f.intercept - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fit_noisy_power_law() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let pts: Vec<(f64, f64)> =
            (0..8).map(|k| 10.0 * 2f64.powi(k)).map(|r| (r, 2.0 * r.powf(-0.5) * (1.0 + 0.01 * rng.gen_range(-1.0..1.0)))).collect();
        let f = fit_rate(&pts, FitMode::LogLog, 2).unwrap();
        assert!((f.slope + 0.5).abs() <= 0.05);
    }

    #[test]
    fn fit_needs_four_points() {
        let pts = [(1.0, 1.0), (2.0, 0.5), (3.0, 0.3), (4.0, 0.2), (5.0, 0.1)];
        assert!(matches!(fit_rate(&pts, FitMode::LogLog, 2), Err(Error::InsufficientPoints { needed: 4, got: 3 })));
        assert!(fit_rate(&[(1.0, 0.0), (2.0, 1.0), (3.0, 1.0), (4.0, 1.0)], FitMode::LogLog, 0).is_err());
        assert_eq!(default_discard(5), 1);
        assert_eq!(default_discard(6), 2);
        assert_eq!(default_discard(3), 0);
    }

    #[test]
    fn csv_has_exact_header_and_is_stable() {
        let mut s = StudyResult::new("x", "mu_error", -0.5, -0.4);
        for (k, r) in [10.0, 20.0, 40.0, 80.0].iter().enumerate() {
            s.records.push(StudyRecord {
                r: *r,
                n_sites: 10 * (k + 1),
                ne: 10.0,
                mu: 0.1,
                mu_error: 1.0 / r,
                du_error: None,
                iterations: 3,
                force_residual: 1e-12,
                count_residual: 0.0,
                linear_solver: "dense-fd".into(),
            });
        }
        s.fit().unwrap();
        assert!(s.pass());
        let a = s.csv("tblimit test");
        assert_eq!(a, s.csv("tblimit test"));
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[1], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 6);
        let js = s.summary();
        assert!(js["rate_fitted"].as_f64().unwrap() < -0.9);
    }

    #[test]
    fn homogeneous_rings_are_exact() {
        let p = ModelParams::default();
        let setup = PointDefectSetup {
            lattice: BravaisLattice::chain(1.0),
            params: p,
            vacancy: false,
            c_b: 4.0,
            rb_min: 8.0,
            gamma: 1.0,
            mu_hom: p.ons(2.0 * p.rho(1.0).unwrap()),
            settings: SolverSettings::default(),
            preconditioner: None,
        };
        for r in [4.0, 8.0, 16.0] {
            let run = relax_point_defect(&setup, Regime::Torus, r, Ensemble::Canonical { ne_offset: 0.0 }).unwrap();
            assert!(run.record(setup.mu_hom, None).mu_error <= 1e-10);
        }
    }

    #[test]
    fn locality_on_a_chain() {
        let p = ModelParams::default();
        let pos: Vec<Vec3> = (0..80).map(|i| [i as f64, 0.0, 0.0]).collect();
        let sys = System::new(Geometry::open(pos), p).unwrap();
        let mu = sys.solve_mu(80.0).unwrap().mu;
        let t = locality_probe(&sys, 40, QoIKind::Number, mu, &(0..80).collect::<Vec<_>>()).unwrap();
        assert!(t.gamma_fit > 0.0 && t.fit.correlation >= 0.95, "{:?}", t.fit);
        // the derivative is largest at the site itself or its neighbours
        let top = t.rows.iter().max_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
        assert!(top.1 <= 1.0 + 1e-12);
    }

    #[test]
    fn local_derivatives_match_differences() {
        let p = ModelParams::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let pos: Vec<Vec3> = (0..12)
            .map(|k| [(k % 4) as f64 + rng.gen_range(-0.1..0.1), (k / 4) as f64 + rng.gen_range(-0.1..0.1), 0.0])
            .collect();
        let sys = System::new(Geometry::open(pos.clone()), p).unwrap();
        let g = local_derivatives(&sys, 5, QoIKind::Helmholtz, 0.2).unwrap();
        let h = 1e-5;
        for m in 0..12 {
            let mut a = pos.clone();
            let mut b = pos.clone();
            a[m][1] += h;
            b[m][1] -= h;
            let fa = System::new(Geometry::open(a), p).unwrap().local_qoi(5, QoIKind::Helmholtz, 0.2).unwrap();
            let fb = System::new(Geometry::open(b), p).unwrap().local_qoi(5, QoIKind::Helmholtz, 0.2).unwrap();
            assert!(((fa - fb) / (2.0 * h) - g[m][1]).abs() < 1e-7);
        }
    }

    #[test]
    fn pointwise_limit_on_a_chain() {
        let p = ModelParams::default();
        let y: Vec<Vec3> = (-40..=40).map(|i| [i as f64, 0.0, 0.0]).collect();
        let rs: Vec<f64> = (2..=20).map(|k| 2.0 * k as f64).collect();
        let t = pointwise_limit_probe(&p, &y, &[0.0; 3], QoIKind::Number, 0.3, &rs, ball_shape).unwrap();
        let fit = t.fit.unwrap();
        assert!(fit.slope < 0.0 && fit.correlation >= 0.95, "{fit:?}");
    }
}
