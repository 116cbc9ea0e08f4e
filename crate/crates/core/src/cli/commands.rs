//! Subcommand bodies. Each writes its artifacts and returns the pass flag of
//! its declared tolerances.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use serde_json::json;

use tblimit::dislocation::{
    branch_cut_residual, predictor_strain_profile, slip_invariance_residual, write_predictor, SiteSet,
};
use tblimit::equilibrium::{write_solution, EquilibriumProblem, ForceConstants, Mode};
use tblimit::identities::{identity_suite, invariance_suite, Check};
use tblimit::observables::{fermi_level_bloch, fermi_level_supercell, ReferenceConstant, System};
use tblimit::studies::{
    ball_shape, box_shape, decay_fit, dislocation_mu_study, fit_rate, locality_probe, mu_difference_study_from,
    pairwise_study_from, pointwise_limit_probe, profile_shell_maxima, relax_dislocation, relax_point_defect, sweep, DislocationSetup, Ensemble, FitMode,
    PointDefectSetup, StudyResult,
};
use tblimit::{Error, Geometry, ModelParams, QoIKind, Result, VERSION};

use super::config::{DefectSpec, EnsembleSpec, RunConfig};

/// Shared state of one invocation.
pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub workers: usize,
    pub command: String,
}

impl Context {
    pub fn header(&self) -> String {
        format!("tblimit {VERSION} config-sha256 {}\ncommand {}", self.hash, self.command)
    }

    pub fn out(&self, name: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.config.output_dir)?;
        Ok(self.config.output_dir.join(name))
    }

    fn write_json(&self, name: &str, mut value: serde_json::Value) -> Result<()> {
        value["config_sha256"] = json!(self.hash);
        value["version"] = json!(VERSION);
        let text = serde_json::to_string_pretty(&value).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(self.out(name)?, text + "\n")?;
        Ok(())
    }

    fn write_study(&self, s: &StudyResult) -> Result<()> {
        s.write(&self.out(&s.study)?, &self.header())
    }

    fn k_points(&self, dim: usize) -> usize {
        if dim == 1 {
            4096
        } else {
            self.config.fermi.bloch_points.max(256)
        }
    }

    fn mu_hom(&self, params: &ModelParams) -> Result<f64> {
        let lat = self.config.lattice();
        Ok(fermi_level_bloch(params, &lat, None, self.k_points(lat.dim()))?.mu_hom)
    }

    fn point_defect_setup(&self) -> Result<PointDefectSetup> {
        let lattice = self.config.lattice();
        let params = self.config.params()?;
        let mu_hom = self.mu_hom(&params)?;
        let axes: Vec<usize> = (0..lattice.dim()).collect();
        let r_pc = self.config.study.preconditioner_radius;
        let preconditioner = if r_pc > 0.0 {
            Some(Arc::new(ForceConstants::homogeneous(&params, &lattice, None, &axes, r_pc)?))
        } else {
            None
        };
        Ok(PointDefectSetup {
            lattice,
            params,
            vacancy: self.config.lattice.defect == DefectSpec::Vacancy,
            c_b: self.config.boundary.c_b,
            rb_min: self.config.boundary.rb_min,
            gamma: self.config.study.gamma,
            mu_hom,
            settings: self.config.solver.clone(),
            preconditioner,
        })
    }
}

fn checks_json(checks: &[Check]) -> serde_json::Value {
    json!(checks)
}

fn report(checks: &[Check]) {
    for c in checks {
        println!("{} {} value {:.3e} tolerance {:.1e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
}

/// Both homogeneous Fermi-level routes and their agreement.
pub fn fermi_level(ctx: &Context) -> Result<bool> {
    let lat = ctx.config.lattice();
    let params = ctx.config.params()?;
    let bloch = fermi_level_bloch(&params, &lat, None, ctx.config.fermi.bloch_points)?;
    let cell = fermi_level_supercell(&params, &lat, &ctx.config.fermi.supercell_sizes)?;
    let diff = (bloch.mu_hom - cell.mu_hom).abs();
    let date = chrono::Local::now().format("%Y-%m-%d").to_string();
    let name = format!("mu_hom_{:?}", ctx.config.lattice.kind).to_lowercase();
    let grid = vec![bloch.resolution.to_string(); lat.dim()].join("x");
    tblimit::observables::write_reference_constants(
        &ctx.out("reference_constants.toml")?,
        vec![
            ReferenceConstant {
                name: name.clone(),
                value: bloch.mu_hom,
                method: "bloch-quadrature".into(),
                resolution: format!("midpoint grid {grid}"),
                date: date.clone(),
            },
            ReferenceConstant {
                name: format!("{name}_supercell"),
                value: cell.mu_hom,
                method: "supercell-extrapolation".into(),
                resolution: format!("torus size {}", cell.resolution),
                date,
            },
        ],
    )?;
    let pass = diff <= ctx.config.fermi.tolerance;
    ctx.write_json(
        "fermi_level.json",
        json!({
            "bloch": bloch,
            "supercell": cell,
            "difference": diff,
            "tolerance": ctx.config.fermi.tolerance,
            "pass": pass,
        }),
    )?;
    println!("mu_hom bloch {:.16e} supercell {:.16e} difference {diff:.3e}", bloch.mu_hom, cell.mu_hom);
    if diff > 1e-6 {
        return Err(Error::Domain(format!("Fermi-level methods disagree by {diff:.3e}")));
    }
    Ok(pass)
}

/// One relaxation with solution files.
pub fn relax(ctx: &Context) -> Result<bool> {
    let setup = ctx.point_defect_setup()?;
    let rc = &ctx.config.relax;
    let regime = ctx.config.boundary.regime;
    let (geom, _) = setup.domain(regime, rc.radius)?;
    let n = geom.len() as f64;
    let ensemble = match rc.ensemble {
        EnsembleSpec::Canonical => Ensemble::Canonical { ne_offset: (rc.ne_per_site - 1.0) * n + rc.ne_offset },
        EnsembleSpec::GrandCanonical => Ensemble::GrandCanonical { tau: rc.tau.unwrap_or(setup.mu_hom) },
    };
    let run = relax_point_defect(&setup, regime, rc.radius, ensemble)?;
    let mode = match ensemble {
        Ensemble::Canonical { .. } => Mode::Canonical { ne: run.ne },
        Ensemble::GrandCanonical { tau } => Mode::GrandCanonical { tau },
    };
    let prob = EquilibriumProblem::new(setup.params, run.geometry.clone(), run.free.clone(), setup.axes(), mode)?;
    write_solution(&ctx.out("relax")?, &prob, &run.solution, &ctx.header())?;
    println!(
        "relaxed {} sites: mu {:.12} force residual {:.3e} in {} iterations",
        run.n_sites(),
        run.solution.tau,
        run.solution.force_residual,
        run.solution.iterations
    );
    Ok(run.solution.converged)
}

/// Fermi-level convergence with `Ne = N + offset`, plus the comparison
/// against `Ne = N - 2` when the configured offset is zero.
pub fn mu_study(ctx: &Context) -> Result<bool> {
    let setup = ctx.point_defect_setup()?;
    let regime = ctx.config.boundary.regime;
    let rs = &ctx.config.study.radii;
    let (s, runs) = tblimit::studies::mu_convergence_study(&setup, regime, rs, ctx.config.study.ne_offset, ctx.workers)?;
    ctx.write_study(&s)?;
    let mut pass = s.pass();
    println!("{}: slope {:?} threshold {}", s.study, s.fit.map(|f| f.slope), s.threshold);
    if ctx.config.study.ne_offset == 0.0 {
        let (other, err) = sweep(rs, ctx.workers, |r| {
            relax_point_defect(&setup, regime, r, Ensemble::Canonical { ne_offset: -2.0 })
        });
        if let Some(e) = err {
            return Err(e);
        }
        let mut d = mu_difference_study_from(&format!("{}-ne-offset", s.study), &runs, &other, s.rate_theory, s.threshold);
        d.fit()?;
        ctx.write_study(&d)?;
        println!("{}: slope {:?} threshold {}", d.study, d.fit.map(|f| f.slope), d.threshold);
        pass &= d.pass();
    }
    Ok(pass)
}

/// Displacement self-convergence, grand-canonical equivalence and far-field decay.
pub fn disp_study(ctx: &Context) -> Result<bool> {
    let setup = ctx.point_defect_setup()?;
    let regime = ctx.config.boundary.regime;
    let rs = &ctx.config.study.radii;
    let (s, runs, _) = tblimit::studies::displacement_convergence_study(&setup, regime, rs, ctx.workers)?;
    ctx.write_study(&s)?;
    println!("{}: slope {:?} threshold {}", s.study, s.fit.map(|f| f.slope), s.threshold);
    let mut pass = s.pass();
    if ctx.config.study.grand_canonical {
        let (gc, err) = sweep(rs, ctx.workers, |r| {
            relax_point_defect(&setup, regime, r, Ensemble::GrandCanonical { tau: setup.mu_hom })
        });
        if let Some(e) = err {
            return Err(e);
        }
        let name = format!("grand-canonical-equivalence-{}d", setup.lattice.dim());
        let mut g = pairwise_study_from(&name, &gc, &runs, setup.mu_hom, setup.gamma, s.rate_theory, s.threshold)?;
        g.fit()?;
        ctx.write_study(&g)?;
        println!("{}: slope {:?} threshold {}", g.study, g.fit.map(|f| f.slope), g.threshold);
        pass &= g.pass();

        let d = setup.lattice.dim() as f64;
        let largest = gc.last().expect("non-empty radii");
        let [lo, hi] = ctx.config.study.decay_window;
        let (profile, fit) = decay_fit(largest, setup.gamma, lo * largest.r, hi * largest.r, setup.settings.force_tol)?;
        let threshold = -d + 0.3 + 0.1 * (d - 1.0);
        let ok = fit.slope <= threshold;
        let mut csv = String::new();
        for line in ctx.header().lines() {
            let _ = writeln!(csv, "# {line}");
        }
        csv.push_str("r,value\n");
        for (r, v) in &profile {
            let _ = writeln!(csv, "{r:.16e},{v:.16e}");
        }
        std::fs::write(ctx.out(&format!("far-field-decay-{}d.csv", setup.lattice.dim()))?, csv)?;
        ctx.write_json(
            &format!("far-field-decay-{}d.json", setup.lattice.dim()),
            json!({"study": "far-field-decay", "rate_theory": -d, "rate_fitted": fit.slope,
                   "correlation": fit.correlation, "threshold": threshold, "pass": ok}),
        )?;
        println!("far-field decay: slope {:.3} threshold {threshold}", fit.slope);
        pass &= ok;
    }
    Ok(pass)
}

/// Locality of a site-local quantity and the pointwise-limit probe on a chain.
pub fn locality(ctx: &Context) -> Result<bool> {
    let lc = &ctx.config.locality;
    let base = ctx.config.params_for(&tblimit::BravaisLattice::chain(1.0))?;
    let n = lc.sites;
    let site = lc.site.unwrap_or(n / 2);
    let pos: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
    let all: Vec<usize> = (0..n).collect();
    let mut trend = Vec::new();
    let mut pass = true;
    let mut first = None;
    for (k, &beta) in lc.betas.iter().enumerate() {
        let params = ModelParams { beta, ..base };
        let sys = System::new(Geometry::open(pos.clone()), params)?;
        let mu = sys.solve_mu(n as f64)?.mu;
        let t = locality_probe(&sys, site, lc.kind, mu, &all)?;
        trend.push(json!({"beta": beta, "gamma_fit": t.gamma_fit, "correlation": t.fit.correlation}));
        if k == 0 {
            pass &= t.gamma_fit > 0.0 && t.fit.correlation >= lc.min_correlation;
            let mut csv = String::new();
            for line in ctx.header().lines() {
                let _ = writeln!(csv, "# {line}");
            }
            csv.push_str("m,r,value\n");
            for (m, r, v) in &t.rows {
                let _ = writeln!(csv, "{m},{r:.16e},{v:.16e}");
            }
            std::fs::write(ctx.out("locality.csv")?, csv)?;
            first = Some((t, mu, params));
        }
    }
    let (t, mu, params) = first.ok_or_else(|| Error::Configuration("locality.betas is empty".into()))?;
    let centre = pos[site];
    let pw = pointwise_limit_probe(&params, &pos, &centre, lc.kind, mu, &lc.pointwise_radii, ball_shape)?;
    let boxed = pointwise_limit_probe(&params, &pos, &centre, lc.kind, mu, &lc.pointwise_radii, box_shape)?;
    let shape_gap = (pw.rows.last().map(|r| r.1).unwrap_or(0.0) - boxed.rows.last().map(|r| r.1).unwrap_or(0.0)).abs();
    let pw_corr = pw.fit.map(|f| f.correlation).unwrap_or(0.0);
    pass &= pw_corr >= lc.min_correlation && shape_gap <= 1e-8;
    let mut csv = String::new();
    for line in ctx.header().lines() {
        let _ = writeln!(csv, "# {line}");
    }
    csv.push_str("R,value,difference\n");
    for (r, a, d) in &pw.rows {
        let _ = writeln!(csv, "{r:.16e},{a:.16e},{d:.16e}");
    }
    std::fs::write(ctx.out("pointwise.csv")?, csv)?;
    ctx.write_json(
        "locality.json",
        json!({"study": "locality", "gamma_fit": t.gamma_fit, "correlation": t.fit.correlation,
               "beta_trend": trend, "pointwise_fit": pw.fit, "shape_difference": shape_gap, "pass": pass}),
    )?;
    println!(
        "locality gamma {:.3} correlation {:.4}; pointwise correlation {pw_corr:.4}; shape difference {shape_gap:.2e}",
        t.gamma_fit, t.fit.correlation
    );
    Ok(pass)
}

/// Identity and symmetry suites.
pub fn identities(ctx: &Context) -> Result<bool> {
    let params = ctx.config.params()?;
    let samples = ctx.config.identities.samples;
    let mut checks = identity_suite(&params, samples, ctx.config.seed)?;
    checks.extend(invariance_suite(&params, samples, ctx.config.seed.wrapping_add(1))?);
    report(&checks);
    let pass = checks.iter().all(|c| c.pass);
    ctx.write_json("identities.json", json!({"checks": checks_json(&checks), "pass": pass}))?;
    Ok(pass)
}

/// Screw-dislocation checks and Fermi-level convergence.
pub fn dislocation(ctx: &Context) -> Result<bool> {
    let dc = &ctx.config.dislocation;
    let disl = ctx.config.dislocation();
    let params = ctx.config.params_for(&disl.lattice)?;
    let mu_hom = fermi_level_bloch(&params, &disl.lattice, Some(disl.b3), ctx.k_points(2))?.mu_hom;
    let mut checks = Vec::new();

    let ball = SiteSet::ball(&disl, dc.predictor_radius);
    write_predictor(&ctx.out("predictor.dat")?, &disl, &ball, &ctx.header())?;
    let profile = predictor_strain_profile(&disl, &ball, 5.0)?;
    let pts = profile_shell_maxima(&profile, 0.0, dc.predictor_radius - 2.0);
    let fit = fit_rate(&pts, FitMode::LogLog, 0)?;
    checks.push(Check::new("predictor_strain_slope_error", (fit.slope + 1.0).abs(), 0.2));

    let setup = DislocationSetup {
        disl: disl.clone(),
        params,
        c_b: dc.c_b,
        rb_min: dc.rb_min,
        ne_offset: dc.ne_offset,
        mu_hom,
        settings: ctx.config.solver.clone(),
        preconditioner: None,
    }
    .with_preconditioner(dc.preconditioner_radius)?;
    let (s, runs) = dislocation_mu_study(&setup, &dc.radii, ctx.workers)?;
    ctx.write_study(&s)?;
    checks.push(Check::new("mu_convergence_slope", s.fit.map(|f| f.slope).unwrap_or(f64::NAN), s.threshold));

    let largest = runs.last().expect("non-empty radii");
    let u3: Vec<f64> = largest.solution.u.iter().map(|u| u[2]).collect();
    let probes: Vec<usize> = largest.domain.partition.free.iter().copied().step_by(7).take(6).collect();
    let slip = slip_invariance_residual(&largest.domain, &params, &u3, &probes, QoIKind::Helmholtz, largest.solution.tau)?;
    checks.push(Check::new("slip_invariance", slip, 1e-8));
    let cut = branch_cut_residual(&largest.domain, &params, &u3, largest.solution.tau)?;
    checks.push(Check::new("branch_cut_invariance", cut, 1e-8));
    let gc = relax_dislocation(&setup, largest.domain.r, Ensemble::GrandCanonical { tau: mu_hom })?;
    let [lo, hi] = dc.decay_window;
    let r = gc.domain.r;
    let decay: Vec<(f64, f64)> = gc
        .strain_decay(ctx.config.study.gamma, (lo * r).max(1.0), hi * r)?
        .into_iter()
        .filter(|p| p.1 > 100.0 * setup.settings.force_tol)
        .collect();
    let dfit = fit_rate(&decay, FitMode::LogLog, 0)?;
    checks.push(Check::new("relaxed_strain_slope", dfit.slope, -1.6));

    report(&checks);
    let pass = checks.iter().all(|c| c.pass);
    ctx.write_json("dislocation.json", json!({"mu_hom": mu_hom, "checks": checks_json(&checks), "pass": pass}))?;
    Ok(pass)
}

/// Plot scripts for study CSV files.
pub fn plots(files: &[PathBuf], guide_slope: Option<f64>) -> Result<bool> {
    for p in super::plots::emit_plots(files, guide_slope)? {
        println!("wrote {}", p.display());
    }
    Ok(true)
}
