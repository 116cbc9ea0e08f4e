//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; the
//! sweeps shared by several criteria are computed once.

use std::sync::{Arc, OnceLock};
use std::time::Instant;

use tblimit::dislocation::{
    branch_cut_residual, predictor_strain_profile, slip_invariance_residual, ScrewDislocation, SiteSet,
};
use tblimit::equilibrium::{ForceConstants, SolverSettings};
use tblimit::identities::{identity_suite, invariance_suite, Check};
use tblimit::lattice::{build_torus, BravaisLattice};
use tblimit::observables::{fermi_level_bloch, fermi_level_supercell, relaxation_params, System};
use tblimit::studies::*;
use tblimit::{Geometry, ModelParams, QoIKind};

const RADII_1D: [f64; 5] = [10.0, 20.0, 40.0, 80.0, 160.0];
const RADII_2D: [f64; 5] = [6.0, 9.0, 12.0, 16.0, 22.0];
const RADII_DISLOCATION: [f64; 4] = [8.0, 12.0, 16.0, 22.0];
const SUPERCELL_SIZES: [usize; 3] = [96, 128, 160];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    println!("criterion {id:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
}

fn slope(s: &StudyResult) -> f64 {
    s.fit.map(|f| f.slope).unwrap_or(f64::NAN)
}

fn checks_line(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| format!("{} {:.1e}/{:.0e}{}", c.name, c.value, c.tolerance, if c.pass { "" } else { " FAIL" }))
        .collect::<Vec<_>>()
        .join(", ")
}

fn point_defect_1d() -> PointDefectSetup {
    let lattice = BravaisLattice::chain(1.0);
    let params = relaxation_params(&lattice).unwrap();
    let mu_hom = fermi_level_bloch(&params, &lattice, None, 4096).unwrap().mu_hom;
    PointDefectSetup {
        lattice,
        params,
        vacancy: true,
        c_b: 4.0,
        rb_min: 8.0,
        gamma: 1.0,
        mu_hom,
        settings: SolverSettings::default(),
        preconditioner: None,
    }
}

fn point_defect_2d() -> PointDefectSetup {
    let lattice = BravaisLattice::triangular(1.0);
    let params = relaxation_params(&lattice).unwrap();
    let mu_hom = fermi_level_bloch(&params, &lattice, None, 512).unwrap().mu_hom;
    let pc = ForceConstants::homogeneous(&params, &lattice, None, &[0, 1], 3.0).unwrap();
    PointDefectSetup {
        lattice,
        params,
        vacancy: true,
        c_b: 1.0,
        rb_min: 4.0,
        gamma: 1.0,
        mu_hom,
        settings: SolverSettings::default(),
        preconditioner: Some(Arc::new(pc)),
    }
}

/// The clamped d=1 vacancy sweep: canonical runs with `Ne = N` and
/// `Ne = N - 2`, grand-canonical runs at `mu_hom`, and the displacement
/// self-convergence study built on the canonical runs.
struct Sweep1d {
    setup: PointDefectSetup,
    canonical: Vec<Relaxed>,
    shifted: Vec<Relaxed>,
    grand: Vec<Relaxed>,
    displacement: StudyResult,
}

fn sweep_1d() -> &'static Sweep1d {
    static CELL: OnceLock<Sweep1d> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = point_defect_1d();
        let (displacement, canonical, _) = displacement_convergence_study(&setup, Regime::Clamped, &RADII_1D, 1).unwrap();
        let run = |ens: Ensemble| {
            let (runs, err) = sweep(&RADII_1D, 1, |r| relax_point_defect(&setup, Regime::Clamped, r, ens));
            assert!(err.is_none(), "{err:?}");
            runs
        };
        let shifted = run(Ensemble::Canonical { ne_offset: -2.0 });
        let grand = run(Ensemble::GrandCanonical { tau: setup.mu_hom });
        Sweep1d { setup, canonical, shifted, grand, displacement }
    })
}

fn mu_study_1d() -> StudyResult {
    let s = sweep_1d();
    let mut m = mu_study_from("mu-convergence-1d", &s.canonical, s.setup.mu_hom, -0.5, -0.4);
    m.fit().unwrap();
    m
}

/// The clamped d=2 vacancy sweep with `Ne = N`.
fn sweep_2d() -> &'static (PointDefectSetup, StudyResult, Vec<Relaxed>) {
    static CELL: OnceLock<(PointDefectSetup, StudyResult, Vec<Relaxed>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let setup = point_defect_2d();
        let (study, runs) = mu_convergence_study(&setup, Regime::Clamped, &RADII_2D, 0.0, 1).unwrap();
        (setup, study, runs)
    })
}

#[test]
fn criterion_01_identity_suite() {
    let t = Instant::now();
    let checks = identity_suite(&ModelParams::default(), 6, 7).unwrap();
    let pass = checks.iter().all(|c| c.pass);
    report(1, "identity suite", pass, &format!("{}; {:.1}s", checks_line(&checks), t.elapsed().as_secs_f64()));
    assert!(pass);
}

#[test]
fn criterion_02_invariance_suite() {
    let checks = invariance_suite(&ModelParams::default(), 6, 8).unwrap();
    let pass = checks.iter().all(|c| c.pass);
    report(2, "invariance suite", pass, &checks_line(&checks));
    assert!(pass);
}

#[test]
fn criterion_03_half_filled_ring() {
    let m = ModelParams::default();
    let expect = m.ons(2.0 * m.rho(1.0).unwrap());
    let mut worst = 0.0f64;
    for n in [8usize, 16, 32] {
        let (sites, cell) = build_torus(&BravaisLattice::chain(1.0), n, false).unwrap();
        let sys = System::new(Geometry::torus(sites, cell), m).unwrap();
        worst = worst.max((sys.solve_mu(n as f64).unwrap().mu - expect).abs());
    }
    let pass = worst <= 1e-10;
    report(3, "mu on half-filled rings", pass, &format!("max |mu - ons(2 rho(1))| = {worst:.2e}, tol 1e-10"));
    assert!(pass);
}

#[test]
fn criterion_04_fermi_level_cross_method() {
    let cases = [
        ("chain", BravaisLattice::chain(1.0), ModelParams { rc: 2.5, ..ModelParams::default() }),
        ("triangular", BravaisLattice::triangular(1.0), ModelParams::default()),
        ("square", BravaisLattice::square(1.0), ModelParams::default()),
    ];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, lat, m) in cases {
        let bloch = fermi_level_bloch(&m, &lat, None, 64).unwrap().mu_hom;
        let cell = fermi_level_supercell(&m, &lat, &SUPERCELL_SIZES).unwrap().mu_hom;
        let diff = (bloch - cell).abs();
        pass &= diff <= 1e-8;
        detail.push(format!("{name} {diff:.1e}"));
    }
    report(4, "Fermi level, Bloch vs supercell", pass, &format!("{}; tol 1e-8", detail.join(", ")));
    assert!(pass);
}

#[test]
fn criterion_05_mu_convergence() {
    let m1 = mu_study_1d();
    let (_, m2, _) = sweep_2d();
    let (s1, s2) = (slope(&m1), slope(m2));
    let pass = s1 <= -0.4 && s2 <= -0.8;
    report(5, "mu convergence, clamped vacancy", pass, &format!("d=1 slope {s1:.3} (<= -0.4), d=2 slope {s2:.3} (<= -0.8)"));
    assert!(pass);
}

#[test]
fn criterion_06_electron_count_insensitivity() {
    let s = sweep_1d();
    let mut d = mu_difference_study_from("ne-offset", &s.canonical, &s.shifted, -0.5, -0.4);
    d.fit().unwrap();
    let pass = d.pass();
    report(6, "electron-count insensitivity", pass, &format!("slope {:.3} (<= -0.4)", slope(&d)));
    assert!(pass);
}

#[test]
fn criterion_07_displacement_self_convergence() {
    let d = &sweep_1d().displacement;
    let pass = slope(d) <= -0.35;
    report(7, "displacement self-convergence", pass, &format!("slope {:.3} (<= -0.35)", slope(d)));
    assert!(pass);
}

#[test]
fn criterion_08_grand_canonical_equivalence() {
    let s = sweep_1d();
    let mut g = pairwise_study_from("gc-equivalence-1d", &s.grand, &s.canonical, s.setup.mu_hom, 1.0, -0.5, -0.35).unwrap();
    g.fit().unwrap();
    let m = mu_study_1d();
    let (du, mu) = (slope(&g), slope(&m));
    let errors: Vec<String> = g.records.iter().map(|r| format!("{:.2e}", r.du_error.unwrap_or(f64::NAN))).collect();
    let pass = du <= -0.35 && mu <= -0.4;
    report(
        8,
        "grand-canonical equivalence",
        pass,
        &format!("d=1 ||Du_gc - Du_can|| slope {du:.3} (<= -0.35) errors [{}], mu slope {mu:.3}", errors.join(" ")),
    );

    let (setup, _, canonical) = sweep_2d();
    let (grand, err) = sweep(&RADII_2D, 1, |r| {
        relax_point_defect(setup, Regime::Clamped, r, Ensemble::GrandCanonical { tau: setup.mu_hom })
    });
    assert!(err.is_none(), "{err:?}");
    let mut g2 = pairwise_study_from("gc-equivalence-2d", &grand, canonical, setup.mu_hom, 1.0, -1.0, -0.85).unwrap();
    g2.fit().unwrap();
    println!("criterion  8 informational: d=2 ||Du_gc - Du_can|| slope {:.3}", slope(&g2));
    assert!(pass);
}

#[test]
fn criterion_09_far_field_decay() {
    let s = sweep_1d();
    let r1 = s.grand.last().unwrap();
    let (_, f1) = decay_fit(r1, 1.0, 1.0, 0.5 * r1.r, s.setup.settings.force_tol).unwrap();

    let (setup, _, _) = sweep_2d();
    let r2 = relax_point_defect(setup, Regime::Torus, 18.0, Ensemble::GrandCanonical { tau: setup.mu_hom }).unwrap();
    let (_, f2) = decay_fit(&r2, 1.0, 1.0, 0.5 * r2.r, setup.settings.force_tol).unwrap();
    let pass = f1.slope <= -0.7 && f2.slope <= -1.6;
    report(
        9,
        "far-field decay",
        pass,
        &format!("d=1 R=160 slope {:.3} (<= -0.7), d=2 torus R=18 slope {:.3} (<= -1.6)", f1.slope, f2.slope),
    );
    assert!(pass);
}

#[test]
fn criterion_10_torus_improvement() {
    let s = sweep_1d();
    let (torus, runs) = mu_convergence_study(&s.setup, Regime::Torus, &RADII_1D, 0.0, 1).unwrap();
    let pass = slope(&torus) <= -0.4;
    let t_err = runs.last().unwrap().record(s.setup.mu_hom, None).mu_error;
    let c_err = s.canonical.last().unwrap().record(s.setup.mu_hom, None).mu_error;
    report(10, "torus mu convergence", pass, &format!("slope {:.3} (<= -0.4)", slope(&torus)));
    println!(
        "criterion 10 informational: R=160 torus error {t_err:.3e} {} clamped error {c_err:.3e}",
        if t_err <= c_err { "<=" } else { ">" }
    );
    assert!(pass);
}

#[test]
fn criterion_11_locality() {
    let m = ModelParams::default();
    let n = 80;
    let pos: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
    let sys = System::new(Geometry::open(pos.clone()), m).unwrap();
    let mu = sys.solve_mu(n as f64).unwrap().mu;
    let all: Vec<usize> = (0..n).collect();
    let t = locality_probe(&sys, n / 2, QoIKind::Number, mu, &all).unwrap();
    let radii: Vec<f64> = (2..=20).map(|k| 2.0 * k as f64).collect();
    let pw = pointwise_limit_probe(&m, &pos, &pos[n / 2], QoIKind::Number, mu, &radii, ball_shape).unwrap();
    let pw_corr = pw.fit.map(|f| f.correlation).unwrap_or(0.0);
    let pass = t.gamma_fit > 0.0 && t.fit.correlation >= 0.95 && pw_corr >= 0.95;
    report(
        11,
        "locality",
        pass,
        &format!(
            "decay rate {:.3} correlation {:.4}; pointwise correlation {pw_corr:.4} (>= 0.95)",
            t.gamma_fit, t.fit.correlation
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_12_dislocation() {
    let disl = ScrewDislocation::triangular_default();
    let params = relaxation_params(&disl.lattice).unwrap();
    let mu_hom = fermi_level_bloch(&params, &disl.lattice, Some(disl.b3), 256).unwrap().mu_hom;

    let ball = SiteSet::ball(&disl, 60.0);
    let profile = predictor_strain_profile(&disl, &ball, 5.0).unwrap();
    let shells = profile_shell_maxima(&profile, 5.0, 58.0);
    let predictor = fit_rate(&shells, FitMode::LogLog, 0).unwrap().slope;

    let setup = DislocationSetup {
        disl,
        params,
        c_b: 1.0,
        rb_min: 4.0,
        ne_offset: 0.0,
        mu_hom,
        settings: SolverSettings::default(),
        preconditioner: None,
    }
    .with_preconditioner(3.0)
    .unwrap();
    let (study, runs) = dislocation_mu_study(&setup, &RADII_DISLOCATION, 1).unwrap();
    let largest = runs.last().unwrap();
    let u3: Vec<f64> = largest.solution.u.iter().map(|u| u[2]).collect();
    let probes: Vec<usize> = largest.domain.partition.free.iter().copied().step_by(7).take(6).collect();
    let slip = slip_invariance_residual(&largest.domain, &params, &u3, &probes, QoIKind::Helmholtz, largest.solution.tau).unwrap();
    let cut = branch_cut_residual(&largest.domain, &params, &u3, largest.solution.tau).unwrap();

    let r = largest.domain.r;
    let grand = relax_dislocation(&setup, r, Ensemble::GrandCanonical { tau: mu_hom }).unwrap();
    let decay: Vec<(f64, f64)> = grand
        .strain_decay(1.0, 1.0, 0.5 * r)
        .unwrap()
        .into_iter()
        .filter(|p| p.1 > 100.0 * setup.settings.force_tol)
        .collect();
    let relaxed = fit_rate(&decay, FitMode::LogLog, 0).unwrap().slope;

    let pass = slip <= 1e-8 && cut <= 1e-8 && (predictor + 1.0).abs() <= 0.2 && slope(&study) <= -0.8 && relaxed <= -1.6;
    report(
        12,
        "screw dislocation",
        pass,
        &format!(
            "slip invariance {slip:.1e} (<= 1e-8), branch cut {cut:.1e} (<= 1e-8), predictor strain slope {predictor:.3} \
             (-1 +- 0.2), mu slope {:.3} (<= -0.8), relaxed strain slope {relaxed:.3} (<= -1.6)",
            slope(&study)
        ),
    );
    assert!(pass);
}
