//! Run configuration: one TOML file per run, validated before any computation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tblimit::dislocation::{CutSide, ScrewDislocation};
use tblimit::equilibrium::SolverSettings;
use tblimit::observables::relaxation_params;
use tblimit::studies::Regime;
use tblimit::{BravaisLattice, Error, ModelParams, QoIKind, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub lattice: LatticeSection,
    #[serde(default)]
    pub boundary: BoundarySection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default)]
    pub relax: RelaxSection,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub fermi: FermiSection,
    #[serde(default)]
    pub locality: LocalitySection,
    #[serde(default)]
    pub identities: IdentitySection,
    #[serde(default)]
    pub dislocation: DislocationSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Library defaults.
    #[default]
    Default,
    /// Stable relaxation parameters with a stress-free on-site slope.
    Relaxation,
    /// Parameters from `[model.params]`.
    Custom,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub preset: Preset,
    pub params: Option<ModelParams>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatticeKind {
    #[default]
    Chain,
    Square,
    Triangular,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectSpec {
    #[default]
    Vacancy,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatticeSection {
    pub kind: LatticeKind,
    pub spacing: f64,
    pub defect: DefectSpec,
}

impl Default for LatticeSection {
    fn default() -> Self {
        LatticeSection { kind: LatticeKind::Chain, spacing: 1.0, defect: DefectSpec::Vacancy }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundarySection {
    pub regime: Regime,
    /// `R_b = max(rb_min, c_b ln R)`.
    pub c_b: f64,
    pub rb_min: f64,
}

impl Default for BoundarySection {
    fn default() -> Self {
        BoundarySection { regime: Regime::Clamped, c_b: 4.0, rb_min: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySection {
    pub radii: Vec<f64>,
    pub ne_offset: f64,
    pub gamma: f64,
    /// Also sweep the grand-canonical ensemble at `mu_hom` in `disp-study`.
    pub grand_canonical: bool,
    /// Force-constant preconditioner radius; 0 disables it.
    pub preconditioner_radius: f64,
    /// Radius window of the far-field decay fit, as fractions of the largest `R`.
    pub decay_window: [f64; 2],
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            radii: vec![10.0, 20.0, 40.0, 80.0, 160.0],
            ne_offset: 0.0,
            gamma: 1.0,
            grand_canonical: true,
            preconditioner_radius: 0.0,
            decay_window: [0.0, 0.5],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnsembleSpec {
    #[default]
    Canonical,
    GrandCanonical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelaxSection {
    pub radius: f64,
    pub ensemble: EnsembleSpec,
    /// `Ne = ne_per_site N + ne_offset`.
    pub ne_per_site: f64,
    pub ne_offset: f64,
    /// Grand-canonical `tau`; `mu_hom` when absent.
    pub tau: Option<f64>,
}

impl Default for RelaxSection {
    fn default() -> Self {
        RelaxSection { radius: 10.0, ensemble: EnsembleSpec::Canonical, ne_per_site: 1.0, ne_offset: 0.0, tau: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FermiSection {
    /// Initial k-points per axis of the doubling sequence.
    pub bloch_points: usize,
    /// Torus sizes per axis.
    pub supercell_sizes: Vec<usize>,
    /// Agreement bound reported as pass or fail.
    pub tolerance: f64,
}

impl Default for FermiSection {
    fn default() -> Self {
        FermiSection { bloch_points: 64, supercell_sizes: vec![96, 128, 160], tolerance: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalitySection {
    pub sites: usize,
    pub site: Option<usize>,
    pub kind: QoIKind,
    /// Inverse temperatures compared in the trend record.
    pub betas: Vec<f64>,
    /// Nested radii of the pointwise-limit probe.
    pub pointwise_radii: Vec<f64>,
    pub min_correlation: f64,
}

impl Default for LocalitySection {
    fn default() -> Self {
        LocalitySection {
            sites: 80,
            site: None,
            kind: QoIKind::Number,
            betas: vec![10.0, 20.0],
            pointwise_radii: (2..=20).map(|k| 2.0 * k as f64).collect(),
            min_correlation: 0.95,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentitySection {
    pub samples: usize,
}

impl Default for IdentitySection {
    fn default() -> Self {
        IdentitySection { samples: 6 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DislocationSection {
    pub radii: Vec<f64>,
    pub c_b: f64,
    pub rb_min: f64,
    pub r_hat: f64,
    pub b3: f64,
    pub cut: CutSide,
    pub ne_offset: f64,
    pub preconditioner_radius: f64,
    /// Radius of the ball used for the predictor-strain profile.
    pub predictor_radius: f64,
    /// Relaxed-strain decay window as fractions of the largest radius.
    pub decay_window: [f64; 2],
}

impl Default for DislocationSection {
    fn default() -> Self {
        DislocationSection {
            radii: vec![8.0, 12.0, 16.0, 22.0],
            c_b: 1.0,
            rb_min: 4.0,
            r_hat: 2.0,
            b3: 1.0,
            cut: CutSide::Right,
            ne_offset: 0.0,
            preconditioner_radius: 3.0,
            predictor_radius: 60.0,
            decay_window: [0.0, 0.5],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, config_hash(&text)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.model.preset == Preset::Custom && self.model.params.is_none() {
            return bad("preset `custom` needs a [model.params] table".into());
        }
        if self.model.preset != Preset::Custom && self.model.params.is_some() {
            return bad("[model.params] is only read with preset `custom`".into());
        }
        if let Some(p) = &self.model.params {
            p.validate()?;
        }
        if !(self.lattice.spacing > 0.0) {
            return bad("lattice.spacing must be positive".into());
        }
        check_radii("study.radii", &self.study.radii)?;
        check_radii("dislocation.radii", &self.dislocation.radii)?;
        if !(self.boundary.c_b >= 0.0) || !(self.boundary.rb_min > 0.0) {
            return bad("boundary needs c_b >= 0 and rb_min > 0".into());
        }
        if !(self.study.gamma > 0.0) {
            return bad("study.gamma must be positive".into());
        }
        let [lo, hi] = self.study.decay_window;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad("study.decay_window must satisfy 0 <= lo < hi <= 1".into());
        }
        let [lo, hi] = self.dislocation.decay_window;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return bad("dislocation.decay_window must satisfy 0 <= lo < hi <= 1".into());
        }
        if !(self.relax.radius > 0.0) || !(self.relax.ne_per_site.is_finite()) {
            return bad("relax.radius must be positive".into());
        }
        if self.fermi.supercell_sizes.is_empty() || self.fermi.bloch_points < 2 {
            return bad("fermi needs supercell sizes and at least two k-points".into());
        }
        if self.locality.sites < 8 || self.locality.site.is_some_and(|s| s >= self.locality.sites) {
            return bad("locality needs at least 8 sites and a site index inside the chain".into());
        }
        if self.locality.betas.iter().any(|b| !(*b > 0.0)) {
            return bad("locality.betas must be positive".into());
        }
        check_radii("locality.pointwise_radii", &self.locality.pointwise_radii)?;
        if self.identities.samples == 0 {
            return bad("identities.samples must be positive".into());
        }
        if !(self.dislocation.r_hat > 0.0) || !(self.dislocation.b3 > 0.0) {
            return bad("dislocation needs r_hat > 0 and b3 > 0".into());
        }
        Ok(())
    }

    pub fn lattice(&self) -> BravaisLattice {
        let a = self.lattice.spacing;
        match self.lattice.kind {
            LatticeKind::Chain => BravaisLattice::chain(a),
            LatticeKind::Square => BravaisLattice::square(a),
            LatticeKind::Triangular => BravaisLattice::triangular(a),
        }
    }

    pub fn params_for(&self, lattice: &BravaisLattice) -> Result<ModelParams> {
        match self.model.preset {
            Preset::Default => Ok(ModelParams::default()),
            Preset::Relaxation => relaxation_params(lattice),
            Preset::Custom => Ok(self.model.params.expect("validated")),
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        self.params_for(&self.lattice())
    }

    pub fn dislocation(&self) -> ScrewDislocation {
        ScrewDislocation {
            b3: self.dislocation.b3,
            r_hat: self.dislocation.r_hat,
            cut: self.dislocation.cut,
            ..ScrewDislocation::triangular_default()
        }
    }
}

fn check_radii(name: &str, rs: &[f64]) -> Result<()> {
    if rs.is_empty() || rs.iter().any(|r| !(*r > 0.0)) || rs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Configuration(format!("{name} must be positive and strictly increasing")));
    }
    Ok(())
}

/// SHA-256 of the configuration text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}
