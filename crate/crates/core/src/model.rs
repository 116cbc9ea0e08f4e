//! Tight-binding parameters and the scalar thermodynamic kernels.
//!
//! All three analytic quantities of interest are spectral sums of a kernel
//! `a(x, tau)` evaluated at the eigenvalues `x` of the Hamiltonian:
//!
//! * Helmholtz free energy: `e(x,t) = 2x f(x-t) + (2/beta) S(f(x-t))`
//! * grand potential:       `g(x,t) = (2/beta) ln(1 - f(x-t))`
//! * electron number:       `n(x,t) = 2 f(x-t)`
//!
//! with `e = t n + g` exactly. Every function here is pure and evaluates in
//! overflow-safe form, so `beta (x - t)` may reach several hundred.

use faer::c64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spin degeneracy. Not configurable; kept in [`ModelParams`] for provenance.
pub const SPIN_FACTOR: f64 = 2.0;

/// Fraction of the cutoff radius below which the cutoff blend is identically one.
pub const CUTOFF_PLATEAU: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Reference bond length.
    pub r0: f64,
    /// Hopping magnitude.
    pub t0: f64,
    pub q_hop: f64,
    pub q_rho: f64,
    /// On-site affine coefficients: `ons(z) = eps0 + c1 z`.
    pub eps0: f64,
    pub c1: f64,
    /// Interaction cutoff; hopping and density vanish identically beyond it.
    pub rc: f64,
    /// Inverse temperature.
    pub beta: f64,
    /// Accumulation parameter of the non-interpenetration condition.
    pub m_accum: f64,
    pub spin_factor: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            r0: 1.0,
            t0: 1.0,
            q_hop: 2.0,
            q_rho: 4.0,
            eps0: 0.0,
            c1: 0.5,
            rc: 1.8,
            beta: 10.0,
            m_accum: 0.5,
            spin_factor: SPIN_FACTOR,
        }
    }
}

/// Selector for the three analytic quantities of interest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QoIKind {
    Helmholtz,
    Grand,
    Number,
}

impl QoIKind {
    pub const ALL: [QoIKind; 3] = [QoIKind::Helmholtz, QoIKind::Grand, QoIKind::Number];

    pub fn name(self) -> &'static str {
        match self {
            QoIKind::Helmholtz => "helmholtz",
            QoIKind::Grand => "grand",
            QoIKind::Number => "number",
        }
    }
}

impl std::str::FromStr for QoIKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "helmholtz" | "e" | "energy" => Ok(QoIKind::Helmholtz),
            "grand" | "g" => Ok(QoIKind::Grand),
            "number" | "n" => Ok(QoIKind::Number),
            other => Err(Error::Parse(format!("unknown quantity of interest `{other}`"))),
        }
    }
}

/// `ln(1 + e^t)` without overflow.
#[inline]
pub fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
fn softplus_c(t: c64) -> c64 {
    // On the contour strip |Im t| < pi/2 the argument of the log keeps a
    // positive real part, so the principal branch is the analytic one.
    if t.re > 0.0 {
        t + (c64::new(1.0, 0.0) + (-t).exp()).ln()
    } else {
        (c64::new(1.0, 0.0) + t.exp()).ln()
    }
}

/// Polynomial blend `1 - (35t^4 - 84t^5 + 70t^6 - 20t^7)`, C^3 at both seams.
/// Returns the value and its first two derivatives with respect to `t`.
#[inline]
fn blend(t: f64) -> (f64, f64, f64) {
    if t <= 0.0 {
        return (1.0, 0.0, 0.0);
    }
    if t >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let t2 = t * t;
    let t3 = t2 * t;
    let t4 = t3 * t;
    let s = t4 * (35.0 - 84.0 * t + 70.0 * t2 - 20.0 * t3);
    let ds = 140.0 * t3 - 420.0 * t4 + 420.0 * t4 * t - 140.0 * t4 * t2;
    let d2s = 420.0 * t2 - 1680.0 * t3 + 2100.0 * t4 - 840.0 * t4 * t;
    (1.0 - s, -ds, -d2s)
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.r0, self.t0, self.q_hop, self.q_rho, self.eps0, self.c1, self.rc, self.beta, self.m_accum,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("model parameters must be finite"));
        }
        if !(self.beta > 0.0) {
            return Err(Error::config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.r0 > 0.0 && self.rc > self.r0) {
            return Err(Error::config(format!(
                "need rc > r0 > 0, got r0 = {}, rc = {}",
                self.r0, self.rc
            )));
        }
        if !(self.m_accum > 0.0) {
            return Err(Error::config("accumulation parameter must be positive"));
        }
        if !(self.t0 > 0.0) {
            return Err(Error::config("hopping magnitude t0 must be positive"));
        }
        if self.spin_factor != SPIN_FACTOR {
            return Err(Error::config("spin_factor is fixed at 2"));
        }
        Ok(())
    }

    /// Stable-range preset used for relaxation studies. `c1` is a placeholder
    /// until it is replaced by the zero-stress value for a concrete crystal
    /// (see [`crate::observables::stress_free_c1`]).
    pub fn relaxation() -> Self {
        ModelParams {
            q_hop: 1.0,
            q_rho: 8.0,
            ..ModelParams::default()
        }
    }

    /// Half-height of the strip on which the kernels are analytic.
    pub fn strip_half_width(&self) -> f64 {
        std::f64::consts::PI / self.beta
    }

    // ---- Fermi-Dirac and entropy -------------------------------------------------

    /// Fermi-Dirac occupation `1 / (1 + exp(beta x))`.
    #[inline]
    pub fn fermi(&self, x: f64) -> f64 {
        let t = self.beta * x;
        if t > 0.0 {
            let e = (-t).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + t.exp())
        }
    }

    /// Derivative of [`Self::fermi`]; strictly negative.
    #[inline]
    pub fn fermi_deriv(&self, x: f64) -> f64 {
        let f = self.fermi(x);
        let g = self.fermi(-x);
        -self.beta * f * g
    }

    /// Entropy density `S(f(x))` evaluated from the energy argument, which keeps
    /// full accuracy where `f` itself rounds to 0 or 1.
    #[inline]
    pub fn entropy_at(&self, x: f64) -> f64 {
        let t = self.beta * x;
        let f = self.fermi(x);
        -f * softplus(t) - (1.0 - f) * softplus(-t)
    }

    pub fn fermi_c(&self, z: c64) -> c64 {
        let t = z * self.beta;
        let one = c64::new(1.0, 0.0);
        if t.re > 0.0 {
            let e = (-t).exp();
            e / (one + e)
        } else {
            one / (one + t.exp())
        }
    }

    // ---- kernels --------------------------------------------------------------------

    /// Kernel `a(x, tau)` of the selected quantity of interest.
    #[inline]
    pub fn kernel(&self, kind: QoIKind, x: f64, tau: f64) -> f64 {
        let w = x - tau;
        match kind {
            QoIKind::Number => SPIN_FACTOR * self.fermi(w),
            QoIKind::Grand => -SPIN_FACTOR / self.beta * softplus(-self.beta * w),
            QoIKind::Helmholtz => SPIN_FACTOR * (x * self.fermi(w) + self.entropy_at(w) / self.beta),
        }
    }

    /// Helmholtz kernel through the `tau n + g` form.
    #[inline]
    pub fn helmholtz_kernel_split(&self, x: f64, tau: f64) -> f64 {
        tau * self.kernel(QoIKind::Number, x, tau) + self.kernel(QoIKind::Grand, x, tau)
    }

    /// `d a(x, tau) / dx`.
    #[inline]
    pub fn kernel_dx(&self, kind: QoIKind, x: f64, tau: f64) -> f64 {
        let w = x - tau;
        match kind {
            QoIKind::Number => SPIN_FACTOR * self.fermi_deriv(w),
            QoIKind::Grand => SPIN_FACTOR * self.fermi(w),
            QoIKind::Helmholtz => SPIN_FACTOR * (self.fermi(w) + tau * self.fermi_deriv(w)),
        }
    }

    /// Analytic continuation of the kernel into the strip `|Im z| < pi / beta`.
    pub fn kernel_c(&self, kind: QoIKind, z: c64, tau: f64) -> c64 {
        let w = z - tau;
        let n = self.fermi_c(w) * SPIN_FACTOR;
        let g = softplus_c(-w * self.beta) * (-SPIN_FACTOR / self.beta);
        match kind {
            QoIKind::Number => n,
            QoIKind::Grand => g,
            QoIKind::Helmholtz => n * tau + g,
        }
    }

    // ---- two-centre functions -----------------------------------------------------------

    #[inline]
    fn cutoff(&self, r: f64) -> (f64, f64, f64) {
        let r_in = CUTOFF_PLATEAU * self.rc;
        let width = self.rc - r_in;
        let (p, dp, d2p) = blend((r - r_in) / width);
        (p, dp / width, d2p / (width * width))
    }

    /// Hopping integral and its radial derivative.
    #[inline]
    pub fn hop_d(&self, r: f64) -> (f64, f64) {
        if r >= self.rc {
            return (0.0, 0.0);
        }
        let e = -self.t0 * (-self.q_hop * (r / self.r0 - 1.0)).exp();
        let de = -self.q_hop / self.r0 * e;
        let (p, dp, _) = self.cutoff(r);
        (e * p, de * p + e * dp)
    }

    /// Density kernel entering the on-site term, and its radial derivative.
    #[inline]
    pub fn rho_d(&self, r: f64) -> (f64, f64) {
        if r >= self.rc {
            return (0.0, 0.0);
        }
        let e = (-self.q_rho * (r / self.r0 - 1.0)).exp();
        let de = -self.q_rho / self.r0 * e;
        let (p, dp, _) = self.cutoff(r);
        (e * p, de * p + e * dp)
    }

    pub fn hop(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::domain(format!("hopping needs r > 0, got {r}")));
        }
        Ok(self.hop_d(r).0)
    }

    pub fn rho(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::domain(format!("density kernel needs r > 0, got {r}")));
        }
        Ok(self.rho_d(r).0)
    }

    #[inline]
    pub fn ons(&self, z: f64) -> f64 {
        self.eps0 + self.c1 * z
    }

    #[inline]
    pub fn ons_deriv(&self, _z: f64) -> f64 {
        self.c1
    }
}

/// Convenience wrapper around [`ModelParams::fermi`].
pub fn fermi(beta: f64, x: f64) -> f64 {
    ModelParams { beta, ..ModelParams::default() }.fermi(x)
}

/// `S(f) = f ln f + (1 - f) ln(1 - f)` with `S(0) = S(1) = 0`.
pub fn entropy(f: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::domain(format!("occupation {f} outside [0, 1]")));
    }
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    Ok(xlogx(f) + xlogx(1.0 - f))
}
