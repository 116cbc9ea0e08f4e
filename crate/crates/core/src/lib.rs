//! Finite-temperature two-centre tight binding for crystalline defects.
//!
//! The crate assembles tight-binding Hamiltonians for finite clusters, tori and
//! screw-dislocation columns, evaluates the Helmholtz free energy, grand
//! potential and electron number together with their site-local parts, and
//! relaxes nuclei in the canonical and grand-canonical ensembles. The
//! [`studies`] module measures how chemical potentials and relaxed
//! displacements converge as the computational domain grows.

pub mod dislocation;
pub mod equilibrium;
pub mod error;
pub mod forces;
pub mod hamiltonian;
pub mod identities;
pub mod lattice;
pub mod model;
pub mod observables;
pub mod spectral;
pub mod studies;

pub use error::{Error, Result};
pub use hamiltonian::{Cell, Geometry};
pub use lattice::{BravaisLattice, DefectKind, ReferenceConfig};
pub use model::{ModelParams, QoIKind};
pub use spectral::SpectralData;

/// Crate version embedded in every artifact header.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Three-component position or displacement. Unused trailing components of
/// lower-dimensional problems stay zero.
pub type Vec3 = [f64; 3];

#[inline]
pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}
