//! C ABI over the tblimit library.
//!
//! Every fallible function returns a [`TbStatus`]; on failure the message is
//! available from [`tb_last_error_message`] on the same thread. Handles are
//! opaque and released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use tblimit::forces::{force, grad_helmholtz};
use tblimit::observables::{fermi_level_bloch, relaxation_params, System};
use tblimit::{BravaisLattice, Error, Geometry, ModelParams, QoIKind};

/// Status codes of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    IndexOutOfRange = 3,
    SolverFailure = 4,
    NumericalFailure = 5,
    Panic = 6,
}

/// Quantity of interest.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TbQoi {
    Helmholtz = 0,
    Grand = 1,
    Number = 2,
}

/// Bravais lattice family.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TbLattice {
    Chain = 0,
    Square = 1,
    Triangular = 2,
}

/// Model parameters; the spin factor is fixed at 2.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TbParams {
    pub r0: f64,
    pub t0: f64,
    pub q_hop: f64,
    pub q_rho: f64,
    pub eps0: f64,
    pub c1: f64,
    pub rc: f64,
    pub beta: f64,
    pub m_accum: f64,
}

impl From<ModelParams> for TbParams {
    fn from(p: ModelParams) -> Self {
        TbParams {
            r0: p.r0,
            t0: p.t0,
            q_hop: p.q_hop,
            q_rho: p.q_rho,
            eps0: p.eps0,
            c1: p.c1,
            rc: p.rc,
            beta: p.beta,
            m_accum: p.m_accum,
        }
    }
}

impl From<TbParams> for ModelParams {
    fn from(p: TbParams) -> Self {
        ModelParams {
            r0: p.r0,
            t0: p.t0,
            q_hop: p.q_hop,
            q_rho: p.q_rho,
            eps0: p.eps0,
            c1: p.c1,
            rc: p.rc,
            beta: p.beta,
            m_accum: p.m_accum,
            ..ModelParams::default()
        }
    }
}

/// Finite cluster with its Hamiltonian diagonalised.
pub struct TbSystem {
    inner: System,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TbStatus {
    match e {
        Error::Index { .. } => TbStatus::IndexOutOfRange,
        Error::NonConvergence { .. } | Error::Stability { .. } | Error::Quadrature { .. } => TbStatus::SolverFailure,
        Error::Eigen | Error::IllConditioned { .. } | Error::NotSymmetric { .. } => TbStatus::NumericalFailure,
        _ => TbStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard<F>(f: F) -> TbStatus
where
    F: FnOnce() -> Result<(), (TbStatus, String)>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TbStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            TbStatus::Panic
        }
    }
}

fn lib<T>(r: tblimit::Result<T>) -> Result<T, (TbStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null() -> (TbStatus, String) {
    (TbStatus::NullPointer, "null pointer argument".to_string())
}

fn qoi(k: TbQoi) -> QoIKind {
    match k {
        TbQoi::Helmholtz => QoIKind::Helmholtz,
        TbQoi::Grand => QoIKind::Grand,
        TbQoi::Number => QoIKind::Number,
    }
}

fn lattice(kind: TbLattice, spacing: f64) -> Result<BravaisLattice, (TbStatus, String)> {
    if !(spacing > 0.0) {
        return Err((TbStatus::InvalidArgument, "lattice spacing must be positive".into()));
    }
    Ok(match kind {
        TbLattice::Chain => BravaisLattice::chain(spacing),
        TbLattice::Square => BravaisLattice::square(spacing),
        TbLattice::Triangular => BravaisLattice::triangular(spacing),
    })
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn tb_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tb_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(s) => s,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

/// Default model parameters.
#[no_mangle]
pub extern "C" fn tb_params_default() -> TbParams {
    ModelParams::default().into()
}

/// Relaxation parameters with the stress-free on-site slope for a lattice.
///
/// # Safety
/// `out` must be null or point to writable memory for one `TbParams`.
#[no_mangle]
pub unsafe extern "C" fn tb_params_relaxation(kind: TbLattice, spacing: f64, out: *mut TbParams) -> TbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let p = lib(relaxation_params(&lattice(kind, spacing)?))?;
        *out = p.into();
        Ok(())
    })
}

/// Homogeneous Fermi level by Bloch quadrature.
///
/// # Safety
/// `params` must be null or valid; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn tb_fermi_level_bloch(
    params: *const TbParams,
    kind: TbLattice,
    spacing: f64,
    out: *mut f64,
) -> TbStatus {
    guard(|| {
        if params.is_null() || out.is_null() {
            return Err(null());
        }
        let p: ModelParams = (*params).into();
        let lat = lattice(kind, spacing)?;
        let k = if lat.dim() == 1 { 4096 } else { 256 };
        *out = lib(fermi_level_bloch(&p, &lat, None, k))?.mu_hom;
        Ok(())
    })
}

/// Builds an open cluster from `n_sites` positions stored as `x y z` triples.
///
/// # Safety
/// `positions` must hold `3 n_sites` doubles; `params` must be valid;
/// `out` must be writable. The handle is released with [`tb_system_free`].
#[no_mangle]
pub unsafe extern "C" fn tb_system_new(
    positions: *const f64,
    n_sites: usize,
    params: *const TbParams,
    out: *mut *mut TbSystem,
) -> TbStatus {
    guard(|| {
        if positions.is_null() || params.is_null() || out.is_null() {
            return Err(null());
        }
        if n_sites == 0 {
            return Err((TbStatus::InvalidArgument, "a cluster needs at least one site".into()));
        }
        let raw = std::slice::from_raw_parts(positions, 3 * n_sites);
        let pos = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let inner = lib(System::new(Geometry::open(pos), (*params).into()))?;
        *out = Box::into_raw(Box::new(TbSystem { inner }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `system` must be null or a handle from [`tb_system_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tb_system_free(system: *mut TbSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// Number of sites, or 0 for a null handle.
///
/// # Safety
/// `system` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tb_system_len(system: *const TbSystem) -> usize {
    system.as_ref().map(|s| s.inner.len()).unwrap_or(0)
}

/// Chemical potential for `ne` electrons.
///
/// # Safety
/// `system` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_system_solve_mu(system: *const TbSystem, ne: f64, out: *mut f64) -> TbStatus {
    guard(|| {
        let s = system.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        *out = lib(s.inner.solve_mu(ne))?.mu;
        Ok(())
    })
}

/// Total quantity of interest at chemical potential `tau`.
///
/// # Safety
/// `system` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_system_total(system: *const TbSystem, kind: TbQoi, tau: f64, out: *mut f64) -> TbStatus {
    guard(|| {
        let s = system.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        *out = s.inner.total_qoi(qoi(kind), tau);
        Ok(())
    })
}

/// Site-local quantity of interest.
///
/// # Safety
/// `system` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tb_system_local(
    system: *const TbSystem,
    site: usize,
    kind: TbQoi,
    tau: f64,
    out: *mut f64,
) -> TbStatus {
    guard(|| {
        let s = system.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        *out = lib(s.inner.local_qoi(site, qoi(kind), tau))?;
        Ok(())
    })
}

/// Forces `-dG/dy` at fixed `tau`, written as `x y z` triples into `out`,
/// which must hold `len >= 3 n_sites` doubles.
///
/// # Safety
/// `system` must be a live handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn tb_system_forces(system: *const TbSystem, tau: f64, out: *mut f64, len: usize) -> TbStatus {
    guard(|| {
        let s = system.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        write_field(&force(&s.inner, tau), out, len)
    })
}

/// Canonical forces `-dE/dy` for `ne` electrons; the chemical potential is
/// written to `mu_out` when it is not null.
///
/// # Safety
/// `system` must be a live handle, `out` writable for `len` doubles and
/// `mu_out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn tb_system_canonical_forces(
    system: *const TbSystem,
    ne: f64,
    out: *mut f64,
    len: usize,
    mu_out: *mut f64,
) -> TbStatus {
    guard(|| {
        let s = system.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let (f, mu) = lib(grad_helmholtz(&s.inner, ne))?;
        write_field(&f, out, len)?;
        if !mu_out.is_null() {
            *mu_out = mu.mu;
        }
        Ok(())
    })
}

unsafe fn write_field(f: &[[f64; 3]], out: *mut f64, len: usize) -> Result<(), (TbStatus, String)> {
    if len < 3 * f.len() {
        return Err((TbStatus::InvalidArgument, format!("output holds {len} doubles, need {}", 3 * f.len())));
    }
    let dst = std::slice::from_raw_parts_mut(out, 3 * f.len());
    for (d, v) in dst.chunks_exact_mut(3).zip(f) {
        d.copy_from_slice(v);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_roundtrip() {
        let p = ModelParams::default();
        assert_eq!(ModelParams::from(TbParams::from(p)), p);
    }

    #[test]
    fn errors_set_the_message() {
        let s = unsafe { tb_system_solve_mu(std::ptr::null(), 1.0, std::ptr::null_mut()) };
        assert_eq!(s, TbStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(tb_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("null"));
    }
}
