//! C ABI over `dpctl`.
//!
//! Every function returns a [`DpctlStatus`]; results travel through out
//! pointers. Matrices are dense row-major `double` arrays. Objects are opaque
//! handles released with their `*_free` function, and strings returned by the
//! library are released with [`dpctl_string_free`]. On failure the message
//! is kept per thread and can be read with [`dpctl_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dpctl::hinf_sdp;
use dpctl::linalg::Mat;
use dpctl::observability;
use dpctl::privacy::{self, PrivacyBudget};
use dpctl::synthesis::{self, PrivacyController, PrivacyDesign, RegulatorMode};
use dpctl::{Error, StateSpace};

/// Result codes. Values 2 to 4 match the exit codes of the `dpctl` CLI.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpctlStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or a too-small buffer.
    BadArgument = 1,
    Validation = 2,
    Infeasible = 3,
    Numerical = 4,
    Panic = 5,
}

/// Gain matrices of a controller.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DpctlGain {
    G1 = 0,
    G2 = 1,
    L1 = 2,
    AcBar = 3,
    ArBar = 4,
}

/// Opaque discrete-time state-space system.
pub struct DpctlSystem {
    inner: StateSpace,
}

/// Opaque privacy-preserving tracking controller.
pub struct DpctlController {
    inner: PrivacyController,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

struct Failure(DpctlStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            3 => DpctlStatus::Infeasible,
            4 => DpctlStatus::Numerical,
            _ => DpctlStatus::Validation,
        };
        Failure(status, e.to_string())
    }
}

fn bad(msg: impl Into<String>) -> Failure {
    Failure(DpctlStatus::BadArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DpctlStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(Failure(DpctlStatus::Panic, msg))
    });
    match outcome {
        Ok(()) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            DpctlStatus::Ok
        }
        Err(Failure(status, msg)) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = msg);
            status
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| bad(format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| bad(format!("{name} is null")))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, name: &str) -> Result<Mat, Failure> {
    let len = rows.checked_mul(cols).ok_or_else(|| bad(format!("{name}: size overflow")))?;
    if len == 0 {
        return Ok(Mat::zeros(rows, cols));
    }
    if p.is_null() {
        return Err(bad(format!("{name} is null")));
    }
    Ok(Mat::from_row_slice(rows, cols, std::slice::from_raw_parts(p, len)))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(bad(format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| bad(format!("{name} is not valid UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| bad("string contains NUL"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpctl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated,
/// always NUL-terminated when `len > 0`). Returns the full message length
/// plus one, so a caller can size the buffer.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn dpctl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a string returned by a `dpctl_*` function, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpctl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a system from row-major `A` (n×n), `B` (n×m), `C` (q×n), `D` (q×m).
/// Pointers for empty matrices may be null.
///
/// # Safety
/// Each matrix pointer must reference the stated number of doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_system_new(
    n: usize,
    m: usize,
    q: usize,
    a: *const f64,
    b: *const f64,
    c: *const f64,
    d: *const f64,
    out_system: *mut *mut DpctlSystem,
) -> DpctlStatus {
    guard(|| {
        let slot = out(out_system, "out_system")?;
        let sys = StateSpace::new(matrix(a, n, n, "a")?, matrix(b, n, m, "b")?, matrix(c, q, n, "c")?, matrix(d, q, m, "d")?)?;
        *slot = Box::into_raw(Box::new(DpctlSystem { inner: sys }));
        Ok(())
    })
}

/// Parses a system from JSON `{"A": [[..]], "B": .., "C": .., "D": ..}`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out_system` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_system_from_json(json: *const c_char, out_system: *mut *mut DpctlSystem) -> DpctlStatus {
    guard(|| {
        let slot = out(out_system, "out_system")?;
        let sys: StateSpace = serde_json::from_str(text(json, "json")?)
            .map_err(|e| Failure(DpctlStatus::Validation, format!("system JSON: {e}")))?;
        *slot = Box::into_raw(Box::new(DpctlSystem { inner: sys }));
        Ok(())
    })
}

/// Serializes a system to JSON; free the result with [`dpctl_string_free`].
///
/// # Safety
/// `system` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_system_to_json(system: *const DpctlSystem, out_json: *mut *mut c_char) -> DpctlStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let sys = handle(system, "system")?;
        let s = serde_json::to_string(&sys.inner).map_err(|e| Failure(DpctlStatus::Numerical, e.to_string()))?;
        *slot = to_c_string(s)?;
        Ok(())
    })
}

/// # Safety
/// `system` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_system_dims(
    system: *const DpctlSystem,
    out_n: *mut usize,
    out_m: *mut usize,
    out_q: *mut usize,
) -> DpctlStatus {
    guard(|| {
        let sys = &handle(system, "system")?.inner;
        *out(out_n, "out_n")? = sys.n();
        *out(out_m, "out_m")? = sys.m();
        *out(out_q, "out_q")? = sys.q();
        Ok(())
    })
}

/// # Safety
/// `system` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpctl_system_free(system: *mut DpctlSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// Gaussian mechanism constant `R(ε, δ)`.
///
/// # Safety
/// `out_r` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_r_value(epsilon: f64, delta: f64, out_r: *mut f64) -> DpctlStatus {
    guard(|| {
        let slot = out(out_r, "out_r")?;
        *slot = privacy::r_value(epsilon, delta)?;
        Ok(())
    })
}

/// Smallest i.i.d. output noise standard deviation giving (ε, δ)-privacy
/// over horizon `t` for adjacency bound `c`.
///
/// # Safety
/// `system` must be a live handle; `out_sigma` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_min_iid_sigma(
    system: *const DpctlSystem,
    epsilon: f64,
    delta: f64,
    c: f64,
    t: usize,
    out_sigma: *mut f64,
) -> DpctlStatus {
    guard(|| {
        let slot = out(out_sigma, "out_sigma")?;
        let sys = handle(system, "system")?;
        let budget = PrivacyBudget::gaussian(epsilon, delta, c)?;
        *slot = privacy::min_iid_sigma(&sys.inner, &budget, t)?;
        Ok(())
    })
}

/// Laplace scale `b` giving ε-privacy over horizon `t` for a single-output system.
///
/// # Safety
/// `system` must be a live handle; `out_scale` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_laplace_scale(
    system: *const DpctlSystem,
    epsilon: f64,
    c: f64,
    t: usize,
    out_scale: *mut f64,
) -> DpctlStatus {
    guard(|| {
        let slot = out(out_scale, "out_scale")?;
        let sys = handle(system, "system")?;
        let budget = PrivacyBudget::laplace(epsilon, c)?;
        *slot = privacy::laplace_scale(&sys.inner, &budget, t)?;
        Ok(())
    })
}

/// H∞ norm of a Schur-stable system.
///
/// # Safety
/// `system` must be a live handle; `out_norm` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_hinf_norm(system: *const DpctlSystem, tol: f64, out_norm: *mut f64) -> DpctlStatus {
    guard(|| {
        let slot = out(out_norm, "out_norm")?;
        let sys = handle(system, "system")?;
        *slot = hinf_sdp::hinf_norm(&sys.inner, tol)?;
        Ok(())
    })
}

/// Rank test for strong input observability.
///
/// # Safety
/// `system` must be a live handle; `out_observable` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_is_strongly_input_observable(
    system: *const DpctlSystem,
    out_observable: *mut bool,
) -> DpctlStatus {
    guard(|| {
        let slot = out(out_observable, "out_observable")?;
        *slot = observability::is_strongly_input_observable(&handle(system, "system")?.inner).observable;
        Ok(())
    })
}

/// Designs a privacy-preserving tracking controller with H∞ bound `gamma`
/// from `e` to `u_p`. With `least_squares` the regulator equations may be
/// solved approximately.
///
/// # Safety
/// `plant` and `exo` must be live handles; `out_controller` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_controller_design(
    plant: *const DpctlSystem,
    exo: *const DpctlSystem,
    gamma: f64,
    least_squares: bool,
    out_controller: *mut *mut DpctlController,
) -> DpctlStatus {
    guard(|| {
        let slot = out(out_controller, "out_controller")?;
        let plant = &handle(plant, "plant")?.inner;
        let exo = &handle(exo, "exo")?.inner;
        let mut design = PrivacyDesign::new(gamma);
        if least_squares {
            design.regulator = RegulatorMode::LeastSquares;
        }
        let ctrl = synthesis::design_privacy_controller(plant, exo, &design)?;
        *slot = Box::into_raw(Box::new(DpctlController { inner: ctrl }));
        Ok(())
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out_controller` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_controller_from_json(
    json: *const c_char,
    out_controller: *mut *mut DpctlController,
) -> DpctlStatus {
    guard(|| {
        let slot = out(out_controller, "out_controller")?;
        let ctrl: PrivacyController = serde_json::from_str(text(json, "json")?)
            .map_err(|e| Failure(DpctlStatus::Validation, format!("controller JSON: {e}")))?;
        *slot = Box::into_raw(Box::new(DpctlController { inner: ctrl }));
        Ok(())
    })
}

/// # Safety
/// `controller` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_controller_to_json(
    controller: *const DpctlController,
    out_json: *mut *mut c_char,
) -> DpctlStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        let ctrl = handle(controller, "controller")?;
        let s = serde_json::to_string(&ctrl.inner).map_err(|e| Failure(DpctlStatus::Numerical, e.to_string()))?;
        *slot = to_c_string(s)?;
        Ok(())
    })
}

/// Certified bound and swept H∞ norm from `e` to `u_p`.
///
/// # Safety
/// `controller` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_controller_hinf(
    controller: *const DpctlController,
    out_gamma: *mut f64,
    out_hinf: *mut f64,
) -> DpctlStatus {
    guard(|| {
        let ctrl = &handle(controller, "controller")?.inner;
        *out(out_gamma, "out_gamma")? = ctrl.gamma;
        *out(out_hinf, "out_hinf")? = ctrl.hinf;
        Ok(())
    })
}

/// Copies a gain matrix row-major into `buf`. The shape is always written;
/// the data only when `len` is large enough, otherwise `BadArgument` is
/// returned. Pass a null `buf` to query the shape.
///
/// # Safety
/// `controller` must be a live handle; `buf` must be null or hold `len`
/// doubles; the shape pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpctl_controller_gain(
    controller: *const DpctlController,
    which: DpctlGain,
    buf: *mut f64,
    len: usize,
    out_rows: *mut usize,
    out_cols: *mut usize,
) -> DpctlStatus {
    guard(|| {
        let ctrl = &handle(controller, "controller")?.inner;
        let m = match which {
            DpctlGain::G1 => &ctrl.g1,
            DpctlGain::G2 => &ctrl.g2,
            DpctlGain::L1 => &ctrl.l1,
            DpctlGain::AcBar => &ctrl.a_c,
            DpctlGain::ArBar => &ctrl.a_r,
        };
        *out(out_rows, "out_rows")? = m.nrows();
        *out(out_cols, "out_cols")? = m.ncols();
        if buf.is_null() {
            return Ok(());
        }
        let need = m.len();
        if len < need {
            return Err(bad(format!("buffer holds {len} doubles, {need} needed")));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (k, v) in m.transpose().iter().enumerate() {
            dst[k] = *v;
        }
        Ok(())
    })
}

/// # Safety
/// `controller` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpctl_controller_free(controller: *mut DpctlController) {
    if !controller.is_null() {
        drop(Box::from_raw(controller));
    }
}
