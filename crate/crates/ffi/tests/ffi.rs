use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dpctl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        dpctl_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn scalar(a: f64, b: f64, c: f64, d: f64) -> *mut DpctlSystem {
    let mut sys = ptr::null_mut();
    let st = unsafe { dpctl_system_new(1, 1, 1, &a, &b, &c, &d, &mut sys) };
    assert_eq!(st, DpctlStatus::Ok);
    sys
}

#[test]
fn r_value_matches_library() {
    let mut r = 0.0;
    assert_eq!(unsafe { dpctl_r_value(1.0, 0.05, &mut r) }, DpctlStatus::Ok);
    assert!((r - dpctl::privacy::r_value(1.0, 0.05).unwrap()).abs() < 1e-15);
}

#[test]
fn invalid_budget_is_validation_error() {
    let mut r = 0.0;
    assert_eq!(unsafe { dpctl_r_value(1.0, 0.7, &mut r) }, DpctlStatus::Validation);
    assert!(!last_error().is_empty());
}

#[test]
fn null_out_pointer_rejected() {
    assert_eq!(unsafe { dpctl_r_value(1.0, 0.05, ptr::null_mut()) }, DpctlStatus::BadArgument);
    assert!(last_error().contains("out_r"));
}

#[test]
fn system_dims_and_null_matrix() {
    let a = [0.5, 0.0, 0.0, 0.5];
    let b = [1.0, 1.0];
    let c = [1.0, 0.0];
    let d = [0.0];
    let mut sys = ptr::null_mut();
    let st = unsafe { dpctl_system_new(2, 1, 1, a.as_ptr(), b.as_ptr(), c.as_ptr(), d.as_ptr(), &mut sys) };
    assert_eq!(st, DpctlStatus::Ok);
    let mut n = 0;
    let mut m = 0;
    let mut q = 0;
    assert_eq!(unsafe { dpctl_system_dims(sys, &mut n, &mut m, &mut q) }, DpctlStatus::Ok);
    assert_eq!((n, m, q), (2, 1, 1));
    unsafe { dpctl_system_free(sys) };

    let mut bad = ptr::null_mut();
    let st = unsafe { dpctl_system_new(2, 1, 1, a.as_ptr(), ptr::null(), c.as_ptr(), d.as_ptr(), &mut bad) };
    assert_eq!(st, DpctlStatus::BadArgument);
    assert!(bad.is_null());
}

#[test]
fn min_iid_sigma_and_hinf() {
    let sys = scalar(0.5, 1.0, 1.0, 0.0);
    let mut sigma = 0.0;
    assert_eq!(unsafe { dpctl_min_iid_sigma(sys, 1.0, 0.05, 1.0, 10, &mut sigma) }, DpctlStatus::Ok);
    let budget = dpctl::privacy::PrivacyBudget::gaussian(1.0, 0.05, 1.0).unwrap();
    let ss = dpctl::StateSpace::scalar(0.5, 1.0, 1.0, 0.0);
    assert!((sigma - dpctl::privacy::min_iid_sigma(&ss, &budget, 10).unwrap()).abs() < 1e-12);

    let mut norm = 0.0;
    assert_eq!(unsafe { dpctl_hinf_norm(sys, 1e-8, &mut norm) }, DpctlStatus::Ok);
    // |1/(z − 0.5)| peaks at z = 1
    assert!((norm - 2.0).abs() < 1e-6, "{norm}");

    let mut obs = false;
    assert_eq!(unsafe { dpctl_is_strongly_input_observable(sys, &mut obs) }, DpctlStatus::Ok);
    assert!(obs);
    unsafe { dpctl_system_free(sys) };
}

#[test]
fn unstable_hinf_is_numerical_error() {
    let sys = scalar(1.5, 1.0, 1.0, 0.0);
    let mut norm = 0.0;
    assert_eq!(unsafe { dpctl_hinf_norm(sys, 1e-8, &mut norm) }, DpctlStatus::Numerical);
    unsafe { dpctl_system_free(sys) };
}

#[test]
fn laplace_scale_linear_in_c() {
    let sys = scalar(0.5, 1.0, 1.0, 0.0);
    let (mut b1, mut b2) = (0.0, 0.0);
    unsafe {
        assert_eq!(dpctl_laplace_scale(sys, 1.0, 1.0, 5, &mut b1), DpctlStatus::Ok);
        assert_eq!(dpctl_laplace_scale(sys, 1.0, 2.0, 5, &mut b2), DpctlStatus::Ok);
        dpctl_system_free(sys);
    }
    assert!((b2 - 2.0 * b1).abs() < 1e-12 * b1);
}

#[test]
fn system_json_round_trip() {
    let json = CString::new(r#"{"A":[[0.2,0.1],[0.0,0.3]],"B":[[1.0],[0.5]],"C":[[1.0,1.0]],"D":[[0.0]]}"#).unwrap();
    let mut sys = ptr::null_mut();
    assert_eq!(unsafe { dpctl_system_from_json(json.as_ptr(), &mut sys) }, DpctlStatus::Ok);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { dpctl_system_to_json(sys, &mut s) }, DpctlStatus::Ok);
    let back = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe {
        dpctl_string_free(s);
        dpctl_system_free(sys);
    }
    let v: serde_json::Value = serde_json::from_str(&back).unwrap();
    assert_eq!(v["A"][0][1], 0.1);

    let broken = CString::new("{not json").unwrap();
    let mut sys = ptr::null_mut();
    assert_eq!(unsafe { dpctl_system_from_json(broken.as_ptr(), &mut sys) }, DpctlStatus::Validation);
}

#[test]
fn microgrid_controller_through_handles() {
    let mg = dpctl::gridlab::Microgrid::paper();
    let ctrl = mg.printed_controller().unwrap();
    let json = CString::new(serde_json::to_string(&ctrl).unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { dpctl_controller_from_json(json.as_ptr(), &mut h) }, DpctlStatus::Ok);

    let (mut gamma, mut hinf) = (0.0, 0.0);
    assert_eq!(unsafe { dpctl_controller_hinf(h, &mut gamma, &mut hinf) }, DpctlStatus::Ok);
    assert_eq!(hinf, ctrl.hinf);

    let (mut rows, mut cols) = (0, 0);
    let st = unsafe { dpctl_controller_gain(h, DpctlGain::L1, ptr::null_mut(), 0, &mut rows, &mut cols) };
    assert_eq!(st, DpctlStatus::Ok);
    assert_eq!((rows, cols), (ctrl.l1.nrows(), ctrl.l1.ncols()));
    let mut buf = vec![0.0; rows * cols];
    let st = unsafe { dpctl_controller_gain(h, DpctlGain::L1, buf.as_mut_ptr(), buf.len(), &mut rows, &mut cols) };
    assert_eq!(st, DpctlStatus::Ok);
    assert_eq!(buf[1], ctrl.l1[(0, 1)]);
    assert_eq!(buf[cols], ctrl.l1[(1, 0)]);
    let st = unsafe { dpctl_controller_gain(h, DpctlGain::L1, buf.as_mut_ptr(), 1, &mut rows, &mut cols) };
    assert_eq!(st, DpctlStatus::BadArgument);
    unsafe { dpctl_controller_free(h) };
}

#[test]
fn design_rejects_infeasible_gamma() {
    let mg = dpctl::gridlab::Microgrid::paper();
    let to_handle = |s: &dpctl::StateSpace| {
        let json = CString::new(serde_json::to_string(s).unwrap()).unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(unsafe { dpctl_system_from_json(json.as_ptr(), &mut h) }, DpctlStatus::Ok);
        h
    };
    let plant = to_handle(&mg.plant);
    let exo = to_handle(&mg.exo);
    let mut ctrl = ptr::null_mut();
    let st = unsafe { dpctl_controller_design(plant, exo, 1e-6, true, &mut ctrl) };
    assert_eq!(st, DpctlStatus::Infeasible, "{}", last_error());
    assert!(ctrl.is_null());
    unsafe {
        dpctl_system_free(plant);
        dpctl_system_free(exo);
    }
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        dpctl_system_free(ptr::null_mut());
        dpctl_controller_free(ptr::null_mut());
        dpctl_string_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(dpctl_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dpctl.h");
    let text = std::fs::read_to_string(&header).expect("generated header");
    for name in ["dpctl_r_value", "dpctl_min_iid_sigma", "dpctl_hinf_norm", "dpctl_system_free", "DPCTL_STATUS_INFEASIBLE"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-std=c99", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(status.success());
}
