//! H∞ norm of discrete-time systems.

use serde::Serialize;

use super::lmi::{BlockLmi, Expr, LmiProblem};
use super::solver::{sdp_feasible, SdpOptions, SdpStatus};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::linsys::StateSpace;

pub const DEFAULT_TOL: f64 = 1e-6;
const GRID_POINTS: usize = 512;
const REFINED_PEAKS: usize = 8;

fn gain_at(sys: &StateSpace, omega: f64) -> f64 {
    let g = sys.freq_response(omega);
    if g.nrows() == 0 || g.ncols() == 0 {
        return 0.0;
    }
    g.singular_values().max()
}

fn golden_max(sys: &StateSpace, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = gain_at(sys, c);
    let mut fd = gain_at(sys, d);
    for _ in 0..200 {
        if (b - a).abs() <= 1e-14 * (1.0 + a.abs()) {
            break;
        }
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = gain_at(sys, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = gain_at(sys, d);
        }
        if (fc - fd).abs() <= tol * 1e-3 * fc.max(fd) && (b - a) < 1e-9 {
            break;
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Peak gain over the unit circle by grid sweep plus golden-section
/// refinement of the largest local maxima.
pub fn hinf_norm_sweep(sys: &StateSpace, tol: f64) -> Result<(f64, f64)> {
    ensure_stable(sys)?;
    let pi = std::f64::consts::PI;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|k| pi * k as f64 / (GRID_POINTS - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&w| gain_at(sys, w)).collect();
    let mut peaks: Vec<usize> = (0..GRID_POINTS)
        .filter(|&k| {
            let left = if k == 0 { f64::NEG_INFINITY } else { vals[k - 1] };
            let right = if k + 1 == GRID_POINTS { f64::NEG_INFINITY } else { vals[k + 1] };
            vals[k] >= left && vals[k] >= right
        })
        .collect();
    peaks.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    peaks.truncate(REFINED_PEAKS);
    let (mut best_w, mut best) = (0.0, vals[0]);
    for &k in &peaks {
        if vals[k] > best {
            best = vals[k];
            best_w = grid[k];
        }
        let lo = grid[k.saturating_sub(1)];
        let hi = grid[(k + 1).min(GRID_POINTS - 1)];
        let (w, v) = golden_max(sys, lo, hi, tol);
        if v > best {
            best = v;
            best_w = w;
        }
    }
    Ok((best, best_w))
}

fn ensure_stable(sys: &StateSpace) -> Result<()> {
    let rho = sys.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::Unstable(format!("H∞ norm needs a Schur stable system (spectral radius {rho})")));
    }
    Ok(())
}

/// Bounded-real LMI `[[P, 0, AᵀP, Cᵀ], [0, γ²I, BᵀP, Dᵀ], [PA, PB, P, 0], [C, D, 0, I]] ≻ 0`;
/// strictly feasible iff `‖G‖∞ < γ` for stable `A`.
pub fn bounded_real_problem(sys: &StateSpace, gamma: f64) -> Result<LmiProblem> {
    let (n, m, q) = (sys.n(), sys.m(), sys.q());
    let mut prob = LmiProblem::new();
    let p = prob.symmetric("P", n)?;
    let lmi = BlockLmi::new("bounded-real", &[n, m, n, q])
        .set(0, 0, p)
        .set(1, 1, Expr::identity(m, gamma * gamma))
        .set(2, 0, Expr::var(p).rmul(sys.a()))
        .set(2, 1, Expr::var(p).rmul(sys.b()))
        .set(2, 2, p)
        .set(3, 0, sys.c().clone())
        .set(3, 1, sys.d().clone())
        .set(3, 3, Mat::identity(q, q));
    prob.constrain(lmi);
    Ok(prob)
}

fn brl_options() -> SdpOptions {
    SdpOptions {
        feas_tol: 1e-10,
        gap_tol: 1e-12,
        ..SdpOptions::early_exit()
    }
}

/// Certified feasibility of the bounded-real LMI at `gamma`.
pub fn bounded_real_feasible(sys: &StateSpace, gamma: f64) -> Result<SdpStatus> {
    ensure_stable(sys)?;
    Ok(sdp_feasible(&bounded_real_problem(sys, gamma)?, &brl_options()).status)
}

/// H∞ norm by bisection on the bounded-real LMI. Returns the smallest
/// certified-feasible `γ` found, an upper bound within `rel_tol`.
pub fn hinf_norm_lmi(sys: &StateSpace, rel_tol: f64) -> Result<f64> {
    ensure_stable(sys)?;
    let d_norm = if sys.d().is_empty() { 0.0 } else { sys.d().singular_values().max() };
    let mut lo = d_norm;
    let mut hi = (2.0 * d_norm).max(1e-3);
    let feasible = |g: f64| -> Result<bool> { Ok(bounded_real_feasible(sys, g)? == SdpStatus::Feasible) };
    let mut grown = 0;
    while !feasible(hi)? {
        lo = lo.max(hi);
        hi *= 2.0;
        grown += 1;
        if grown > 80 {
            return Err(Error::Numerical("bounded-real LMI infeasible for every tried γ".into()));
        }
    }
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `sup_ω σ_max(C (e^{iω}I − A)⁻¹ B + D)` to relative tolerance `tol`.
///
/// The sweep value is confirmed by the bounded-real LMI slightly above it;
/// if that LMI is certified infeasible the sweep missed a peak and the LMI
/// bisection value is returned instead.
pub fn hinf_norm(sys: &StateSpace, tol: f64) -> Result<f64> {
    let (sweep, _) = hinf_norm_sweep(sys, tol)?;
    if sweep == 0.0 || sys.n() == 0 {
        return Ok(sweep);
    }
    let check = sdp_feasible(&bounded_real_problem(sys, sweep * (1.0 + 1e-3))?, &brl_options());
    if check.status == SdpStatus::Infeasible {
        return Ok(hinf_norm_lmi(sys, tol.max(1e-9))?.max(sweep));
    }
    Ok(sweep)
}

/// Both estimates side by side.
#[derive(Debug, Clone, Serialize)]
pub struct HinfReport {
    pub sweep: f64,
    pub peak_frequency: f64,
    pub lmi: f64,
    pub relative_gap: f64,
}

pub fn hinf_report(sys: &StateSpace, tol: f64) -> Result<HinfReport> {
    let (sweep, w) = hinf_norm_sweep(sys, tol)?;
    let lmi = hinf_norm_lmi(sys, tol)?;
    Ok(HinfReport {
        sweep,
        peak_frequency: w,
        lmi,
        relative_gap: (lmi - sweep).abs() / sweep.max(f64::MIN_POSITIVE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pure_feedthrough() {
        let sys = StateSpace::from_rows(&[vec![0.0]], &[vec![0.0]], &[vec![0.0]], &[vec![1.0]]).unwrap();
        assert!((hinf_norm(&sys, DEFAULT_TOL).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_order_lowpass_peaks_at_dc() {
        let sys = StateSpace::scalar(0.5, 1.0, 1.0, 0.0);
        assert!((hinf_norm(&sys, DEFAULT_TOL).unwrap() - 2.0).abs() < 2e-6);
        let lmi = hinf_norm_lmi(&sys, 1e-7).unwrap();
        assert!((lmi - 2.0).abs() < 1e-5, "{lmi}");
    }

    #[test]
    fn highpass_peaks_at_nyquist() {
        // a = −0.5: peak |cb|/(1 − |a|) at z = −1
        let sys = StateSpace::scalar(-0.5, 1.0, 1.0, 0.0);
        assert!((hinf_norm(&sys, DEFAULT_TOL).unwrap() - 2.0).abs() < 2e-6);
    }

    #[test]
    fn resonant_peak_between_grid_points() {
        let r: f64 = 0.999;
        let th: f64 = 1.2345;
        let a = Mat::from_row_slice(2, 2, &[r * th.cos(), -r * th.sin(), r * th.sin(), r * th.cos()]);
        let sys = StateSpace::new(a, Mat::from_row_slice(2, 1, &[1.0, 0.0]), Mat::from_row_slice(1, 2, &[1.0, 0.0]), Mat::zeros(1, 1)).unwrap();
        let (sweep, w) = hinf_norm_sweep(&sys, 1e-8).unwrap();
        // dense oracle around the resonance
        let dense = (0..200_001)
            .map(|k| gain_at(&sys, th - 0.01 + 0.02 * k as f64 / 200_000.0))
            .fold(0.0, f64::max);
        assert!(sweep >= dense * (1.0 - 1e-9), "{sweep} vs {dense}");
        assert!((w - th).abs() < 1e-2);
    }

    #[test]
    fn unstable_rejected() {
        let sys = StateSpace::scalar(1.0, 1.0, 1.0, 0.0);
        assert!(matches!(hinf_norm(&sys, DEFAULT_TOL), Err(Error::Unstable(_))));
    }

    #[test]
    fn brl_verdicts_straddle_norm() {
        let sys = StateSpace::scalar(0.5, 1.0, 1.0, 0.0);
        assert_eq!(bounded_real_feasible(&sys, 2.01).unwrap(), SdpStatus::Feasible);
        assert_ne!(bounded_real_feasible(&sys, 1.99).unwrap(), SdpStatus::Feasible);
    }
}
