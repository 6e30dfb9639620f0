//! Adversary-side reconstruction of the tracking error `e` from the
//! published controller output `u_p` and the public exosystem state.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::linsys::StateSpace;
use crate::observability;
use crate::synthesis::PrivacyController;

/// `K` with `K [O_{2n} N_{2n,n}] = I`, chosen as the pseudoinverse.
#[derive(Debug, Clone, Serialize)]
pub struct LeftInverseGain {
    #[serde(with = "linalg::rows")]
    pub k: Mat,
    pub n: usize,
    pub m: usize,
    /// `‖K [O_{2n} N_{2n,n}] − I‖_max`.
    pub residual: f64,
}

impl LeftInverseGain {
    /// `[I_n 0] K`.
    pub fn k_x(&self) -> Mat {
        self.k.rows(0, self.n).into_owned()
    }

    /// `[0 I_m 0] K`.
    pub fn k_u(&self) -> Mat {
        self.k.rows(self.n, self.m).into_owned()
    }

    /// Reconstruction lag in steps.
    pub fn lag(&self) -> usize {
        2 * self.n
    }
}

/// Left inverse gain of a strongly input observable system.
pub fn left_inverse_gain_of(sys: &StateSpace) -> Result<LeftInverseGain> {
    let report = observability::is_strongly_input_observable(sys);
    if !report.observable {
        return Err(Error::NotStronglyInputObservable { rank: report.rank, required: report.required });
    }
    let n = sys.n();
    let maps = observability::stack_markov_map(sys, 2 * n, n)?;
    let joint = maps.joint();
    let k = linalg::pinv(&joint)?;
    let residual = linalg::max_abs(&(&k * &joint - Mat::identity(joint.ncols(), joint.ncols())));
    Ok(LeftInverseGain { k, n, m: sys.m(), residual })
}

/// Left inverse gain of the controller seen from `e` to `u_p`.
pub fn left_inverse_gain(controller: &PrivacyController) -> Result<LeftInverseGain> {
    left_inverse_gain_of(&controller.error_to_input())
}

/// Reconstructed errors `ẽ(t)` for `t = 0, …, len − 2n − 1`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorEstimate {
    #[serde(serialize_with = "ser_vectors")]
    pub estimates: Vec<Vector>,
    pub lag: usize,
    /// Ridge weight applied to the window solve (zero when noiseless).
    pub regularization: f64,
}

fn ser_vectors<S: serde::Serializer>(vs: &[Vector], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::Serialize as _;
    let rows: Vec<Vec<f64>> = vs.iter().map(|v| v.iter().copied().collect()).collect();
    rows.serialize(s)
}

impl ErrorEstimate {
    pub fn len(&self) -> usize {
        self.estimates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimates.is_empty()
    }

    /// Root-mean-square error against ground truth over the estimated range.
    pub fn rmse(&self, truth: &[Vector]) -> Result<f64> {
        if truth.len() < self.estimates.len() {
            return Err(Error::dim(format!(
                "ground truth has {} samples, {} needed",
                truth.len(),
                self.estimates.len()
            )));
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for (est, e) in self.estimates.iter().zip(truth) {
            sum += (est - e).norm_squared();
            count += est.len();
        }
        Ok(if count == 0 { 0.0 } else { (sum / count as f64).sqrt() })
    }

    pub fn max_error(&self, truth: &[Vector]) -> Result<f64> {
        if truth.len() < self.estimates.len() {
            return Err(Error::dim("ground truth shorter than the estimate"));
        }
        Ok(self.estimates.iter().zip(truth).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max))
    }
}

fn window(data: &[Vector], start: usize, len: usize) -> Vector {
    let width = data.first().map_or(0, |v| v.len());
    Vector::from_iterator(width * len, data[start..start + len].iter().flat_map(|v| v.iter().copied()))
}

/// Windowed reconstruction for a system pair sharing one state: `error_sys`
/// from the private input to the published output and `reference_sys` from
/// the public exogenous state.
///
/// Each window of `2n + 1` published samples is explained by the state at
/// its start plus every private input inside it; `ẽ(t)` is the first input
/// block of the least-squares solution. With `noise_std` the solve is ridge
/// regularized at `1e-8` of the squared window-map norm.
pub fn estimate_inputs(
    error_sys: &StateSpace,
    reference_sys: &StateSpace,
    published: &[Vector],
    exo_trace: &[Vector],
    noise_std: Option<f64>,
) -> Result<ErrorEstimate> {
    let gain = left_inverse_gain_of(error_sys)?;
    let n = error_sys.n();
    let (m, q) = (error_sys.m(), error_sys.q());
    if reference_sys.n() != n || reference_sys.q() != q {
        return Err(Error::dim("reference system must share the state and output of the error system"));
    }
    let lag = gain.lag();
    let len = published.len();
    if len < lag + 1 {
        return Err(Error::invalid(format!(
            "published trajectory has {len} samples; the reconstruction window needs at least 2n + 1 = {}",
            lag + 1
        )));
    }
    if exo_trace.len() < len {
        return Err(Error::dim(format!(
            "exosystem trace has {} samples, published trajectory {len}",
            exo_trace.len()
        )));
    }
    if let Some((t, v)) = published.iter().enumerate().find(|(_, v)| v.len() != q) {
        return Err(Error::dim(format!("published sample {t} has length {}, expected {q}", v.len())));
    }
    let nr = reference_sys.m();
    if let Some((t, v)) = exo_trace.iter().enumerate().find(|(_, v)| v.len() != nr) {
        return Err(Error::dim(format!("exosystem sample {t} has length {}, expected {nr}", v.len())));
    }
    let o = observability::stack_output_map(error_sys, lag);
    let full = observability::markov_map(error_sys, lag, lag);
    let map = linalg::hstack(&[&o, &full]);
    let n_r = observability::markov_map(reference_sys, lag, lag);
    let (solver, regularization) = match noise_std {
        None => (linalg::pinv(&map)?, 0.0),
        Some(s) => {
            if !(s >= 0.0) {
                return Err(Error::invalid(format!("noise standard deviation must be nonnegative, got {s}")));
            }
            let scale = linalg::spectral_norm(&map).powi(2);
            let lambda = 1e-8 * scale.max(f64::MIN_POSITIVE);
            let cols = map.ncols();
            let normal = map.transpose() * &map + Mat::identity(cols, cols) * lambda;
            let inv = normal
                .cholesky()
                .ok_or_else(|| Error::Numerical("ridge normal matrix not positive definite".into()))?
                .inverse();
            (inv * map.transpose(), lambda)
        }
    };
    let select = solver.rows(n, m).into_owned();
    // identifiability of e(t) from the window
    let reproduced = &select * &map;
    let mut target = Mat::zeros(m, map.ncols());
    target.view_mut((0, n), (m, m)).copy_from(&Mat::identity(m, m));
    let gap = linalg::max_abs(&(reproduced - target));
    if noise_std.is_none() && gap > 1e-8 {
        return Err(Error::Singular(format!(
            "the private input is not identifiable from a {}-sample window (gap {gap:e})",
            lag + 1
        )));
    }
    let estimates = (0..len - lag)
        .map(|t| {
            let u = window(published, t, lag + 1);
            let r = window(exo_trace, t, lag + 1);
            &select * (u - &n_r * r)
        })
        .collect();
    Ok(ErrorEstimate { estimates, lag, regularization })
}

/// Reconstructs `e` from published `u_p` of a privacy-preserving controller.
pub fn estimate_private_errors(
    controller: &PrivacyController,
    published: &[Vector],
    exo_trace: &[Vector],
    noise_std: Option<f64>,
) -> Result<ErrorEstimate> {
    estimate_inputs(&controller.error_to_input(), &controller.reference_to_input(), published, exo_trace, noise_std)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linsys;

    fn m(r: usize, c: usize, v: &[f64]) -> Mat {
        Mat::from_row_slice(r, c, v)
    }

    #[test]
    fn scalar_gain_matches_normal_equations() {
        let sys = StateSpace::scalar(0.6, 0.8, 1.5, 0.0);
        let gain = left_inverse_gain_of(&sys).unwrap();
        let maps = observability::stack_markov_map(&sys, 2, 1).unwrap();
        let j = maps.joint();
        let oracle = (j.transpose() * &j).try_inverse().unwrap() * j.transpose();
        assert!((&gain.k - oracle).amax() < 1e-10);
        assert!(gain.residual < 1e-9);
    }

    #[test]
    fn rank_deficient_rejected() {
        let sys = StateSpace::scalar(0.6, 0.0, 1.0, 0.0);
        assert!(matches!(left_inverse_gain_of(&sys), Err(Error::NotStronglyInputObservable { .. })));
    }

    fn tall_pair() -> (StateSpace, StateSpace) {
        let a = m(2, 2, &[0.5, 0.2, -0.1, 0.4]);
        let c = m(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let err = StateSpace::new(a.clone(), m(2, 1, &[1.0, 0.5]), c.clone(), Mat::zeros(3, 1)).unwrap();
        let refs = StateSpace::new(a, m(2, 1, &[0.3, -0.2]), c, m(3, 1, &[0.1, 0.0, 0.2])).unwrap();
        (err, refs)
    }

    fn run(err: &StateSpace, refs: &StateSpace, e: &[Vector], r: &[Vector]) -> Vec<Vector> {
        let b = linalg::hstack(&[err.b(), refs.b()]);
        let d = linalg::hstack(&[err.d(), refs.d()]);
        let sys = StateSpace::new(err.a().clone(), b, err.c().clone(), d).unwrap();
        let inputs: Vec<Vector> = e.iter().zip(r).map(|(a, b)| Vector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())).collect();
        linsys::simulate(&sys, &Vector::from_column_slice(&[0.3, -0.7]), &inputs).unwrap().outputs
    }

    #[test]
    fn noiseless_reconstruction_is_exact() {
        let (err, refs) = tall_pair();
        let e: Vec<Vector> = (0..30).map(|t| Vector::from_element(1, (t as f64 * 0.7).sin())).collect();
        let r: Vec<Vector> = (0..30).map(|t| Vector::from_element(1, 1.0 + 0.1 * t as f64)).collect();
        let u = run(&err, &refs, &e, &r);
        let est = estimate_inputs(&err, &refs, &u, &r, None).unwrap();
        assert_eq!(est.len(), 30 - 4);
        assert!(est.max_error(&e).unwrap() < 1e-10);
    }

    #[test]
    fn zero_error_gives_zero_estimate() {
        let (err, refs) = tall_pair();
        let e = vec![Vector::zeros(1); 12];
        let r = vec![Vector::zeros(1); 12];
        let u = run(&err, &refs, &e, &r);
        let est = estimate_inputs(&err, &refs, &u, &r, None).unwrap();
        assert!(est.estimates.iter().all(|v| v.amax() < 1e-12));
    }

    #[test]
    fn short_trajectory_names_window() {
        let (err, refs) = tall_pair();
        let u = vec![Vector::zeros(3); 4];
        let r = vec![Vector::zeros(1); 4];
        let msg = estimate_inputs(&err, &refs, &u, &r, None).unwrap_err().to_string();
        assert!(msg.contains("2n + 1 = 5"), "{msg}");
    }
}
