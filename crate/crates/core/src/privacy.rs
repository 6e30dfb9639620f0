//! Noise calibration and verification for Gaussian and Laplace mechanisms
//! induced by linear systems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hinf_sdp as hinf;
use crate::linalg::{self, Mat};
use crate::linsys::StateSpace;
use crate::observability;

/// Gaussian tail `Q(w) = P(N(0,1) > w)`.
pub fn gaussian_tail(w: f64) -> f64 {
    0.5 * libm::erfc(w / std::f64::consts::SQRT_2)
}

fn gaussian_pdf(w: f64) -> f64 {
    (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Rational approximation of the inverse Gaussian tail (Abramowitz and
/// Stegun 26.2.23), absolute error below 4.5e-4. Used as Newton seed.
fn q_inverse_seed(p: f64) -> f64 {
    let (pp, sign) = if p <= 0.5 { (p, 1.0) } else { (1.0 - p, -1.0) };
    let t = (-2.0 * pp.ln()).sqrt();
    let num = 2.515517 + 0.802853 * t + 0.010328 * t * t;
    let den = 1.0 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t * t * t;
    sign * (t - num / den)
}

/// Inverse of [`gaussian_tail`] on `(0, 1)`.
pub fn q_inverse(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("Q⁻¹ needs a probability in (0, 1), got {p}")));
    }
    let mut w = q_inverse_seed(p);
    for _ in 0..50 {
        let f = gaussian_tail(w) - p;
        let step = -f / gaussian_pdf(w);
        w -= step;
        if step.abs() <= 1e-12 * w.abs().max(1.0) {
            return Ok(w);
        }
    }
    Err(Error::Numerical(format!("Q⁻¹({p}) did not converge")))
}

/// `R(ε, δ) = (Q⁻¹(δ) + √(Q⁻¹(δ)² + 2ε)) / 2ε`.
pub fn r_value(epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("ε must be positive, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::invalid(format!("δ must lie in (0, 1/2), got {delta}")));
    }
    let k = q_inverse(delta)?;
    Ok((k + (k * k + 2.0 * epsilon).sqrt()) / (2.0 * epsilon))
}

/// Norm used by the adjacency relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormIndex {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

/// `(ε, δ)` target with adjacency radius `c` under the `p` norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
    pub c: f64,
    pub p: NormIndex,
}

impl PrivacyBudget {
    /// Budget for Gaussian mechanisms (2-norm adjacency).
    pub fn gaussian(epsilon: f64, delta: f64, c: f64) -> Result<Self> {
        let b = Self {
            epsilon,
            delta,
            c,
            p: NormIndex::Two,
        };
        b.validate_gaussian()?;
        Ok(b)
    }

    /// Budget for the Laplace mechanism (1-norm adjacency, δ = 0).
    pub fn laplace(epsilon: f64, c: f64) -> Result<Self> {
        let b = Self {
            epsilon,
            delta: 0.0,
            c,
            p: NormIndex::One,
        };
        b.validate_laplace()?;
        Ok(b)
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::invalid(format!("ε must be positive, got {}", self.epsilon)));
        }
        if !(self.c > 0.0) || !self.c.is_finite() {
            return Err(Error::invalid(format!("adjacency bound c must be positive, got {}", self.c)));
        }
        Ok(())
    }

    pub fn validate_gaussian(&self) -> Result<()> {
        self.validate_common()?;
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::invalid(format!("δ must lie in (0, 1/2), got {}", self.delta)));
        }
        if self.p != NormIndex::Two {
            return Err(Error::invalid("Gaussian calibration uses 2-norm adjacency"));
        }
        Ok(())
    }

    pub fn validate_laplace(&self) -> Result<()> {
        self.validate_common()?;
        if self.delta != 0.0 {
            return Err(Error::invalid(format!("Laplace mechanism needs δ = 0, got {}", self.delta)));
        }
        if self.p != NormIndex::One {
            return Err(Error::invalid("Laplace calibration uses 1-norm adjacency"));
        }
        Ok(())
    }

    /// `c · R(ε, δ)`.
    pub fn scaled_r(&self) -> Result<f64> {
        self.validate_gaussian()?;
        Ok(self.c * r_value(self.epsilon, self.delta)?)
    }
}

/// Gaussian noise `N(μ, Σ)` over a stacked horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianNoiseSpec {
    #[serde(with = "linalg::flat")]
    pub mean: linalg::Vector,
    #[serde(with = "linalg::rows")]
    pub covariance: Mat,
}

impl GaussianNoiseSpec {
    pub fn new(mean: linalg::Vector, covariance: Mat) -> Result<Self> {
        if covariance.shape() != (mean.len(), mean.len()) {
            return Err(Error::dim("mean and covariance sizes differ"));
        }
        linalg::cholesky(&covariance, "Gaussian covariance")?;
        Ok(Self { mean, covariance })
    }

    pub fn iid(sigma: f64, len: usize) -> Result<Self> {
        Self::new(linalg::Vector::zeros(len), Mat::identity(len, len) * (sigma * sigma))
    }
}

/// I.i.d. Laplace noise with scale `b` on every scalar channel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LaplaceNoiseSpec {
    pub scale: f64,
}

impl LaplaceNoiseSpec {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::invalid(format!("Laplace scale must be positive, got {scale}")));
        }
        Ok(Self { scale })
    }
}

/// Outcome of a calibration check: `achieved` is compared with `required`.
#[derive(Debug, Clone, Serialize)]
pub struct MechanismReport {
    pub test: String,
    pub passed: bool,
    pub achieved: f64,
    pub required: f64,
    pub margin: f64,
    /// Smallest ε the noise supports at the budget's δ and c.
    pub achievable_epsilon: Option<f64>,
    pub t: Option<usize>,
    pub big_t: Option<usize>,
    pub eigenvalues: Vec<f64>,
}

impl MechanismReport {
    fn new(test: &str, achieved: f64, required: f64) -> Self {
        Self {
            test: test.to_string(),
            passed: achieved >= required,
            achieved,
            required,
            margin: achieved - required,
            achievable_epsilon: None,
            t: None,
            big_t: None,
            eigenvalues: Vec::new(),
        }
    }
}

/// Output-noise Gaussian mechanism check: `λ_max^{-1/2}(O_{Σ,t,T}) ≥ c·R`.
/// With `big_t = None` the full input horizon `T = t` is used.
pub fn verify_output_gaussian(
    sys: &StateSpace,
    sigma: &Mat,
    budget: &PrivacyBudget,
    t: usize,
    big_t: Option<usize>,
) -> Result<MechanismReport> {
    let required = budget.scaled_r()?;
    let horizon = match big_t {
        Some(bt) => {
            if bt < sys.n() || t < bt + sys.n() {
                return Err(Error::invalid(format!(
                    "finite input horizon needs T ≥ n and t ≥ T + n (n = {}, T = {bt}, t = {t})",
                    sys.n()
                )));
            }
            bt
        }
        None => t,
    };
    let report = observability::weighted_gramian(sys, t, horizon, sigma)?;
    let lmax = report.lambda_max();
    let achieved = lmax.sqrt().recip();
    let mut out = MechanismReport::new("output-gaussian", achieved, required);
    out.achievable_epsilon = epsilon_for_floor(achieved, budget.delta, budget.c).ok();
    out.t = Some(t);
    out.big_t = Some(horizon);
    out.eigenvalues = report.eigenvalues;
    Ok(out)
}

/// Smallest i.i.d. output noise standard deviation,
/// `σ = c·λ_max^{1/2}(O_{I,t})·R(ε, δ)`.
pub fn min_iid_sigma(sys: &StateSpace, budget: &PrivacyBudget, t: usize) -> Result<f64> {
    let cr = budget.scaled_r()?;
    Ok(observability::strong_gramian_lambda_max(sys, t, t)?.sqrt() * cr)
}

/// Which parts of the input data are confidential in the stable-system bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StableVariant {
    /// Initial state and inputs both private.
    Full,
    /// Initial state public: only the H∞ term remains.
    PublicInitialState,
    /// Inputs public: only the observability Gramian term remains.
    PublicInput,
}

/// Floor on `λ_min^{1/2}(Σ)` valid for every horizon of a stable system:
/// `c·(λ_max^{1/2}(O_∞) + γ)·R(ε, δ)`.
pub fn stable_gaussian_floor(
    sys: &StateSpace,
    budget: &PrivacyBudget,
    variant: StableVariant,
) -> Result<f64> {
    let cr = budget.scaled_r()?;
    let rho = sys.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::Unstable(format!(
            "stable-system bound needs a Schur stable system (spectral radius {rho})"
        )));
    }
    let obs = match variant {
        StableVariant::PublicInput | StableVariant::Full => {
            linalg::lambda_max(&observability::infinite_observability_gramian(sys)?).max(0.0).sqrt()
        }
        StableVariant::PublicInitialState => 0.0,
    };
    let gamma = match variant {
        StableVariant::PublicInitialState | StableVariant::Full => hinf::hinf_norm(sys, hinf::DEFAULT_TOL)?,
        StableVariant::PublicInput => 0.0,
    };
    Ok(cr * (obs + gamma))
}

/// Checks `λ_min^{1/2}(Σ) ≥ c·(λ_max^{1/2}(O_∞) + γ)·R(ε, δ)`.
pub fn verify_stable_gaussian(
    sys: &StateSpace,
    lambda_min_sigma: f64,
    budget: &PrivacyBudget,
    variant: StableVariant,
) -> Result<MechanismReport> {
    if !(lambda_min_sigma > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "noise covariance has λ_min = {lambda_min_sigma}"
        )));
    }
    let required = stable_gaussian_floor(sys, budget, variant)?;
    let achieved = lambda_min_sigma.sqrt();
    let mut out = MechanismReport::new("stable-gaussian", achieved, required);
    // required = c·R·k, so the achievable ε solves c·R(ε) = achieved / k.
    let k = required / budget.scaled_r()?;
    if k > 0.0 {
        out.achievable_epsilon = epsilon_for_floor(achieved / k, budget.delta, budget.c).ok();
    }
    Ok(out)
}

/// Floor on `λ_min(Σ̄1)` for input-channel noise: `(c·R(ε, δ))²`,
/// independent of the system.
pub fn calibrate_input_gaussian(budget: &PrivacyBudget) -> Result<f64> {
    Ok(budget.scaled_r()?.powi(2))
}

/// Checks `λ_min^{1/2}(Σ̄1) ≥ c·R(ε, δ)`.
pub fn verify_input_gaussian(sigma1: &Mat, budget: &PrivacyBudget) -> Result<MechanismReport> {
    linalg::cholesky(sigma1, "input noise covariance Σ̄1")?;
    let required = budget.scaled_r()?;
    let achieved = linalg::lambda_min(sigma1).sqrt();
    let mut out = MechanismReport::new("input-gaussian", achieved, required);
    out.achievable_epsilon = epsilon_for_floor(achieved, budget.delta, budget.c).ok();
    Ok(out)
}

/// Input-noise covariance with the same privacy level as output noise `Σ`:
/// `Σ̄1 = O_{Σ,t,T}⁻¹`.
pub fn equivalent_input_covariance(sys: &StateSpace, sigma: &Mat, t: usize, big_t: usize) -> Result<Mat> {
    let report = observability::weighted_gramian(sys, t, big_t, sigma)?;
    if report.rank < report.size {
        return Err(Error::NotStronglyInputObservable {
            rank: report.rank,
            required: report.size,
        });
    }
    let chol = report
        .gramian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("Gramian is singular".into()))?;
    Ok(linalg::sym(&chol.inverse()))
}

/// Laplace scale floor `b ≥ c·|[O_t N_t]|_1 / ε`.
pub fn laplace_scale(sys: &StateSpace, budget: &PrivacyBudget, t: usize) -> Result<f64> {
    budget.validate_laplace()?;
    let maps = observability::stack_markov_map(sys, t, t)?;
    maps.ensure_nontrivial()?;
    Ok(budget.c * linalg::induced_one_norm(&maps.joint_full()) / budget.epsilon)
}

const EPS_BRACKET: (f64, f64) = (1e-8, 1e8);
const EPS_MAX_ITER: usize = 200;

/// Smallest `ε` with `c·R(ε, δ) ≤ floor`, by bisection on the strictly
/// decreasing map `ε ↦ R(ε, δ)`.
pub fn epsilon_for_floor(floor: f64, delta: f64, c: f64) -> Result<f64> {
    if !(floor > 0.0) {
        return Err(Error::invalid(format!("noise floor must be positive, got {floor}")));
    }
    if !(c > 0.0) {
        return Err(Error::invalid(format!("adjacency bound c must be positive, got {c}")));
    }
    let (mut lo, mut hi) = EPS_BRACKET;
    let f = |eps: f64| -> Result<f64> { Ok(c * r_value(eps, delta)? - floor) };
    if f(hi)? > 0.0 {
        return Err(Error::Infeasible {
            reason: format!(
                "noise too small: even ε = {hi:e} needs c·R = {} > {floor}",
                c * r_value(hi, delta)?
            ),
            lower_bound: None,
        });
    }
    if f(lo)? <= 0.0 {
        return Ok(lo);
    }
    for _ in 0..EPS_MAX_ITER {
        // geometric midpoint: the bracket spans sixteen decades
        let mid = (lo * hi).sqrt();
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi {
            break;
        }
    }
    Ok(hi)
}

/// Noise description accepted by [`achievable_epsilon`].
#[derive(Debug, Clone)]
pub enum OutputNoise {
    Iid(f64),
    Covariance(Mat),
}

/// Smallest `ε` for which the output-noise Gaussian test holds with equality.
pub fn achievable_epsilon(sys: &StateSpace, noise: &OutputNoise, delta: f64, c: f64, t: usize) -> Result<f64> {
    let rows = (t + 1) * sys.q();
    let sigma = match noise {
        OutputNoise::Iid(s) => {
            if !(*s > 0.0) {
                return Err(Error::invalid(format!("σ must be positive, got {s}")));
            }
            Mat::identity(rows, rows) * (s * s)
        }
        OutputNoise::Covariance(m) => m.clone(),
    };
    let report = observability::weighted_gramian(sys, t, t, &sigma)?;
    epsilon_for_floor(report.lambda_max().sqrt().recip(), delta, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn r_at_half_delta() {
        // Q⁻¹(1/2) = 0 so R = √(2ε)/2ε; δ = 1/2 itself is rejected.
        let r = r_value(2.0, 0.5 - 1e-15).unwrap();
        assert!((r - 0.5).abs() < 1e-9);
        assert!(r_value(2.0, 0.5).is_err());
        assert!(r_value(2.0, 0.0).is_err());
        assert!(r_value(0.0, 0.1).is_err());
    }

    #[test]
    fn q_inverse_known_quantiles() {
        assert!((q_inverse(0.025).unwrap() - 1.959963984540054).abs() < 1e-11);
        assert!((q_inverse(0.5).unwrap()).abs() < 1e-14);
        assert!((q_inverse(0.975).unwrap() + 1.959963984540054).abs() < 1e-11);
        assert!(q_inverse(1e-300).unwrap() > 37.0);
    }

    #[test]
    fn budget_validation() {
        assert!(PrivacyBudget::gaussian(1.0, 0.6, 1.0).is_err());
        assert!(PrivacyBudget::gaussian(1.0, 0.1, 0.0).is_err());
        assert!(PrivacyBudget::laplace(1.0, 1.0).is_ok());
        let g = PrivacyBudget::gaussian(1.0, 0.1, 1.0).unwrap();
        assert!(g.validate_laplace().is_err());
    }

    #[test]
    fn static_mechanism_is_classic_gaussian() {
        let sys = StateSpace::from_rows(&[vec![0.0]], &[vec![0.0]], &[vec![0.0]], &[vec![1.0]]).unwrap();
        let budget = PrivacyBudget::gaussian(0.5, 0.01, 1.0).unwrap();
        let cr = budget.scaled_r().unwrap();
        let t = 3;
        for (sigma, pass) in [(cr * 1.001, true), (cr * 0.999, false)] {
            let s = Mat::identity(t + 1, t + 1) * sigma * sigma;
            let rep = verify_output_gaussian(&sys, &s, &budget, t, None).unwrap();
            assert_eq!(rep.passed, pass);
            assert!((rep.achieved - sigma).abs() < 1e-12);
        }
        assert!((min_iid_sigma(&sys, &budget, t).unwrap() - cr).abs() < 1e-12);
    }

    #[test]
    fn covariance_scaling_doubles_achieved() {
        let sys = StateSpace::scalar(0.5, 1.0, 1.0, 1.0);
        let budget = PrivacyBudget::gaussian(1.0, 0.05, 1.0).unwrap();
        let s = Mat::identity(3, 3);
        let a = verify_output_gaussian(&sys, &s, &budget, 2, None).unwrap();
        let b = verify_output_gaussian(&sys, &(s * 4.0), &budget, 2, None).unwrap();
        assert!((b.achieved / a.achieved - 2.0).abs() < 1e-12);
    }

    #[test]
    fn finite_horizon_preconditions() {
        let sys = StateSpace::scalar(0.5, 1.0, 1.0, 1.0);
        let budget = PrivacyBudget::gaussian(1.0, 0.05, 1.0).unwrap();
        let s = Mat::identity(3, 3);
        assert!(verify_output_gaussian(&sys, &s, &budget, 2, Some(0)).is_err());
        assert!(verify_output_gaussian(&sys, &s, &budget, 2, Some(1)).is_ok());
        assert!(verify_output_gaussian(&sys, &s, &budget, 2, Some(2)).is_err());
    }

    #[test]
    fn stable_floor_scalar_closed_form() {
        let sys = StateSpace::scalar(0.5, 1.0, 1.0, 0.0);
        let budget = PrivacyBudget::gaussian(1.0, 0.05, 1.0).unwrap();
        let cr = budget.scaled_r().unwrap();
        let floor = stable_gaussian_floor(&sys, &budget, StableVariant::Full).unwrap();
        assert!((floor - cr * ((4.0f64 / 3.0).sqrt() + 2.0)).abs() < 1e-5 * floor);
        let pub_x0 = stable_gaussian_floor(&sys, &budget, StableVariant::PublicInitialState).unwrap();
        assert!((pub_x0 - 2.0 * cr).abs() < 1e-5);
        let pub_u = stable_gaussian_floor(&sys, &budget, StableVariant::PublicInput).unwrap();
        assert!((pub_u - (4.0f64 / 3.0).sqrt() * cr).abs() < 1e-12);
        let unstable = StateSpace::scalar(1.1, 1.0, 1.0, 0.0);
        assert!(stable_gaussian_floor(&unstable, &budget, StableVariant::Full).is_err());
    }

    #[test]
    fn d_only_stable_floor_is_static() {
        let sys = StateSpace::from_rows(&[vec![0.0]], &[vec![0.0]], &[vec![0.0]], &[vec![1.0]]).unwrap();
        let budget = PrivacyBudget::gaussian(0.8, 0.02, 1.5).unwrap();
        let floor = stable_gaussian_floor(&sys, &budget, StableVariant::Full).unwrap();
        assert!((floor - budget.scaled_r().unwrap()).abs() < 1e-6 * floor);
    }

    #[test]
    fn input_calibration_zero_margin() {
        let budget = PrivacyBudget::gaussian(0.3, 0.0446, 1.0).unwrap();
        let floor = calibrate_input_gaussian(&budget).unwrap();
        let rep = verify_input_gaussian(&(Mat::identity(3, 3) * floor), &budget).unwrap();
        assert!(rep.margin.abs() < 1e-12);
    }

    #[test]
    fn laplace_examples() {
        let stat = StateSpace::from_rows(&[vec![0.0]], &[vec![0.0]], &[vec![0.0]], &[vec![1.0]]).unwrap();
        let b1 = PrivacyBudget::laplace(0.5, 2.0).unwrap();
        assert!((laplace_scale(&stat, &b1, 4).unwrap() - 4.0).abs() < 1e-15);
        let sys = StateSpace::scalar(0.5, 1.0, 1.0, 0.0);
        let b = PrivacyBudget::laplace(1.0, 1.0).unwrap();
        assert!((laplace_scale(&sys, &b, 2).unwrap() - 1.75).abs() < 1e-15);
        let b2 = PrivacyBudget::laplace(2.0, 1.0).unwrap();
        assert!((laplace_scale(&sys, &b2, 2).unwrap() - 0.875).abs() < 1e-15);
        let g = PrivacyBudget::gaussian(1.0, 0.1, 1.0).unwrap();
        assert!(laplace_scale(&sys, &g, 2).is_err());
    }

    #[test]
    fn epsilon_closed_form_oracle() {
        // c·R(ε, δ) = r  ⇔  ε = (1 + 2 r k) / (2 r²) with k = Q⁻¹(δ)
        for &(r, delta) in &[(5.0, 0.0446), (1.2, 0.01), (0.7, 0.3)] {
            let k = q_inverse(delta).unwrap();
            let exact = (1.0 + 2.0 * r * k) / (2.0 * r * r);
            let eps = epsilon_for_floor(r, delta, 1.0).unwrap();
            assert!((eps - exact).abs() < 1e-9 * exact, "{eps} vs {exact}");
        }
    }

    #[test]
    fn epsilon_infeasible_when_noise_tiny() {
        assert!(matches!(
            epsilon_for_floor(1e-9, 1e-10, 1.0),
            Err(Error::Infeasible { .. })
        ));
    }
}
