//! Stacked output and Markov maps, the weighted strong input observability
//! Gramian and the rank/spectral/subspace analysis built on them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::linsys::StateSpace;

/// `O_t = [C; CA; …; CA^t]`, a `(t+1)q × n` matrix.
pub fn stack_output_map(sys: &StateSpace, t: usize) -> Mat {
    let (n, q) = (sys.n(), sys.q());
    let mut o = Mat::zeros((t + 1) * q, n);
    let mut ca = sys.c().clone();
    for k in 0..=t {
        o.view_mut((k * q, 0), (q, n)).copy_from(&ca);
        if k < t {
            ca = &ca * sys.a();
        }
    }
    o
}

/// Markov parameters `[D, CB, CAB, …, CA^{t-1}B]`.
pub fn markov_parameters(sys: &StateSpace, t: usize) -> Vec<Mat> {
    let mut out = Vec::with_capacity(t + 1);
    out.push(sys.d().clone());
    let mut ca = sys.c().clone();
    for _ in 1..=t {
        out.push(&ca * sys.b());
        ca = &ca * sys.a();
    }
    out
}

/// Block lower-triangular Toeplitz map `N_t` restricted to its first
/// `cols + 1` block columns.
pub fn markov_map(sys: &StateSpace, t: usize, cols: usize) -> Mat {
    let (m, q) = (sys.m(), sys.q());
    let params = markov_parameters(sys, t);
    let mut n = Mat::zeros((t + 1) * q, (cols + 1) * m);
    for i in 0..=t {
        for j in 0..=cols.min(i) {
            n.view_mut((i * q, j * m), (q, m)).copy_from(&params[i - j]);
        }
    }
    n
}

/// `O_t`, `N_t` and its left `(T+1)m` columns `N_{t,T}`.
#[derive(Debug, Clone)]
pub struct StackedMaps {
    pub o: Mat,
    pub n_full: Mat,
    pub n_sub: Mat,
    pub t: usize,
    pub big_t: usize,
}

impl StackedMaps {
    /// `[O_t  N_{t,T}]`.
    pub fn joint(&self) -> Mat {
        linalg::hstack(&[&self.o, &self.n_sub])
    }

    /// `[O_t  N_t]`.
    pub fn joint_full(&self) -> Mat {
        linalg::hstack(&[&self.o, &self.n_full])
    }

    /// Analyses of a mechanism whose output is identically zero are
    /// meaningless; reject `[O_t N_t] = 0`.
    pub fn ensure_nontrivial(&self) -> Result<()> {
        if linalg::max_abs(&self.o) == 0.0 && linalg::max_abs(&self.n_full) == 0.0 {
            return Err(Error::invalid(
                "[O_t N_t] is identically zero; the output carries no information",
            ));
        }
        Ok(())
    }
}

pub fn stack_markov_map(sys: &StateSpace, t: usize, big_t: usize) -> Result<StackedMaps> {
    if big_t > t {
        return Err(Error::invalid(format!("input horizon T = {big_t} exceeds t = {t}")));
    }
    let n_full = markov_map(sys, t, t);
    let n_sub = n_full.columns(0, (big_t + 1) * sys.m()).into_owned();
    Ok(StackedMaps {
        o: stack_output_map(sys, t),
        n_full,
        n_sub,
        t,
        big_t,
    })
}

/// Norms of an eigenvector's components on the `x0` block and each `u(k)`
/// block.
#[derive(Debug, Clone, Serialize)]
pub struct EigenProjection {
    pub eigenvalue: f64,
    pub x0: f64,
    pub inputs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GramianReport {
    #[serde(with = "linalg::rows")]
    pub gramian: Mat,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    #[serde(with = "linalg::rows")]
    pub eigenvectors: Mat,
    pub projections: Vec<EigenProjection>,
    pub rank: usize,
    pub size: usize,
    pub t: usize,
    pub big_t: usize,
}

impl GramianReport {
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.first().copied().unwrap_or(0.0)
    }
}

fn gramian_report(g: Mat, n: usize, m: usize, t: usize, big_t: usize) -> GramianReport {
    let g = linalg::sym(&g);
    let (eigenvalues, eigenvectors) = linalg::sym_eigen(&g);
    let projections = eigenvalues
        .iter()
        .enumerate()
        .map(|(i, &lam)| {
            let v = eigenvectors.column(i);
            let x0 = v.rows(0, n).norm();
            let inputs = (0..=big_t).map(|k| v.rows(n + k * m, m).norm()).collect();
            EigenProjection {
                eigenvalue: lam,
                x0,
                inputs,
            }
        })
        .collect();
    let lmax = eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
    let tol = g.nrows() as f64 * f64::EPSILON * lmax.max(f64::MIN_POSITIVE);
    let rank = eigenvalues.iter().filter(|&&l| l > tol).count();
    GramianReport {
        size: g.nrows(),
        gramian: g,
        eigenvalues,
        eigenvectors,
        projections,
        rank,
        t,
        big_t,
    }
}

/// `[O_t N_{t,T}]ᵀ Σ⁻¹ [O_t N_{t,T}]` with its spectrum.
pub fn weighted_gramian(sys: &StateSpace, t: usize, big_t: usize, sigma: &Mat) -> Result<GramianReport> {
    let maps = stack_markov_map(sys, t, big_t)?;
    maps.ensure_nontrivial()?;
    let rows = (t + 1) * sys.q();
    if sigma.shape() != (rows, rows) {
        return Err(Error::dim(format!(
            "noise covariance is {}x{}, expected {rows}x{rows}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let l = linalg::cholesky(sigma, "noise covariance Σ")?;
    let joint = maps.joint();
    // Σ = L Lᵀ, so Σ⁻¹ = L⁻ᵀ L⁻¹ and the Gramian is (L⁻¹J)ᵀ(L⁻¹J).
    let w = l
        .solve_lower_triangular(&joint)
        .ok_or_else(|| Error::NotPositiveDefinite("noise covariance Σ".into()))?;
    Ok(gramian_report(w.transpose() * w, sys.n(), sys.m(), t, big_t))
}

/// Strong input observability Gramian `O_{t,T}` (Σ = I).
pub fn strong_gramian(sys: &StateSpace, t: usize, big_t: usize) -> Result<GramianReport> {
    let maps = stack_markov_map(sys, t, big_t)?;
    maps.ensure_nontrivial()?;
    let j = maps.joint();
    Ok(gramian_report(j.transpose() * &j, sys.n(), sys.m(), t, big_t))
}

/// `λ_max` of the Σ = I Gramian, computed as the squared spectral norm of
/// the stacked map.
pub fn strong_gramian_lambda_max(sys: &StateSpace, t: usize, big_t: usize) -> Result<f64> {
    let maps = stack_markov_map(sys, t, big_t)?;
    maps.ensure_nontrivial()?;
    Ok(linalg::spectral_norm(&maps.joint()).powi(2))
}

#[derive(Debug, Clone, Serialize)]
pub struct StrongObservabilityReport {
    pub observable: bool,
    pub rank: usize,
    pub required: usize,
    pub singular_values: Vec<f64>,
    pub t: usize,
    pub big_t: usize,
}

/// Full column rank test of `[O_t N_{t,T}]`, `rank = n + (T+1)m`.
pub fn strong_input_observability_at(
    sys: &StateSpace,
    t: usize,
    big_t: usize,
    tol: Option<f64>,
) -> Result<StrongObservabilityReport> {
    let maps = stack_markov_map(sys, t, big_t)?;
    let joint = maps.joint();
    let required = sys.n() + (big_t + 1) * sys.m();
    let (rank, singular_values) = linalg::numerical_rank(&joint, tol);
    Ok(StrongObservabilityReport {
        observable: rank == required,
        rank,
        required,
        singular_values,
        t,
        big_t,
    })
}

/// Rank test on `[O_{2n} N_{2n,n}]`.
pub fn is_strongly_input_observable(sys: &StateSpace) -> StrongObservabilityReport {
    let n = sys.n();
    strong_input_observability_at(sys, 2 * n, n, None).expect("T = n never exceeds t = 2n")
}

/// Infinite-horizon observability Gramian, the solution of
/// `AᵀXA - X + CᵀC = 0`.
pub fn infinite_observability_gramian(sys: &StateSpace) -> Result<Mat> {
    let rho = sys.spectral_radius();
    if rho >= 1.0 {
        return Err(Error::Unstable(format!(
            "Gramian undefined for unstable system (spectral radius {rho})"
        )));
    }
    Ok(stein_solve(&sys.a().transpose(), &(sys.c().transpose() * sys.c())))
}

/// Solves `X = F X Fᵀ + Q` for Schur-stable `F` by Smith doubling.
pub(crate) fn stein_solve(f: &Mat, q: &Mat) -> Mat {
    let mut x = q.clone();
    let mut fk = f.clone();
    for _ in 0..64 {
        let inc = &fk * &x * fk.transpose();
        x += &inc;
        fk = &fk * &fk;
        if inc.norm() <= 1e-17 * x.norm().max(f64::MIN_POSITIVE) || linalg::max_abs(&fk) == 0.0 {
            break;
        }
    }
    // polish with a few fixed-point sweeps
    for _ in 0..2 {
        x = f * &x * f.transpose() + q;
    }
    linalg::sym(&x)
}

/// Weighted least-squares estimate of `(x0, U_T)` from stacked outputs.
#[derive(Debug, Clone)]
pub struct LeastSquaresEstimate {
    pub x0: Vector,
    pub inputs: Vector,
    /// Weighted residual `|Y - O x0 - N U|²_{Σ⁻¹}`.
    pub residual: f64,
}

pub fn least_squares_input_estimate(
    sys: &StateSpace,
    y: &Vector,
    t: usize,
    big_t: usize,
    sigma: &Mat,
) -> Result<LeastSquaresEstimate> {
    let rows = (t + 1) * sys.q();
    if y.len() != rows {
        return Err(Error::dim(format!("Y has length {}, expected {rows}", y.len())));
    }
    let report = weighted_gramian(sys, t, big_t, sigma)?;
    if report.rank < report.size {
        return Err(Error::Singular(format!(
            "Gramian has rank {} < {}",
            report.rank, report.size
        )));
    }
    let maps = stack_markov_map(sys, t, big_t)?;
    let joint = maps.joint();
    let l = linalg::cholesky(sigma, "noise covariance Σ")?;
    let w = l.solve_lower_triangular(&joint).expect("factor is nonsingular");
    let yw = l.solve_lower_triangular(y).expect("factor is nonsingular");
    let rhs = w.transpose() * &yw;
    let sol = report
        .gramian
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("Gramian not positive definite".into()))?
        .solve(&rhs);
    let residual = (&yw - &w * &sol).norm_squared();
    let n = sys.n();
    Ok(LeastSquaresEstimate {
        x0: sol.rows(0, n).into_owned(),
        inputs: sol.rows(n, sol.len() - n).into_owned(),
        residual,
    })
}

/// Orthonormal basis `N̄_{t,T}` of the orthogonal complement of
/// `range [O_t N_{t,T}]`, a `(t+1)q × ((t+1)q - n - (T+1)m)` matrix.
pub fn output_null_complement(sys: &StateSpace, t: usize, big_t: usize) -> Result<Mat> {
    let report = strong_input_observability_at(sys, t, big_t, None)?;
    if !report.observable {
        return Err(Error::NotStronglyInputObservable {
            rank: report.rank,
            required: report.required,
        });
    }
    let maps = stack_markov_map(sys, t, big_t)?;
    let joint = maps.joint();
    let rows = joint.nrows();
    let (u, _) = linalg::full_left_singular(&joint);
    let k = report.required;
    Ok(u.columns(k, rows - k).into_owned())
}

/// `N̄_t = [O_t  N_{t,T}  N̄_{t,T}]`, square and nonsingular.
pub fn augmented_output_map(sys: &StateSpace, t: usize, big_t: usize) -> Result<Mat> {
    let comp = output_null_complement(sys, t, big_t)?;
    let maps = stack_markov_map(sys, t, big_t)?;
    Ok(linalg::hstack(&[&maps.o, &maps.n_sub, &comp]))
}
