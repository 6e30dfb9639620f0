//! Discrete-time LTI systems: representation, simulation, zero-order-hold
//! discretization, the discrete algebraic Riccati equation and closed-loop
//! assembly.

use nalgebra::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::synthesis::PrivacyController;

/// Discrete-time state-space quadruple
/// `x(t+1) = A x(t) + B u(t)`, `y(t) = C x(t) + D u(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    a: Mat,
    b: Mat,
    c: Mat,
    d: Mat,
}

fn check_quadruple(a: &Mat, b: &Mat, c: &Mat, d: &Mat) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dim(format!("A must be square, got {}x{}", n, a.ncols())));
    }
    if b.nrows() != n {
        return Err(Error::dim(format!("B has {} rows, expected {n}", b.nrows())));
    }
    if c.ncols() != n {
        return Err(Error::dim(format!("C has {} columns, expected {n}", c.ncols())));
    }
    if d.nrows() != c.nrows() || d.ncols() != b.ncols() {
        return Err(Error::dim(format!(
            "D is {}x{}, expected {}x{}",
            d.nrows(),
            d.ncols(),
            c.nrows(),
            b.ncols()
        )));
    }
    Ok(())
}

impl StateSpace {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        check_quadruple(&a, &b, &c, &d)?;
        Ok(Self { a, b, c, d })
    }

    /// Builds a system from row-major slices.
    pub fn from_rows(
        a: &[Vec<f64>],
        b: &[Vec<f64>],
        c: &[Vec<f64>],
        d: &[Vec<f64>],
    ) -> Result<Self> {
        RawSystem {
            a: a.to_vec(),
            b: b.to_vec(),
            c: c.to_vec(),
            d: d.to_vec(),
            continuous: None,
        }
        .into_matrices()
        .and_then(|(a, b, c, d)| Self::new(a, b, c, d))
    }

    /// Scalar system `(a, b, c, d)`.
    pub fn scalar(a: f64, b: f64, c: f64, d: f64) -> Self {
        Self {
            a: Mat::from_element(1, 1, a),
            b: Mat::from_element(1, 1, b),
            c: Mat::from_element(1, 1, c),
            d: Mat::from_element(1, 1, d),
        }
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn b(&self) -> &Mat {
        &self.b
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn d(&self) -> &Mat {
        &self.d
    }

    /// State dimension.
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    /// Input dimension.
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    /// Output dimension.
    pub fn q(&self) -> usize {
        self.c.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        linalg::spectral_radius(&self.a)
    }

    pub fn is_schur_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    /// Same system with `B` and `D` scaled by `alpha`.
    pub fn scale_input(&self, alpha: f64) -> Self {
        Self {
            a: self.a.clone(),
            b: &self.b * alpha,
            c: self.c.clone(),
            d: &self.d * alpha,
        }
    }

    /// Frequency response `C (zI - A)^{-1} B + D` at `z = e^{iω}`.
    pub fn freq_response(&self, omega: f64) -> nalgebra::DMatrix<Complex<f64>> {
        let n = self.n();
        let z = Complex::from_polar(1.0, omega);
        let to_c = |m: &Mat| m.map(|v| Complex::new(v, 0.0));
        let d = to_c(&self.d);
        if n == 0 {
            return d;
        }
        let mut zi_a = -to_c(&self.a);
        for i in 0..n {
            zi_a[(i, i)] += z;
        }
        let b = to_c(&self.b);
        let x = zi_a
            .lu()
            .solve(&b)
            .unwrap_or_else(|| nalgebra::DMatrix::from_element(n, self.m(), Complex::new(f64::INFINITY, 0.0)));
        to_c(&self.c) * x + d
    }
}

/// Continuous-time model `ẋ = A_c x + B_c u`, `y = C_c x + D_c u`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousStateSpace {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
}

impl ContinuousStateSpace {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        check_quadruple(&a, &b, &c, &d)?;
        Ok(Self { a, b, c, d })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn q(&self) -> usize {
        self.c.nrows()
    }
}

#[derive(Serialize, Deserialize)]
struct RawSystem {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    continuous: Option<bool>,
}

impl RawSystem {
    fn from_matrices(a: &Mat, b: &Mat, c: &Mat, d: &Mat, continuous: Option<bool>) -> Self {
        Self {
            a: linalg::mat_to_rows(a),
            b: linalg::mat_to_rows(b),
            c: linalg::mat_to_rows(c),
            d: linalg::mat_to_rows(d),
            continuous,
        }
    }

    /// Nested arrays lose the column count of empty rows; recover it from
    /// the neighbouring matrices.
    fn into_matrices(self) -> Result<(Mat, Mat, Mat, Mat)> {
        let a = linalg::mat_from_rows(&self.a)?;
        let mut b = linalg::mat_from_rows(&self.b)?;
        let mut c = linalg::mat_from_rows(&self.c)?;
        let d = linalg::mat_from_rows(&self.d)?;
        let n = a.nrows();
        let m = if b.nrows() > 0 { b.ncols() } else { d.ncols() };
        let q = if c.nrows() > 0 { c.nrows() } else { d.nrows() };
        if b.nrows() == 0 {
            b = Mat::zeros(n, m);
        }
        if c.nrows() == 0 {
            c = Mat::zeros(q, n);
        }
        let d = if d.nrows() == 0 { Mat::zeros(q, m) } else { d };
        Ok((a, b, c, d))
    }
}

impl Serialize for StateSpace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawSystem::from_matrices(&self.a, &self.b, &self.c, &self.d, None).serialize(s)
    }
}

impl<'de> Deserialize<'de> for StateSpace {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = RawSystem::deserialize(de)?;
        if raw.continuous == Some(true) {
            return Err(serde::de::Error::custom(
                "expected a discrete-time system, got \"continuous\": true",
            ));
        }
        let (a, b, c, d) = raw.into_matrices().map_err(serde::de::Error::custom)?;
        StateSpace::new(a, b, c, d).map_err(serde::de::Error::custom)
    }
}

impl Serialize for ContinuousStateSpace {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawSystem::from_matrices(&self.a, &self.b, &self.c, &self.d, Some(true)).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ContinuousStateSpace {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = RawSystem::deserialize(de)?;
        if raw.continuous != Some(true) {
            return Err(serde::de::Error::custom("missing \"continuous\": true"));
        }
        let (a, b, c, d) = raw.into_matrices().map_err(serde::de::Error::custom)?;
        ContinuousStateSpace::new(a, b, c, d).map_err(serde::de::Error::custom)
    }
}

/// States, inputs and outputs of a simulation run, indexed by step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub inputs: Vec<Vector>,
    pub outputs: Vec<Vector>,
    /// State after the last input has been applied.
    pub final_state: Vector,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    /// Outputs stacked into one `(len·q)`-vector.
    pub fn stacked_outputs(&self) -> Vector {
        let q = self.outputs.first().map_or(0, |y| y.len());
        Vector::from_iterator(q * self.len(), self.outputs.iter().flat_map(|y| y.iter().copied()))
    }
}

/// Runs the recursion for every supplied input.
pub fn simulate(sys: &StateSpace, x0: &Vector, inputs: &[Vector]) -> Result<Trajectory> {
    if x0.len() != sys.n() {
        return Err(Error::dim(format!("x0 has length {}, expected {}", x0.len(), sys.n())));
    }
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    for (t, u) in inputs.iter().enumerate() {
        if u.len() != sys.m() {
            return Err(Error::dim(format!(
                "input at step {t} has length {}, expected {}",
                u.len(),
                sys.m()
            )));
        }
        outputs.push(&sys.c * &x + &sys.d * u);
        let next = &sys.a * &x + &sys.b * u;
        states.push(std::mem::replace(&mut x, next));
    }
    Ok(Trajectory {
        states,
        inputs: inputs.to_vec(),
        outputs,
        final_state: x,
    })
}

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// Matrix exponential by scaling and squaring with a degree-13 Padé
/// approximant.
pub fn expm(a: &Mat) -> Result<Mat> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::dim("expm needs a square matrix"));
    }
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("expm of a non-finite matrix"));
    }
    const THETA13: f64 = 5.371920351148152;
    let norm1 = linalg::induced_one_norm(a);
    let s = if norm1 > THETA13 {
        (norm1 / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a / 2f64.powi(s);
    let id = Mat::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;
    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (u_inner + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let v_inner = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_inner + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Zero-order-hold discretization with sampling period `dt` seconds.
pub fn zoh_discretize(csys: &ContinuousStateSpace, dt: f64) -> Result<StateSpace> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("sampling period must be positive, got {dt}")));
    }
    let (n, m) = (csys.n(), csys.m());
    // exp([[A, B], [0, 0]]·dt) = [[Ad, Bd], [0, I]]
    let mut aug = Mat::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&csys.a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&csys.b * dt));
    let e = expm(&aug)?;
    StateSpace::new(
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
        csys.c.clone(),
        csys.d.clone(),
    )
}

/// Result of [`dare`].
#[derive(Debug, Clone)]
pub struct DareSolution {
    /// Stabilizing solution of the Riccati equation.
    pub p: Mat,
    /// Optimal gain, `u = -K x`.
    pub k: Mat,
    /// Normalized residual `‖Ric(P)‖ / max(1, ‖P‖)`.
    pub residual: f64,
    pub iterations: usize,
    /// Spectral radius of `A - B K`.
    pub closed_loop_radius: f64,
}

const DARE_TOL: f64 = 1e-14;
const DARE_MAX_ITER: usize = 200;

/// Riccati residual `AᵀPA - P - AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q`.
pub fn dare_residual(a: &Mat, b: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Result<Mat> {
    let s = r + b.transpose() * p * b;
    let bpa = b.transpose() * p * a;
    let k = s
        .lu()
        .solve(&bpa)
        .ok_or_else(|| Error::Numerical("R + BᵀPB singular".into()))?;
    Ok(a.transpose() * p * a - p - bpa.transpose() * k + q)
}

/// Discrete algebraic Riccati equation via the structure-preserving doubling
/// algorithm.
pub fn dare(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Result<DareSolution> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::dim("dare: inconsistent dimensions"));
    }
    if linalg::lambda_min(q) < -1e-12 * linalg::max_abs(q).max(1.0) {
        return Err(Error::invalid("dare: Q must be positive semidefinite"));
    }
    let r_chol = linalg::cholesky(r, "dare: R must be positive definite")?;
    if let Some(ev) = pbh_uncontrollable_mode(a, b, true) {
        return Err(Error::Numerical(format!(
            "dare: (A, B) not stabilizable, PBH test fails at eigenvalue {ev}"
        )));
    }
    let r_inv = {
        let li = r_chol
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("dare: R not invertible".into()))?;
        li.transpose() * li
    };
    let id = Mat::identity(n, n);
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < DARE_MAX_ITER {
        iterations += 1;
        let w = &id + &gk * &hk;
        let lu = w.lu();
        let w_ak = lu
            .solve(&ak)
            .ok_or_else(|| Error::Numerical("dare: doubling step singular".into()))?;
        let w_gk = lu
            .solve(&gk)
            .ok_or_else(|| Error::Numerical("dare: doubling step singular".into()))?;
        let a_next = &ak * &w_ak;
        let g_next = linalg::sym(&(&gk + &ak * w_gk * ak.transpose()));
        let h_next = linalg::sym(&(&hk + ak.transpose() * &hk * &w_ak));
        let delta = (&h_next - &hk).norm();
        let scale = h_next.norm().max(1.0);
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("dare: doubling iteration diverged".into()));
        }
        if delta <= DARE_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "dare: doubling iteration did not converge in {DARE_MAX_ITER} iterations"
        )));
    }
    let p = hk;
    let s = r + b.transpose() * &p * b;
    let k = s
        .lu()
        .solve(&(b.transpose() * &p * a))
        .ok_or_else(|| Error::Numerical("dare: R + BᵀPB singular".into()))?;
    let residual = dare_residual(a, b, q, r, &p)?.norm() / p.norm().max(1.0);
    let closed_loop_radius = linalg::spectral_radius(&(a - b * &k));
    if closed_loop_radius >= 1.0 {
        return Err(Error::Numerical(format!(
            "dare: solution not stabilizing, spectral radius of A - BK is {closed_loop_radius}"
        )));
    }
    Ok(DareSolution {
        p,
        k,
        residual,
        iterations,
        closed_loop_radius,
    })
}

/// PBH test for modes with `|λ| ≥ 1` (or all modes when `only_unstable` is
/// false). Returns the first eigenvalue at which `[A - λI, B]` loses rank.
pub fn pbh_uncontrollable_mode(a: &Mat, b: &Mat, only_unstable: bool) -> Option<Complex<f64>> {
    let n = a.nrows();
    let scale = linalg::max_abs(a).max(linalg::max_abs(b)).max(1.0);
    for lam in linalg::eigenvalues(a) {
        if only_unstable && lam.norm() < 1.0 - 1e-12 {
            continue;
        }
        let mut m = nalgebra::DMatrix::<Complex<f64>>::zeros(n, n + b.ncols());
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = Complex::new(a[(i, j)], 0.0);
            }
            m[(i, i)] -= lam;
            for j in 0..b.ncols() {
                m[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        let sv = m.singular_values();
        let tol = 1e-10 * scale * (n + b.ncols()) as f64;
        let rank = sv.iter().filter(|&&s| s > tol).count();
        if rank < n {
            return Some(lam);
        }
    }
    None
}

/// Detectability counterpart of [`pbh_uncontrollable_mode`].
pub fn pbh_unobservable_mode(a: &Mat, c: &Mat, only_unstable: bool) -> Option<Complex<f64>> {
    pbh_uncontrollable_mode(&a.transpose(), &c.transpose(), only_unstable)
}

/// Interconnects plant, privacy-preserving controller and exosystem.
///
/// State ordering is `(x_p, x̄_c, x_r)`. Inputs are the injected noise
/// channels `[v; w]`, with `v` (length `q_p`) added to the tracking error
/// seen by the controller and `w` (length `m_p`) added to the published
/// control input. Outputs are `[y_p; u_p; e]` where `u_p` includes `w` and
/// `e = y_p - C_r x_r` is the noise-free tracking error.
pub fn close_loop(
    plant: &StateSpace,
    controller: &PrivacyController,
    exo: &StateSpace,
) -> Result<StateSpace> {
    let (np, mp, qp) = (plant.n(), plant.m(), plant.q());
    let nr = exo.n();
    let g1 = &controller.g1;
    let g2 = &controller.g2;
    let l1 = &controller.l1;
    if g1.shape() != (mp, np) || g2.shape() != (mp, nr) || l1.shape() != (np, qp) {
        return Err(Error::dim(format!(
            "controller gains G1 {:?}, G2 {:?}, L1 {:?} incompatible with plant (n={np}, m={mp}, q={qp}) and exosystem n={nr}",
            g1.shape(),
            g2.shape(),
            l1.shape()
        )));
    }
    if exo.q() != qp {
        return Err(Error::dim(format!(
            "exosystem output dimension {} differs from plant output dimension {qp}",
            exo.q()
        )));
    }
    let (ap, bp, cp, dp) = (plant.a(), plant.b(), plant.c(), plant.d());
    let (ar, cr) = (exo.a(), exo.c());
    let ac_bar = controller.a_c_bar(plant)?;
    let ar_bar = controller.a_r_bar(plant, exo)?;
    let n = 2 * np + nr;
    let mut a = Mat::zeros(n, n);
    // x_p+ = Ap x_p + Bp G1 x_c + Bp G2 x_r + Bp w
    a.view_mut((0, 0), (np, np)).copy_from(ap);
    a.view_mut((0, np), (np, np)).copy_from(&(bp * g1));
    a.view_mut((0, 2 * np), (np, nr)).copy_from(&(bp * g2));
    // e = Cp x_p + Dp G1 x_c + (Dp G2 - Cr) x_r + Dp w
    let e_xp = cp.clone();
    let e_xc = dp * g1;
    let e_xr = dp * g2 - cr;
    // x_c+ = Āc x_c + Ār x_r - L1 (e + v)
    a.view_mut((np, 0), (np, np)).copy_from(&(-(l1 * &e_xp)));
    a.view_mut((np, np), (np, np)).copy_from(&(&ac_bar - l1 * &e_xc));
    a.view_mut((np, 2 * np), (np, nr)).copy_from(&(&ar_bar - l1 * &e_xr));
    a.view_mut((2 * np, 2 * np), (nr, nr)).copy_from(ar);

    let mut b = Mat::zeros(n, qp + mp);
    b.view_mut((0, qp), (np, mp)).copy_from(bp);
    b.view_mut((np, 0), (np, qp)).copy_from(&(-l1));
    b.view_mut((np, qp), (np, mp)).copy_from(&(-(l1 * dp)));

    let mut c = Mat::zeros(qp + mp + qp, n);
    let mut d = Mat::zeros(qp + mp + qp, qp + mp);
    // y_p
    c.view_mut((0, 0), (qp, np)).copy_from(cp);
    c.view_mut((0, np), (qp, np)).copy_from(&(dp * g1));
    c.view_mut((0, 2 * np), (qp, nr)).copy_from(&(dp * g2));
    d.view_mut((0, qp), (qp, mp)).copy_from(dp);
    // u_p
    c.view_mut((qp, np), (mp, np)).copy_from(g1);
    c.view_mut((qp, 2 * np), (mp, nr)).copy_from(g2);
    d.view_mut((qp, qp), (mp, mp)).copy_from(&Mat::identity(mp, mp));
    // e
    c.view_mut((qp + mp, 0), (qp, np)).copy_from(&e_xp);
    c.view_mut((qp + mp, np), (qp, np)).copy_from(&e_xc);
    c.view_mut((qp + mp, 2 * np), (qp, nr)).copy_from(&e_xr);
    d.view_mut((qp + mp, qp), (qp, mp)).copy_from(dp);
    StateSpace::new(a, b, c, d)
}
