//! Mechanisms induced by nonlinear systems `x⁺ = f(x, u)`, `y = h(x, u)`:
//! stacked output maps, sampled sensitivity calibration and incremental
//! input-to-output stability certificates.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::linsys::StateSpace;
use crate::privacy::{self, NormIndex, PrivacyBudget};

pub type MapFn = Arc<dyn Fn(&Vector, &Vector) -> Result<Vector> + Send + Sync>;

/// `(∂f/∂x, ∂f/∂u, ∂h/∂x, ∂h/∂u)` at a point.
pub type JacobianFn = Arc<dyn Fn(&Vector, &Vector) -> Result<(Mat, Mat, Mat, Mat)> + Send + Sync>;

#[derive(Clone)]
pub struct NonlinearSystem {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    pub f: MapFn,
    pub h: MapFn,
    pub jacobians: Option<JacobianFn>,
    /// Evaluate `f` and `h` from one thread only.
    pub serial: bool,
}

impl fmt::Debug for NonlinearSystem {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("NonlinearSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("q", &self.q)
            .field("analytic_jacobians", &self.jacobians.is_some())
            .field("serial", &self.serial)
            .finish()
    }
}

impl NonlinearSystem {
    pub fn new(n: usize, m: usize, q: usize, f: MapFn, h: MapFn) -> Self {
        Self { n, m, q, f, h, jacobians: None, serial: false }
    }

    pub fn with_jacobians(mut self, jac: JacobianFn) -> Self {
        self.jacobians = Some(jac);
        self
    }

    /// Scalar logistic map `x⁺ = r x (1 − x) + u`, `y = x`.
    pub fn logistic(r: f64) -> Self {
        let f: MapFn = Arc::new(move |x: &Vector, u: &Vector| Ok(Vector::from_element(1, r * x[0] * (1.0 - x[0]) + u[0])));
        let h: MapFn = Arc::new(|x: &Vector, _u: &Vector| Ok(x.clone()));
        let jac: JacobianFn = Arc::new(move |x: &Vector, _u: &Vector| {
            Ok((
                Mat::from_element(1, 1, r * (1.0 - 2.0 * x[0])),
                Mat::from_element(1, 1, 1.0),
                Mat::from_element(1, 1, 1.0),
                Mat::zeros(1, 1),
            ))
        });
        Self::new(1, 1, 1, f, h).with_jacobians(jac)
    }

    /// A linear system viewed through the nonlinear interface.
    pub fn linear(sys: &StateSpace) -> Self {
        let s1 = sys.clone();
        let s2 = sys.clone();
        let s3 = sys.clone();
        let f: MapFn = Arc::new(move |x: &Vector, u: &Vector| Ok(s1.a() * x + s1.b() * u));
        let h: MapFn = Arc::new(move |x: &Vector, u: &Vector| Ok(s2.c() * x + s2.d() * u));
        let jac: JacobianFn =
            Arc::new(move |_x: &Vector, _u: &Vector| Ok((s3.a().clone(), s3.b().clone(), s3.c().clone(), s3.d().clone())));
        Self::new(sys.n(), sys.m(), sys.q(), f, h).with_jacobians(jac)
    }

    /// Static output map `y = g(x)` with identity state update and no input.
    pub fn static_output(n: usize, q: usize, g: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        let f: MapFn = Arc::new(|x: &Vector, _u: &Vector| Ok(x.clone()));
        let h: MapFn = Arc::new(move |x: &Vector, _u: &Vector| Ok(g(x)));
        Self::new(n, 0, q, f, h)
    }

    fn eval(&self, which: &MapFn, what: &str, step: usize, x: &Vector, u: &Vector, len: usize) -> Result<Vector> {
        let v = which(x, u).map_err(|e| Error::Numerical(format!("{what} failed at step {step}: {e}")))?;
        if v.len() != len {
            return Err(Error::dim(format!("{what} returned length {} at step {step}, expected {len}", v.len())));
        }
        if v.iter().any(|z| !z.is_finite()) {
            return Err(Error::Numerical(format!("{what} returned a non-finite value at step {step}")));
        }
        Ok(v)
    }
}

/// `H_t(x0, U_t) = [h(x(0), u(0)); …; h(x(t), u(t))]` with `t + 1 = inputs.len()`.
pub fn stack_nonlinear_output(sys: &NonlinearSystem, x0: &Vector, inputs: &[Vector]) -> Result<Vector> {
    if inputs.is_empty() {
        return Err(Error::invalid("at least one input sample (t = 0) is required"));
    }
    if x0.len() != sys.n {
        return Err(Error::dim(format!("x0 has length {}, expected {}", x0.len(), sys.n)));
    }
    let t = inputs.len() - 1;
    let mut out = Vector::zeros((t + 1) * sys.q);
    let mut x = x0.clone();
    for (k, u) in inputs.iter().enumerate() {
        if u.len() != sys.m {
            return Err(Error::dim(format!("input at step {k} has length {}, expected {}", u.len(), sys.m)));
        }
        let y = sys.eval(&sys.h, "h", k, &x, u, sys.q)?;
        out.rows_mut(k * sys.q, sys.q).copy_from(&y);
        if k < t {
            x = sys.eval(&sys.f, "f", k, &x, u, sys.n)?;
        }
    }
    Ok(out)
}

fn split(sys: &NonlinearSystem, z: &Vector, steps: usize) -> (Vector, Vec<Vector>) {
    let x0 = z.rows(0, sys.n).into_owned();
    let inputs = (0..steps).map(|k| z.rows(sys.n + k * sys.m, sys.m).into_owned()).collect();
    (x0, inputs)
}

fn join(x0: &Vector, inputs: &[Vector]) -> Vector {
    Vector::from_iterator(
        x0.len() + inputs.iter().map(|u| u.len()).sum::<usize>(),
        x0.iter().chain(inputs.iter().flat_map(|u| u.iter())).copied(),
    )
}

fn stacked_at(sys: &NonlinearSystem, z: &Vector, steps: usize) -> Result<Vector> {
    let (x0, inputs) = split(sys, z, steps);
    stack_nonlinear_output(sys, &x0, &inputs)
}

/// `∂H_t/∂(x0, U_t)`, analytic when Jacobians are supplied, otherwise by
/// central differences with step `1e-6·(1 + |z_i|)`.
pub fn stacked_jacobian(sys: &NonlinearSystem, x0: &Vector, inputs: &[Vector]) -> Result<Mat> {
    let steps = inputs.len();
    let d = sys.n + steps * sys.m;
    if let Some(jac) = &sys.jacobians {
        let mut out = Mat::zeros(steps * sys.q, d);
        let mut s = linalg::hstack(&[&Mat::identity(sys.n, sys.n), &Mat::zeros(sys.n, d - sys.n)]);
        let mut x = x0.clone();
        for (k, u) in inputs.iter().enumerate() {
            let (fx, fu, hx, hu) = jac(&x, u).map_err(|e| Error::Numerical(format!("Jacobian failed at step {k}: {e}")))?;
            let mut e_k = Mat::zeros(sys.m, d);
            e_k.view_mut((0, sys.n + k * sys.m), (sys.m, sys.m)).copy_from(&Mat::identity(sys.m, sys.m));
            out.view_mut((k * sys.q, 0), (sys.q, d)).copy_from(&(&hx * &s + &hu * &e_k));
            if k + 1 < steps {
                s = &fx * &s + &fu * &e_k;
                x = sys.eval(&sys.f, "f", k, &x, u, sys.n)?;
            }
        }
        return Ok(out);
    }
    let z = join(x0, inputs);
    let mut out = Mat::zeros(steps * sys.q, d);
    for i in 0..d {
        let h = 1e-6 * (1.0 + z[i].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h;
        zm[i] -= h;
        let col = (stacked_at(sys, &zp, steps)? - stacked_at(sys, &zm, steps)?) / (2.0 * h);
        out.set_column(i, &col);
    }
    Ok(out)
}

/// Search settings for the adjacency-ball scan.
#[derive(Debug, Clone, Serialize)]
pub struct SearchConfig {
    /// Low-discrepancy sample count.
    pub points: usize,
    /// Local ascents started from the best samples.
    pub starts: usize,
    /// Function evaluations per local ascent.
    pub max_evals: usize,
    pub seed: u32,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { points: 4096, starts: 8, max_evals: 4000, seed: 0 }
    }
}

/// Sampled calibration for the nonlinear Gaussian mechanism.
#[derive(Debug, Clone, Serialize)]
pub struct NonlinearCalibration {
    /// Largest `|H_t(x0 + x̄0, U + Ū) − H_t(x0, U)|₂` found in the c-ball.
    pub sup_deviation: f64,
    /// `R(ε, δ)·sup_deviation`: the smallest i.i.d. output noise level.
    pub sigma_floor: f64,
    /// Perturbation `(x̄0, Ū)` attaining the sup.
    pub worst_perturbation: Vec<f64>,
    pub evaluations: usize,
    /// The sup is a sampled lower bound, so the floor may be optimistic.
    pub sampled: bool,
}

fn p_norm(v: &Vector, p: NormIndex) -> f64 {
    match p {
        NormIndex::One => v.iter().map(|x| x.abs()).sum(),
        NormIndex::Two => v.norm(),
    }
}

/// Retraction of `z` into the `c`-ball of the given norm.
fn into_ball(z: &Vector, c: f64, p: NormIndex) -> Vector {
    let r = p_norm(z, p);
    if r > c {
        z * (c / r)
    } else {
        z.clone()
    }
}

fn sobol(index: usize, dim: usize, seed: u32) -> f64 {
    let d = dim as u32;
    let per = sobol_burley::NUM_DIMENSIONS;
    let v = sobol_burley::sample(index as u32, d % per, seed.wrapping_add(d / per)) as f64;
    v.clamp(1e-9, 1.0 - 1e-9)
}

fn ball_samples(d: usize, count: usize, c: f64, p: NormIndex, seed: u32) -> Result<Vec<Vector>> {
    let mut out = Vec::with_capacity(2 * count);
    for i in 0..count {
        let g = (0..d).map(|j| privacy::q_inverse(sobol(i, j, seed))).collect::<Result<Vec<f64>>>()?;
        let g = Vector::from_vec(g);
        let r = p_norm(&g, p);
        if r == 0.0 {
            continue;
        }
        let dir = g / r;
        let frac = sobol(i, d, seed).powf(1.0 / d as f64);
        out.push(&dir * c);
        out.push(&dir * (c * frac));
    }
    Ok(out)
}

/// Nelder–Mead maximization of `obj`.
fn nelder_mead_max(obj: &dyn Fn(&Vector) -> Result<f64>, start: &Vector, step: f64, max_evals: usize) -> Result<(Vector, f64, usize)> {
    let d = start.len();
    let mut simplex: Vec<(Vector, f64)> = Vec::with_capacity(d + 1);
    let mut evals = 0;
    let eval = |z: &Vector, evals: &mut usize| -> Result<f64> {
        *evals += 1;
        Ok(-obj(z)?)
    };
    simplex.push((start.clone(), eval(start, &mut evals)?));
    for i in 0..d {
        let mut z = start.clone();
        z[i] += step;
        let v = eval(&z, &mut evals)?;
        simplex.push((z, v));
    }
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[d].1);
        if (worst - best).abs() <= 1e-13 * best.abs().max(1e-300) {
            break;
        }
        let centroid = simplex[..d].iter().fold(Vector::zeros(d), |acc, s| acc + &s.0) / d as f64;
        let xr = &centroid + (&centroid - &simplex[d].0);
        let fr = eval(&xr, &mut evals)?;
        if fr < simplex[0].1 {
            let xe = &centroid + (&xr - &centroid) * 2.0;
            let fe = eval(&xe, &mut evals)?;
            simplex[d] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let xc = if fr < simplex[d].1 {
                &centroid + (&xr - &centroid) * 0.5
            } else {
                &centroid + (&simplex[d].0 - &centroid) * 0.5
            };
            let fc = eval(&xc, &mut evals)?;
            if fc < simplex[d].1.min(fr) {
                simplex[d] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = &x0 + (&s.0 - &x0) * 0.5;
                    s.1 = eval(&s.0, &mut evals)?;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (z, v) = simplex.swap_remove(0);
    Ok((z, -v, evals))
}

fn map_results<T: Send, F>(serial: bool, n: usize, f: F) -> Result<Vec<T>>
where
    F: Fn(usize) -> Result<T> + Send + Sync,
{
    if serial {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Estimates the sup of the output deviation over the c-ball of adjacent
/// `(x0, U_t)` by Sobol sampling plus Nelder–Mead ascent and converts it to
/// an i.i.d. Gaussian noise floor.
pub fn calibrate_nonlinear_gaussian(
    sys: &NonlinearSystem,
    x0: &Vector,
    inputs: &[Vector],
    budget: &PrivacyBudget,
    search: &SearchConfig,
) -> Result<NonlinearCalibration> {
    let r = budget.validate_gaussian().and_then(|_| privacy::r_value(budget.epsilon, budget.delta))?;
    let steps = inputs.len();
    let base = stack_nonlinear_output(sys, x0, inputs)?;
    let z0 = join(x0, inputs);
    let d = z0.len();
    let c = budget.c;
    let deviation = |dz: &Vector| -> Result<f64> {
        let dz = into_ball(dz, c, budget.p);
        Ok((stacked_at(sys, &(&z0 + dz), steps)? - &base).norm())
    };
    let candidates = ball_samples(d, search.points, c, budget.p, search.seed)?;
    let values = map_results(sys.serial, candidates.len(), |i| deviation(&candidates[i]))?;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    order.truncate(search.starts.max(1));
    let mut evaluations = candidates.len();
    let ascents = map_results(sys.serial, order.len(), |k| {
        nelder_mead_max(&deviation, &candidates[order[k]], 0.1 * c, search.max_evals)
    })?;
    let (mut best_z, mut best) = (candidates[order[0]].clone(), values[order[0]]);
    for (z, v, ev) in ascents {
        evaluations += ev;
        if v > best {
            best = v;
            best_z = z;
        }
    }
    let best_z = into_ball(&best_z, c, budget.p);
    Ok(NonlinearCalibration {
        sup_deviation: best,
        sigma_floor: r * best,
        worst_perturbation: best_z.iter().copied().collect(),
        evaluations,
        sampled: true,
    })
}

/// Axis-aligned box over the stacked `(x0, U_t)`.
#[derive(Debug, Clone, Serialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dim("box bounds differ in length"));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::invalid(format!("box coordinate {i} has lower {} > upper {}", lower[i], upper[i])));
        }
        Ok(Self { lower, upper })
    }

    /// The same interval for every coordinate.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn point(&self, unit: impl Fn(usize) -> f64) -> Vector {
        Vector::from_fn(self.dim(), |i, _| self.lower[i] + unit(i) * (self.upper[i] - self.lower[i]))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LaplaceBound {
    /// Largest induced 1-norm of `∂H_t/∂(x0, U_t)` over the samples.
    pub sup_jacobian_norm: f64,
    /// `c·sup/ε`.
    pub scale: f64,
    pub witness: Vec<f64>,
    pub samples: usize,
    pub sampled: bool,
}

const SENSITIVITY_GUARD: f64 = 1e150;
const MAX_CORNER_DIM: usize = 12;

/// Laplace scale floor from the sampled sup of the Jacobian 1-norm over a
/// box, including its corners (up to 12 dimensions), its center and the
/// nominal point.
pub fn nonlinear_laplace_scale(
    sys: &NonlinearSystem,
    x0: &Vector,
    inputs: &[Vector],
    budget: &PrivacyBudget,
    domain: &DomainBox,
    samples: usize,
) -> Result<LaplaceBound> {
    budget.validate_laplace()?;
    let steps = inputs.len();
    let nominal = join(x0, inputs);
    let d = nominal.len();
    if domain.dim() != d {
        return Err(Error::dim(format!("box has {} coordinates, (x0, U_t) has {d}", domain.dim())));
    }
    let mut points = vec![nominal, domain.point(|_| 0.5)];
    if d <= MAX_CORNER_DIM {
        for mask in 0..(1usize << d) {
            points.push(domain.point(|i| ((mask >> i) & 1) as f64));
        }
    }
    for k in 0..samples {
        points.push(domain.point(|i| sobol(k, i, 0x5eed)));
    }
    let norms = map_results(sys.serial, points.len(), |k| {
        let (x, u) = split(sys, &points[k], steps);
        let j = stacked_jacobian(sys, &x, &u)?;
        let v = linalg::induced_one_norm(&j);
        if !v.is_finite() || v > SENSITIVITY_GUARD {
            return Err(Error::Numerical("unbounded sensitivity on box".into()));
        }
        Ok(v)
    })?;
    let (arg, sup) = norms
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    Ok(LaplaceBound {
        sup_jacobian_norm: sup,
        scale: budget.c * sup / budget.epsilon,
        witness: points[arg].iter().copied().collect(),
        samples: points.len(),
        sampled: true,
    })
}

/// Scalar gain `r ↦ α(r)` on `[0, r_max]`.
#[derive(Clone)]
pub struct KFunction {
    pub name: String,
    pub r_max: f64,
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for KFunction {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("KFunction").field("name", &self.name).field("r_max", &self.r_max).finish()
    }
}

const K_GRID: usize = 256;

impl KFunction {
    pub fn new(name: impl Into<String>, r_max: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), r_max, f: Arc::new(f) }
    }

    pub fn linear(k: f64) -> Self {
        Self::new(format!("{k}·r"), f64::INFINITY, move |r| k * r)
    }

    pub fn power(k: f64, p: f64) -> Self {
        Self::new(format!("{k}·r^{p}"), f64::INFINITY, move |r| k * r.powf(p))
    }

    /// The zero gain; monotone but not strictly increasing.
    pub fn zero() -> Self {
        Self::new("0", f64::INFINITY, |_| 0.0)
    }

    pub fn eval(&self, r: f64) -> f64 {
        (self.f)(r)
    }

    /// Sampled check on `[0, upto]`: value 0 at 0 and strictly increasing,
    /// or identically zero when `allow_zero`.
    pub fn check(&self, upto: f64, allow_zero: bool) -> Result<()> {
        if upto > self.r_max {
            return Err(Error::invalid(format!("{} is defined on [0, {}], queried at {upto}", self.name, self.r_max)));
        }
        let at0 = self.eval(0.0);
        if at0.abs() > 1e-12 {
            return Err(Error::invalid(format!("{}(0) = {at0}, expected 0", self.name)));
        }
        let vals: Vec<f64> = (0..=K_GRID).map(|i| self.eval(upto * i as f64 / K_GRID as f64)).collect();
        if allow_zero && vals.iter().all(|v| *v == 0.0) {
            return Ok(());
        }
        if let Some(i) = (1..vals.len()).find(|&i| !(vals[i] > vals[i - 1])) {
            return Err(Error::invalid(format!(
                "{} is not strictly increasing: value {} at r = {} after {}",
                self.name,
                vals[i],
                upto * i as f64 / K_GRID as f64,
                vals[i - 1]
            )));
        }
        Ok(())
    }
}

pub type StorageFn = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;

/// Incremental storage function `V` with its gains.
#[derive(Clone)]
pub struct IosCertificate {
    pub v: StorageFn,
    pub lambda: f64,
    pub sigma1: KFunction,
    pub sigma2: KFunction,
    pub alpha2: KFunction,
    pub c1: f64,
}

impl fmt::Debug for IosCertificate {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("IosCertificate")
            .field("lambda", &self.lambda)
            .field("sigma1", &self.sigma1)
            .field("sigma2", &self.sigma2)
            .field("alpha2", &self.alpha2)
            .field("c1", &self.c1)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum SampleMode {
    /// `per_axis` points per coordinate of `(x, x', u, u')`.
    Grid { per_axis: usize },
    Sobol { count: usize, seed: u32 },
}

#[derive(Debug, Clone)]
pub struct SampleSpec {
    pub state_lower: Vec<f64>,
    pub state_upper: Vec<f64>,
    pub input_lower: Vec<f64>,
    pub input_upper: Vec<f64>,
    pub mode: SampleMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct IosWitness {
    pub x: Vec<f64>,
    pub x_prime: Vec<f64>,
    pub u: Vec<f64>,
    pub u_prime: Vec<f64>,
}

/// Minimum margins of the three inequalities; negative means violated.
#[derive(Debug, Clone, Serialize)]
pub struct IosReport {
    /// All margins nonnegative on the samples; not a proof.
    pub holds_on_samples: bool,
    pub samples: usize,
    /// `V + σ1(|Δu|) − c1|Δh|`.
    pub output_margin: f64,
    /// `α2(|Δx|) − V`.
    pub upper_margin: f64,
    /// `λV + σ2(|Δu|) − V(f, f')`.
    pub decrease_margin: f64,
    pub output_witness: Option<IosWitness>,
    pub upper_witness: Option<IosWitness>,
    pub decrease_witness: Option<IosWitness>,
}

fn margin_tol(terms: &[f64]) -> f64 {
    1e-12 * (1.0 + terms.iter().map(|t| t.abs()).fold(0.0, f64::max))
}

/// Evaluates the incremental IOS inequalities on sampled state/input pairs.
pub fn check_incremental_ios(sys: &NonlinearSystem, cert: &IosCertificate, spec: &SampleSpec) -> Result<IosReport> {
    if !(cert.lambda > 0.0 && cert.lambda < 1.0) {
        return Err(Error::invalid(format!("λ must lie in (0, 1), got {}", cert.lambda)));
    }
    if !(cert.c1 > 0.0) {
        return Err(Error::invalid(format!("c1 must be positive, got {}", cert.c1)));
    }
    let (n, m) = (sys.n, sys.m);
    if spec.state_lower.len() != n || spec.state_upper.len() != n || spec.input_lower.len() != m || spec.input_upper.len() != m {
        return Err(Error::dim("sample boxes do not match the system dimensions"));
    }
    let lower: Vec<f64> = [&spec.state_lower[..], &spec.state_lower[..], &spec.input_lower[..], &spec.input_lower[..]].concat();
    let upper: Vec<f64> = [&spec.state_upper[..], &spec.state_upper[..], &spec.input_upper[..], &spec.input_upper[..]].concat();
    let domain = DomainBox::new(lower, upper)?;
    let dim = domain.dim();
    let count = match spec.mode {
        SampleMode::Grid { per_axis } => {
            if per_axis < 2 {
                return Err(Error::invalid("grid needs at least two points per axis"));
            }
            per_axis
                .checked_pow(dim as u32)
                .filter(|c| *c <= 50_000_000)
                .ok_or_else(|| Error::invalid("grid too large"))?
        }
        SampleMode::Sobol { count, .. } => count,
    };
    let point = |k: usize| -> Vector {
        match spec.mode {
            SampleMode::Grid { per_axis } => {
                let mut idx = k;
                let mut digits = vec![0usize; dim];
                for dgt in digits.iter_mut() {
                    *dgt = idx % per_axis;
                    idx /= per_axis;
                }
                domain.point(|i| digits[i] as f64 / (per_axis - 1) as f64)
            }
            SampleMode::Sobol { seed, .. } => domain.point(|i| sobol(k, i, seed)),
        }
    };
    let margins = map_results(sys.serial, count, |k| {
        let z = point(k);
        let x = z.rows(0, n).into_owned();
        let xp = z.rows(n, n).into_owned();
        let u = z.rows(2 * n, m).into_owned();
        let up = z.rows(2 * n + m, m).into_owned();
        let du = (&u - &up).norm();
        let dx = (&x - &xp).norm();
        let v = (cert.v)(&x, &xp);
        let hy = sys.eval(&sys.h, "h", 0, &x, &u, sys.q)?;
        let hyp = sys.eval(&sys.h, "h", 0, &xp, &up, sys.q)?;
        let lhs1 = cert.c1 * (hy - hyp).norm();
        let rhs1 = v + cert.sigma1.eval(du);
        let a2 = cert.alpha2.eval(dx);
        let fx = sys.eval(&sys.f, "f", 0, &x, &u, n)?;
        let fxp = sys.eval(&sys.f, "f", 0, &xp, &up, n)?;
        let vf = (cert.v)(&fx, &fxp);
        let rhs3 = cert.lambda * v + cert.sigma2.eval(du);
        let snap = |m: f64, terms: &[f64]| if m.abs() <= margin_tol(terms) { 0.0 } else { m };
        Ok([
            snap(rhs1 - lhs1, &[rhs1, lhs1]),
            snap(a2 - v, &[a2, v]),
            snap(rhs3 - vf, &[rhs3, vf]),
        ])
    })?;
    let witness = |k: usize| {
        let z = point(k);
        IosWitness {
            x: z.rows(0, n).iter().copied().collect(),
            x_prime: z.rows(n, n).iter().copied().collect(),
            u: z.rows(2 * n, m).iter().copied().collect(),
            u_prime: z.rows(2 * n + m, m).iter().copied().collect(),
        }
    };
    let mut mins = [f64::INFINITY; 3];
    let mut args = [0usize; 3];
    for (k, row) in margins.iter().enumerate() {
        for c in 0..3 {
            if row[c] < mins[c] {
                mins[c] = row[c];
                args[c] = k;
            }
        }
    }
    let wit = |c: usize| if mins[c] < 0.0 { Some(witness(args[c])) } else { None };
    Ok(IosReport {
        holds_on_samples: mins.iter().all(|v| *v >= 0.0),
        samples: count,
        output_margin: mins[0],
        upper_margin: mins[1],
        decrease_margin: mins[2],
        output_witness: wit(0),
        upper_witness: wit(1),
        decrease_witness: wit(2),
    })
}

/// `((α(c) + (t+1)·γ(c))·R(ε, δ))²`, the floor on `λ_min(Σ)`.
pub fn calibrate_ios_gaussian(alpha: &KFunction, gamma: &KFunction, budget: &PrivacyBudget, t: usize) -> Result<f64> {
    budget.validate_gaussian()?;
    let c = budget.c;
    alpha.check(c, false)?;
    gamma.check(c, true)?;
    let r = privacy::r_value(budget.epsilon, budget.delta)?;
    let root = (alpha.eval(c) + (t as f64 + 1.0) * gamma.eval(c)) * r;
    Ok(root * root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn logistic_hand_recursion() {
        let sys = NonlinearSystem::logistic(3.5);
        let out = stack_nonlinear_output(&sys, &v(&[0.2]), &vec![v(&[0.0]); 3]).unwrap();
        let want = [0.2, 0.56, 3.5 * 0.56 * 0.44];
        for (a, b) in out.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((out[2] - 0.8624).abs() < 1e-12);
    }

    #[test]
    fn t_zero_is_single_output() {
        let sys = NonlinearSystem::logistic(3.5);
        let out = stack_nonlinear_output(&sys, &v(&[0.3]), &[v(&[0.0])]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0], 0.3);
    }

    #[test]
    fn failing_map_reports_step() {
        let f: MapFn = Arc::new(|x: &Vector, _u: &Vector| {
            if x[0] > 1.5 {
                Err(Error::invalid("outside domain"))
            } else {
                Ok(x * 2.0)
            }
        });
        let h: MapFn = Arc::new(|x: &Vector, _u: &Vector| Ok(x.clone()));
        let sys = NonlinearSystem::new(1, 1, 1, f, h);
        let err = stack_nonlinear_output(&sys, &v(&[1.0]), &vec![v(&[0.0]); 4]).unwrap_err();
        assert!(err.to_string().contains("step 1"), "{err}");
    }

    #[test]
    fn finite_difference_matches_analytic_jacobian() {
        let analytic = NonlinearSystem::logistic(3.2);
        let mut numeric = analytic.clone();
        numeric.jacobians = None;
        let inputs = vec![v(&[0.01]), v(&[-0.02]), v(&[0.0])];
        let a = stacked_jacobian(&analytic, &v(&[0.3]), &inputs).unwrap();
        let b = stacked_jacobian(&numeric, &v(&[0.3]), &inputs).unwrap();
        assert!((a - b).amax() < 1e-7);
    }

    #[test]
    fn quadratic_laplace_interval_max() {
        let sys = NonlinearSystem::static_output(1, 1, |x| x.map(|z| z * z));
        let budget = PrivacyBudget::laplace(0.5, 1.0).unwrap();
        let dom = DomainBox::uniform(1, -2.0, 2.0).unwrap();
        let b = nonlinear_laplace_scale(&sys, &v(&[0.0]), &[Vector::zeros(0)], &budget, &dom, 64).unwrap();
        assert!((b.sup_jacobian_norm - 4.0).abs() < 1e-6);
        assert!((b.scale - 8.0).abs() < 1e-5);
    }

    #[test]
    fn unbounded_sensitivity_guarded() {
        let sys = NonlinearSystem::static_output(1, 1, |x| x.map(|z| (z * 800.0).exp()));
        let budget = PrivacyBudget::laplace(1.0, 1.0).unwrap();
        let dom = DomainBox::uniform(1, 0.0, 1.0).unwrap();
        let err = nonlinear_laplace_scale(&sys, &v(&[0.0]), &[Vector::zeros(0)], &budget, &dom, 8).unwrap_err();
        assert!(err.to_string().contains("unbounded sensitivity on box"));
    }

    #[test]
    fn ios_gaussian_closed_form() {
        let budget = PrivacyBudget::gaussian(0.3, 0.0446, 1.0).unwrap();
        let floor = calibrate_ios_gaussian(&KFunction::linear(1.0), &KFunction::linear(1.0), &budget, 4).unwrap();
        let r = privacy::r_value(0.3, 0.0446).unwrap();
        assert!((floor.sqrt() - 6.0 * r).abs() < 1e-12);
        assert!((floor.sqrt() - 35.7).abs() < 0.1);
    }

    #[test]
    fn ios_gaussian_zero_gamma_and_affine_growth() {
        let budget = PrivacyBudget::gaussian(0.8, 0.01, 0.5).unwrap();
        let a = KFunction::power(2.0, 2.0);
        let f0 = calibrate_ios_gaussian(&a, &KFunction::zero(), &budget, 0).unwrap();
        let f9 = calibrate_ios_gaussian(&a, &KFunction::zero(), &budget, 9).unwrap();
        assert_eq!(f0, f9);
        let g = KFunction::linear(0.7);
        let r = privacy::r_value(0.8, 0.01).unwrap();
        let s: Vec<f64> = (0..5).map(|t| calibrate_ios_gaussian(&a, &g, &budget, t).unwrap().sqrt()).collect();
        for w in s.windows(2) {
            assert!((w[1] - w[0] - 0.7 * 0.5 * r).abs() < 1e-10);
        }
    }

    #[test]
    fn non_monotone_gain_rejected() {
        let budget = PrivacyBudget::gaussian(0.8, 0.01, 1.0).unwrap();
        let bad = KFunction::new("sin", f64::INFINITY, |r: f64| (4.0 * r).sin());
        assert!(calibrate_ios_gaussian(&bad, &KFunction::linear(1.0), &budget, 2).is_err());
    }

    fn scalar_cert(lambda: f64) -> IosCertificate {
        IosCertificate {
            v: Arc::new(|x: &Vector, y: &Vector| (x - y).norm()),
            lambda,
            sigma1: KFunction::zero(),
            sigma2: KFunction::linear(1.0),
            alpha2: KFunction::linear(1.0),
            c1: 1.0,
        }
    }

    #[test]
    fn identical_pairs_hold() {
        let sys = NonlinearSystem::linear(&StateSpace::scalar(2.0, 1.0, 1.0, 0.0));
        let spec = SampleSpec {
            state_lower: vec![1.0],
            state_upper: vec![1.0],
            input_lower: vec![0.5],
            input_upper: vec![0.5],
            mode: SampleMode::Sobol { count: 16, seed: 1 },
        };
        let rep = check_incremental_ios(&sys, &scalar_cert(0.5), &spec).unwrap();
        assert!(rep.holds_on_samples);
    }
}
