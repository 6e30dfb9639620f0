//! Two-node DC microgrid case study: model construction, noise design from
//! the controller's Markov matrix and seeded closed-loop experiments.
//!
//! State ordering is `(I_1..I_k, V_1..V_k, line currents)` with dynamic line
//! currents in edge-list order; measured outputs are `(I_1..I_k, V_1..V_k)`.
//! Currents are deviations from the load current, so loads do not enter the
//! dynamics.

use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::linsys::{self, ContinuousStateSpace, StateSpace};
use crate::observability;
use crate::privacy;
use crate::synthesis::{self, PrivacyController};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    /// Generator-side resistance (Ω).
    pub r: f64,
    /// Filter inductance (H).
    pub l: f64,
    /// Bus capacitance (F).
    pub c: f64,
    /// Nominal load current (A).
    #[serde(default)]
    pub load_current: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub from: usize,
    pub to: usize,
    /// Line resistance (Ω).
    pub r: f64,
    /// Line inductance (H); `None` models a purely resistive line whose
    /// current is algebraic and carries no state.
    pub l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicrogridParams {
    pub nodes: Vec<NodeParams>,
    pub lines: Vec<LineParams>,
    pub v_star: f64,
    pub dt: f64,
}

impl MicrogridParams {
    /// Two identical nodes joined by one line.
    pub fn paper() -> Self {
        let node = NodeParams { r: 0.2, l: 1.8e-3, c: 2.2e-3, load_current: 0.0 };
        Self {
            nodes: vec![node.clone(), node],
            lines: vec![LineParams { from: 0, to: 1, r: 0.07, l: Some(2.1e-3) }],
            v_star: 380.0,
            dt: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.nodes.len();
        if k == 0 {
            return Err(Error::invalid("microgrid needs at least one node"));
        }
        let positive = |what: String, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} must be positive, got {v}")))
            }
        };
        for (i, n) in self.nodes.iter().enumerate() {
            positive(format!("R_{}", i + 1), n.r)?;
            positive(format!("L_{}", i + 1), n.l)?;
            positive(format!("C_{}", i + 1), n.c)?;
        }
        for (e, line) in self.lines.iter().enumerate() {
            if line.from >= k || line.to >= k || line.from == line.to {
                return Err(Error::invalid(format!(
                    "line {e} joins nodes {} and {} of a {k}-node grid",
                    line.from, line.to
                )));
            }
            positive(format!("R of line {e}"), line.r)?;
            if let Some(l) = line.l {
                positive(format!("L of line {e}"), l)?;
            }
        }
        positive("V*".into(), self.v_star)?;
        positive("dt".into(), self.dt)?;
        // union-find connectivity
        let mut parent: Vec<usize> = (0..k).collect();
        fn root(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        for line in &self.lines {
            let (a, b) = (root(&mut parent, line.from), root(&mut parent, line.to));
            parent[a] = b;
        }
        let r0 = root(&mut parent, 0);
        if let Some(i) = (1..k).find(|&i| root(&mut parent, i) != r0) {
            return Err(Error::invalid(format!("topology is disconnected: node {} unreachable from node 1", i + 1)));
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Continuous-time model in the documented state and output ordering.
pub fn build_microgrid(params: &MicrogridParams) -> Result<ContinuousStateSpace> {
    params.validate()?;
    let k = params.nodes.len();
    let dynamic: Vec<&LineParams> = params.lines.iter().filter(|l| l.l.is_some()).collect();
    let n = 2 * k + dynamic.len();
    let mut a = Mat::zeros(n, n);
    let mut b = Mat::zeros(n, k);
    for (i, node) in params.nodes.iter().enumerate() {
        a[(i, i)] = -node.r / node.l;
        a[(i, k + i)] = -1.0 / node.l;
        b[(i, i)] = 1.0 / node.l;
        a[(k + i, i)] = 1.0 / node.c;
    }
    let mut e = 0;
    for line in &params.lines {
        let (i, j) = (line.from, line.to);
        let (ci, cj) = (params.nodes[i].c, params.nodes[j].c);
        match line.l {
            Some(l) => {
                let s = 2 * k + e;
                a[(k + i, s)] -= 1.0 / ci;
                a[(k + j, s)] += 1.0 / cj;
                a[(s, k + i)] = 1.0 / l;
                a[(s, k + j)] = -1.0 / l;
                a[(s, s)] = -line.r / l;
                e += 1;
            }
            None => {
                let g = 1.0 / line.r;
                a[(k + i, k + i)] -= g / ci;
                a[(k + i, k + j)] += g / ci;
                a[(k + j, k + j)] -= g / cj;
                a[(k + j, k + i)] += g / cj;
            }
        }
    }
    let c = linalg::hstack(&[&Mat::identity(2 * k, 2 * k), &Mat::zeros(2 * k, n - 2 * k)]);
    ContinuousStateSpace::new(a, b, c, Mat::zeros(2 * k, k))
}

/// Zero-order-hold discretization at `params.dt`.
pub fn discrete_microgrid(params: &MicrogridParams) -> Result<StateSpace> {
    linsys::zoh_discretize(&build_microgrid(params)?, params.dt)
}

/// Constant reference generator `A_r = C_r = I` over all measured outputs.
pub fn constant_exosystem(outputs: usize) -> StateSpace {
    StateSpace::new(
        Mat::identity(outputs, outputs),
        Mat::zeros(outputs, 0),
        Mat::identity(outputs, outputs),
        Mat::zeros(outputs, 0),
    )
    .expect("identity exosystem is well formed")
}

/// Regulated reference `(0, …, 0, V*, …, V*)`.
pub fn nominal_reference(params: &MicrogridParams) -> Vector {
    let k = params.nodes.len();
    Vector::from_fn(2 * k, |i, _| if i < k { 0.0 } else { params.v_star })
}

/// Gains printed for the two-node case study, used as reference values.
pub mod printed {
    use crate::linalg::Mat;

    pub const GAMMA: f64 = 0.365;

    pub fn g1() -> Mat {
        Mat::from_row_slice(2, 5, &[-0.850, 0.037, -0.0461, -0.0007, 0.229, 0.0370, -0.850, -0.0007, -0.0461, -0.229])
    }

    pub fn g2() -> Mat {
        Mat::from_row_slice(2, 4, &[0.869, -0.0019, 0.873, 0.174, -0.0019, 0.869, 0.174, 0.873])
    }

    pub fn l1() -> Mat {
        Mat::from_row_slice(
            5,
            4,
            &[
                -0.193, 0.0088, 0.0828, 0.0111, //
                0.0088, -0.193, 0.0111, 0.0828, //
                -0.0717, 0.0072, -0.134, -0.0129, //
                0.0072, -0.0717, -0.0129, -0.134, //
                0.0253, -0.0253, -0.0504, 0.0504,
            ],
        )
    }

    /// Per-user noise shape.
    pub fn noise_block() -> Mat {
        Mat::from_row_slice(2, 2, &[0.0347, -0.0106, -0.0106, 0.0129])
    }

    pub const KAPPA: f64 = 10.8;
}

/// Everything the preset pipeline needs.
#[derive(Debug, Clone)]
pub struct Microgrid {
    pub params: MicrogridParams,
    pub plant: StateSpace,
    pub exo: StateSpace,
    pub reference: Vector,
}

impl Microgrid {
    pub fn new(params: MicrogridParams) -> Result<Self> {
        let plant = discrete_microgrid(&params)?;
        let exo = constant_exosystem(plant.q());
        let reference = nominal_reference(&params);
        Ok(Self { params, plant, exo, reference })
    }

    pub fn paper() -> Self {
        Self::new(MicrogridParams::paper()).expect("preset parameters are valid")
    }

    /// Controller with LQR `G1`, least-squares regulator `G2` and the given
    /// observer gain, certified at `gamma`.
    pub fn controller_with_gain(&self, l1: Mat, gamma: f64) -> Result<PrivacyController> {
        let g1 = synthesis::lqr_gain(&self.plant)?;
        let reg = synthesis::solve_regulator_least_squares(&self.plant, &self.exo)?;
        PrivacyController::from_gains(&self.plant, &self.exo, g1, l1, &reg, gamma)
    }

    /// Controller built on the printed observer gain.
    pub fn printed_controller(&self) -> Result<PrivacyController> {
        self.controller_with_gain(printed::l1(), printed::GAMMA)
    }

    /// Controller with `L1` designed from the LMIs at `gamma`.
    pub fn designed_controller(&self, gamma: f64) -> Result<PrivacyController> {
        let mut design = synthesis::PrivacyDesign::new(gamma);
        design.regulator = synthesis::RegulatorMode::LeastSquares;
        synthesis::design_privacy_controller(&self.plant, &self.exo, &design)
    }

    /// Equilibrium perturbed by `deviation` on the plant state.
    pub fn scenario(&self, plant_deviation: &[(usize, f64)]) -> Result<Scenario> {
        let n = self.plant.n();
        let k = self.params.nodes.len();
        let mut eq = Vector::zeros(n);
        for i in 0..k {
            eq[k + i] = self.params.v_star;
        }
        let mut plant_state = eq.clone();
        for &(i, d) in plant_deviation {
            if i >= n {
                return Err(Error::invalid(format!("deviation index {i} out of range for {n} states")));
            }
            plant_state[i] += d;
        }
        Ok(Scenario {
            plant_state: plant_state.iter().copied().collect(),
            controller_state: eq.iter().copied().collect(),
            reference: self.reference.iter().copied().collect(),
        })
    }

    /// Load step at node 1 leaving `I_1 = −4`.
    pub fn paper_scenario(&self) -> Scenario {
        self.scenario(&[(0, -4.0)]).expect("node 1 exists")
    }
}

/// Per-user input noise shapes derived from the principal components of
/// `N_{t,T}ᵀ N_{t,T}` of the controller seen from `e` to `u_p`.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseDesign {
    pub t: usize,
    pub big_t: usize,
    pub a: f64,
    /// Eigenvalues of `N_{t,T}ᵀ N_{t,T}`, ascending.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalues kept as non-zero.
    pub retained: usize,
    pub threshold: f64,
    /// Controller-input coordinates of `u(0)` owned by each user.
    pub user_coordinates: Vec<Vec<usize>>,
    /// `Σ_j λ_j v_{i,j} v_{i,j}ᵀ` per user.
    #[serde(serialize_with = "ser_mats")]
    pub shapes: Vec<Mat>,
    /// `a²` times the shapes.
    #[serde(serialize_with = "ser_mats")]
    pub covariances: Vec<Mat>,
    /// Per-user `1/√λ_min(shape)`.
    pub user_kappa: Vec<f64>,
    /// Privacy holds when `a ≥ κ·c·R(ε, δ)`.
    pub kappa: f64,
}

fn ser_mats<S: serde::Serializer>(ms: &[Mat], s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<Vec<f64>>> = ms.iter().map(linalg::mat_to_rows).collect();
    rows.serialize(s)
}

impl NoiseDesign {
    /// Smallest `ε` for which `a ≥ κ·c·R(ε, δ)` holds.
    pub fn achievable_epsilon(&self, delta: f64, c: f64) -> Result<f64> {
        privacy::epsilon_for_floor(self.a / self.kappa, delta, c)
    }

    /// Scale `a` needed for a budget.
    pub fn required_scale(&self, budget: &privacy::PrivacyBudget) -> Result<f64> {
        Ok(self.kappa * budget.scaled_r()?)
    }
}

/// Coordinates `(i, i + k)` of a `2k`-input controller, one pair per user.
pub fn paired_user_coordinates(inputs: usize) -> Result<Vec<Vec<usize>>> {
    if inputs == 0 || !inputs.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "per-user pairing needs an even number of controller inputs, got {inputs}"
        )));
    }
    let k = inputs / 2;
    Ok((0..k).map(|i| vec![i, i + k]).collect())
}

/// Principal-component noise design; `threshold` is relative to `λ_max`
/// (default `1e-10`).
pub fn gramian_noise_design(
    controller: &PrivacyController,
    t: usize,
    big_t: usize,
    a: f64,
    threshold: Option<f64>,
) -> Result<NoiseDesign> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::invalid(format!("noise scale a must be positive, got {a}")));
    }
    let rel = threshold.unwrap_or(1e-10);
    if !(rel >= 0.0) {
        return Err(Error::invalid(format!("eigenvalue threshold must be nonnegative, got {rel}")));
    }
    let sys = controller.error_to_input();
    let coords = paired_user_coordinates(sys.m())?;
    let maps = observability::stack_markov_map(&sys, t, big_t)?;
    let w = maps.n_sub.transpose() * &maps.n_sub;
    let (vals, vecs) = linalg::sym_eigen(&w);
    let top = vals.last().copied().unwrap_or(0.0);
    let cut = rel * top;
    let kept: Vec<usize> = (0..vals.len()).filter(|&j| vals[j] > cut && vals[j] > 0.0).collect();
    if kept.is_empty() {
        return Err(Error::Numerical(format!(
            "all eigenvalues of NᵀN fall below the threshold {cut:e}"
        )));
    }
    let mut shapes = Vec::with_capacity(coords.len());
    let mut user_kappa = Vec::with_capacity(coords.len());
    for idx in &coords {
        let d = idx.len();
        let mut s = Mat::zeros(d, d);
        for &j in &kept {
            let v = Vector::from_fn(d, |r, _| vecs[(idx[r], j)]);
            s += &v * v.transpose() * vals[j];
        }
        let s = linalg::sym(&s);
        let lmin = linalg::lambda_min(&s);
        if !(lmin > 0.0) {
            return Err(Error::Numerical(format!(
                "noise shape for coordinates {idx:?} is singular (λ_min = {lmin:e})"
            )));
        }
        user_kappa.push(lmin.sqrt().recip());
        shapes.push(s);
    }
    let kappa = user_kappa.iter().copied().fold(0.0, f64::max);
    Ok(NoiseDesign {
        t,
        big_t,
        a,
        eigenvalues: vals.clone(),
        retained: kept.len(),
        threshold: cut,
        user_coordinates: coords,
        covariances: shapes.iter().map(|s| s * (a * a)).collect(),
        shapes,
        user_kappa,
        kappa,
    })
}

/// Initial plant state, controller state and exosystem state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub plant_state: Vec<f64>,
    pub controller_state: Vec<f64>,
    pub reference: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoisePlan {
    None,
    /// Each user perturbs its measurements with covariance `a²·shape`; the
    /// shape comes from [`gramian_noise_design`] when absent.
    Input {
        a: f64,
        #[serde(default)]
        shape: Option<Vec<Vec<f64>>>,
    },
    /// I.i.d. Gaussian noise of standard deviation `sigma` on every published input.
    Output { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub noise: NoisePlan,
    /// Number of simulated steps.
    pub horizon: usize,
    pub seed: u64,
    /// Sampling period used for the time column.
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Horizon pair for the noise design.
    #[serde(default = "default_design_horizon")]
    pub design_horizon: (usize, usize),
    /// `δ` and `c` for the reported achievable `ε`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Samples per window for the level-shift test.
    #[serde(default = "default_window")]
    pub test_window: usize,
    #[serde(default)]
    pub csv_path: Option<PathBuf>,
    #[serde(default)]
    pub summary_path: Option<PathBuf>,
}

fn default_design_horizon() -> (usize, usize) {
    (10, 5)
}
fn default_dt() -> f64 {
    1e-3
}
fn default_delta() -> f64 {
    0.0446
}
fn default_c() -> f64 {
    1.0
}
fn default_window() -> usize {
    50
}

impl ExperimentConfig {
    pub fn new(scenario: Scenario, noise: NoisePlan, horizon: usize, seed: u64) -> Self {
        Self {
            scenario,
            noise,
            horizon,
            seed,
            dt: default_dt(),
            design_horizon: default_design_horizon(),
            delta: default_delta(),
            c: default_c(),
            test_window: default_window(),
            csv_path: None,
            summary_path: None,
        }
    }
}

/// Per-step records; `noise` holds the injected `[v; w]`.
#[derive(Debug, Clone)]
pub struct Traces {
    pub dt: f64,
    pub users: usize,
    pub y: Vec<Vector>,
    pub u: Vec<Vector>,
    pub e: Vec<Vector>,
    pub noise: Vec<Vector>,
}

impl Traces {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn current(&self, user: usize) -> Vec<f64> {
        self.y.iter().map(|y| y[user]).collect()
    }

    pub fn voltage(&self, user: usize) -> Vec<f64> {
        self.y.iter().map(|y| y[self.users + user]).collect()
    }

    pub fn input(&self, user: usize) -> Vec<f64> {
        self.u.iter().map(|u| u[user]).collect()
    }

    /// CSV with columns `t, V_i…, I_i…, u_i…, e_j…, v_j…, w_i…`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let k = self.users;
        let q = self.e.first().map_or(0, |e| e.len());
        let mut wr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=k).map(|i| format!("V_{i}")));
        header.extend((1..=k).map(|i| format!("I_{i}")));
        header.extend((1..=k).map(|i| format!("u_{i}")));
        header.extend((1..=q).map(|j| format!("e_{j}")));
        header.extend((1..=q).map(|j| format!("v_{j}")));
        header.extend((1..=k).map(|i| format!("w_{i}")));
        wr.write_record(&header).map_err(csv_err)?;
        for s in 0..self.len() {
            let mut rec = vec![format!("{}", s as f64 * self.dt)];
            rec.extend((0..k).map(|i| self.y[s][k + i].to_string()));
            rec.extend((0..k).map(|i| self.y[s][i].to_string()));
            rec.extend(self.u[s].iter().map(|x| x.to_string()));
            rec.extend(self.e[s].iter().map(|x| x.to_string()));
            rec.extend(self.noise[s].iter().map(|x| x.to_string()));
            wr.write_record(&rec).map_err(csv_err)?;
        }
        wr.flush().map_err(|e| Error::Io { path: "<csv>".into(), source: e })?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Two-window mean-shift z-test: the first `window` samples against the
/// last `window`. Variance and lag-one autocorrelation are estimated on the
/// late (steady) window only and shared by both means, with an AR(1)
/// effective-sample correction.
#[derive(Debug, Clone, Serialize)]
pub struct LevelShiftTest {
    pub early_mean: f64,
    pub late_mean: f64,
    pub z: f64,
    pub p_value: f64,
    pub rejected: bool,
}

pub fn level_shift_test(series: &[f64], window: usize, alpha: f64) -> Result<LevelShiftTest> {
    if window < 2 || 2 * window > series.len() {
        return Err(Error::invalid(format!(
            "level-shift test needs two windows of {window} samples, series has {}",
            series.len()
        )));
    }
    let early = &series[..window];
    let late = &series[series.len() - window..];
    let n = window as f64;
    let mean = |w: &[f64]| w.iter().sum::<f64>() / n;
    let (m1, m2) = (mean(early), mean(late));
    let var = late.iter().map(|x| (x - m2).powi(2)).sum::<f64>() / (n - 1.0);
    let rho = if var > 0.0 {
        (late.windows(2).map(|p| (p[0] - m2) * (p[1] - m2)).sum::<f64>() / ((n - 1.0) * var)).clamp(0.0, 0.99)
    } else {
        0.0
    };
    let n_eff = (n * (1.0 - rho) / (1.0 + rho)).max(2.0);
    let se = (2.0 * var / n_eff).sqrt();
    let diff = m1 - m2;
    let z = if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 * m2.abs().max(1.0) {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    };
    let p_value = 2.0 * privacy::gaussian_tail(z.abs());
    Ok(LevelShiftTest { early_mean: m1, late_mean: m2, z, p_value, rejected: p_value < alpha })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub horizon: usize,
    pub seed: u64,
    pub noise: NoisePlan,
    pub final_voltages: Vec<f64>,
    pub final_currents: Vec<f64>,
    /// Largest noise-free tracking error over the last tenth of the run.
    pub steady_state_error: f64,
    /// Variances over the second half of the run, per user.
    pub voltage_variance: Vec<f64>,
    pub current_variance: Vec<f64>,
    pub input_variance: Vec<f64>,
    /// Variance ratios of each user against user 1, `(V, I, u)`.
    pub variance_ratios: Vec<[f64; 3]>,
    pub kappa: Option<f64>,
    /// `None` when no noise protects the inputs.
    pub achievable_epsilon: Option<f64>,
    pub delta: f64,
    pub c: f64,
    /// Level-shift test on the last user's published input.
    pub masking_test: LevelShiftTest,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub traces: Traces,
    pub summary: ExperimentSummary,
    pub design: Option<NoiseDesign>,
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn channel_rng(seed: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel);
    rng
}

/// Simulates plant, controller and exosystem under the configured noise and
/// optionally writes the CSV and JSON summary.
pub fn run_tracking_experiment(
    plant: &StateSpace,
    exo: &StateSpace,
    controller: &PrivacyController,
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    if config.horizon == 0 {
        return Err(Error::invalid("experiment horizon must be at least one step"));
    }
    let (np, mp, qp) = (plant.n(), plant.m(), plant.q());
    let sc = &config.scenario;
    if sc.plant_state.len() != np || sc.controller_state.len() != np || sc.reference.len() != exo.n() {
        return Err(Error::dim(format!(
            "scenario has plant/controller/reference lengths {}/{}/{}, expected {np}/{np}/{}",
            sc.plant_state.len(),
            sc.controller_state.len(),
            sc.reference.len(),
            exo.n()
        )));
    }
    let cl = linsys::close_loop(plant, controller, exo)?;
    let users = mp;
    let mut design = None;
    // per-user Cholesky factors of the input-noise covariance
    let mut input_factors: Vec<(Vec<usize>, Mat)> = Vec::new();
    let mut output_sigma = 0.0;
    match &config.noise {
        NoisePlan::None => {}
        NoisePlan::Input { a, shape } => {
            let coords = paired_user_coordinates(qp)?;
            let covs: Vec<Mat> = match shape {
                Some(rows) => {
                    if !(*a >= 0.0) {
                        return Err(Error::invalid(format!("noise scale a must be nonnegative, got {a}")));
                    }
                    let s = linalg::mat_from_rows(rows)?;
                    vec![s * (a * a); coords.len()]
                }
                None if *a == 0.0 => Vec::new(),
                None => {
                    let (t, big_t) = config.design_horizon;
                    let d = gramian_noise_design(controller, t, big_t, *a, None)?;
                    let covs = d.covariances.clone();
                    design = Some(d);
                    covs
                }
            };
            for (idx, cov) in coords.into_iter().zip(covs) {
                if cov.shape() != (idx.len(), idx.len()) {
                    return Err(Error::dim(format!(
                        "noise shape is {:?}, expected {}x{}",
                        cov.shape(),
                        idx.len(),
                        idx.len()
                    )));
                }
                let factor = if linalg::max_abs(&cov) == 0.0 {
                    cov.clone()
                } else {
                    linalg::cholesky(&cov, "input-noise covariance")?
                };
                input_factors.push((idx, factor));
            }
        }
        NoisePlan::Output { sigma } => {
            if !(*sigma >= 0.0) {
                return Err(Error::invalid(format!("output noise σ must be nonnegative, got {sigma}")));
            }
            output_sigma = *sigma;
        }
    }

    let mut rngs: Vec<ChaCha8Rng> = (0..(input_factors.len() + mp) as u64).map(|c| channel_rng(config.seed, c)).collect();
    let mut x = Vector::from_iterator(
        cl.n(),
        sc.plant_state.iter().chain(&sc.controller_state).chain(&sc.reference).copied(),
    );
    let mut traces = Traces {
        dt: config.dt,
        users,
        y: Vec::with_capacity(config.horizon),
        u: Vec::with_capacity(config.horizon),
        e: Vec::with_capacity(config.horizon),
        noise: Vec::with_capacity(config.horizon),
    };
    for _ in 0..config.horizon {
        let mut input = Vector::zeros(qp + mp);
        for (ch, (idx, factor)) in input_factors.iter().enumerate() {
            let z = Vector::from_fn(idx.len(), |_, _| StandardNormal.sample(&mut rngs[ch]));
            let v = factor * z;
            for (r, &i) in idx.iter().enumerate() {
                input[i] = v[r];
            }
        }
        if output_sigma > 0.0 {
            for i in 0..mp {
                let z: f64 = StandardNormal.sample(&mut rngs[input_factors.len() + i]);
                input[qp + i] = output_sigma * z;
            }
        }
        let out = cl.c() * &x + cl.d() * &input;
        traces.y.push(out.rows(0, qp).into_owned());
        traces.u.push(out.rows(qp, mp).into_owned());
        traces.e.push(out.rows(qp + mp, qp).into_owned());
        traces.noise.push(input.clone());
        x = cl.a() * &x + cl.b() * &input;
    }

    let h = config.horizon;
    let last = traces.y.last().expect("horizon ≥ 1");
    let k = users;
    let tail = (h / 10).max(1);
    let steady_state_error = traces.e[h - tail..].iter().map(|e| e.amax()).fold(0.0, f64::max);
    let half = h / 2;
    let band = |xs: Vec<f64>| variance(&xs[half..]);
    let voltage_variance: Vec<f64> = (0..k).map(|i| band(traces.voltage(i))).collect();
    let current_variance: Vec<f64> = (0..k).map(|i| band(traces.current(i))).collect();
    let input_variance: Vec<f64> = (0..k).map(|i| band(traces.input(i))).collect();
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
    let variance_ratios = (0..k)
        .map(|i| {
            [
                ratio(voltage_variance[i], voltage_variance[0]),
                ratio(current_variance[i], current_variance[0]),
                ratio(input_variance[i], input_variance[0]),
            ]
        })
        .collect();
    let kappa = design.as_ref().map(|d| d.kappa);
    let achievable_epsilon = match (&design, &config.noise) {
        (Some(d), _) => Some(d.achievable_epsilon(config.delta, config.c)?),
        (None, NoisePlan::Input { a, shape: Some(rows) }) if *a > 0.0 => {
            let s = linalg::mat_from_rows(rows)?;
            let kappa = linalg::lambda_min(&s).sqrt().recip();
            Some(privacy::epsilon_for_floor(a / kappa, config.delta, config.c)?)
        }
        _ => None,
    };
    let window = config.test_window.min(h / 2);
    let masking_test = level_shift_test(&traces.input(k - 1), window, 0.05)?;
    let summary = ExperimentSummary {
        horizon: h,
        seed: config.seed,
        noise: config.noise.clone(),
        final_voltages: (0..k).map(|i| last[k + i]).collect(),
        final_currents: (0..k).map(|i| last[i]).collect(),
        steady_state_error,
        voltage_variance,
        current_variance,
        input_variance,
        variance_ratios,
        kappa,
        achievable_epsilon,
        delta: config.delta,
        c: config.c,
        masking_test,
    };
    let outcome = ExperimentOutcome { traces, summary, design };
    Ok(outcome)
}

/// Runs the experiment and writes the configured artifacts.
pub fn run_and_write(
    plant: &StateSpace,
    exo: &StateSpace,
    controller: &PrivacyController,
    config: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    let outcome = run_tracking_experiment(plant, exo, controller, config)?;
    if let Some(path) = &config.csv_path {
        write_csv_file(&outcome.traces, path)?;
    }
    if let Some(path) = &config.summary_path {
        write_json_file(&outcome.summary, path)?;
    }
    Ok(outcome)
}

pub fn write_csv_file(traces: &Traces, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    traces.write_csv(std::io::BufWriter::new(file))
}

pub fn write_json_file<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut file = File::create(path).map_err(|e| io_err(path, e))?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    file.write_all(text.as_bytes()).map_err(|e| io_err(path, e))?;
    file.write_all(b"\n").map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_current_row() {
        let cs = build_microgrid(&MicrogridParams::paper()).unwrap();
        assert!((cs.a[(0, 0)] + 0.2 / 1.8e-3).abs() < 1e-9);
        assert!((cs.a[(0, 2)] + 1.0 / 1.8e-3).abs() < 1e-9);
        assert!((cs.b[(0, 0)] - 1.0 / 1.8e-3).abs() < 1e-9);
        assert!((cs.a[(0, 0)] + 111.111).abs() < 1e-3);
        assert!((cs.b[(0, 0)] - 555.556).abs() < 1e-3);
    }

    #[test]
    fn discrete_model_is_schur_stable() {
        let plant = discrete_microgrid(&MicrogridParams::paper()).unwrap();
        assert!(plant.spectral_radius() < 1.0);
    }

    #[test]
    fn disconnected_topology_rejected() {
        let mut p = MicrogridParams::paper();
        p.lines.clear();
        assert!(build_microgrid(&p).unwrap_err().to_string().contains("disconnected"));
    }

    #[test]
    fn node_relabeling_is_a_permutation_similarity() {
        let mut p = MicrogridParams::paper();
        p.nodes[0].r = 0.3;
        p.nodes[1].c = 2.5e-3;
        let mut swapped = p.clone();
        swapped.nodes.swap(0, 1);
        swapped.lines[0] = LineParams { from: 1, to: 0, ..p.lines[0].clone() };
        let a = build_microgrid(&p).unwrap();
        let b = build_microgrid(&swapped).unwrap();
        // line keeps its physical orientation, so its current is unchanged
        let mut perm = Mat::zeros(5, 5);
        for (i, &(j, s)) in [(1, 1.0), (0, 1.0), (3, 1.0), (2, 1.0), (4, 1.0)].iter().enumerate() {
            perm[(i, j)] = s;
        }
        let pa = &perm * &a.a * perm.transpose();
        assert!((pa - &b.a).amax() < 1e-9);
    }

    #[test]
    fn resistive_line_matches_fast_inductive_limit() {
        let mut p = MicrogridParams::paper();
        p.lines[0].l = None;
        let cs = build_microgrid(&p).unwrap();
        assert_eq!(cs.n(), 4);
        assert!((cs.a[(2, 2)] + 1.0 / (0.07 * 2.2e-3)).abs() < 1e-6);
        assert!((cs.a[(2, 3)] - 1.0 / (0.07 * 2.2e-3)).abs() < 1e-6);
    }

    #[test]
    fn level_shift_test_detects_and_ignores() {
        let flat: Vec<f64> = (0..400).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        assert!(!level_shift_test(&flat, 100, 0.05).unwrap().rejected);
        let mut shifted = flat.clone();
        for x in shifted.iter_mut().take(100) {
            *x += 10.0;
        }
        assert!(level_shift_test(&shifted, 100, 0.05).unwrap().rejected);
        assert!(level_shift_test(&flat, 300, 0.05).is_err());
    }

    #[test]
    fn pairing_needs_even_inputs() {
        assert_eq!(paired_user_coordinates(4).unwrap(), vec![vec![0, 2], vec![1, 3]]);
        assert!(paired_user_coordinates(3).is_err());
    }
}
