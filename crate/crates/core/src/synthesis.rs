//! Output regulation and privacy-preserving tracking controllers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hinf_sdp::{self, LemmaConfig, ObserverGain, SdpOptions};
use crate::linalg::{self, Mat, Vector};
use crate::linsys::{self, StateSpace};
use crate::observability;
use crate::privacy::PrivacyBudget;

/// Plant and exosystem stacked as `x̄ = [x_p; x_r]` with error output
/// `e = C̄ x̄ + D_p u_p`.
#[derive(Debug, Clone)]
pub struct CompositeSystem {
    pub a_bar: Mat,
    pub b_bar: Mat,
    pub c_bar: Mat,
    pub d_p: Mat,
}

impl CompositeSystem {
    pub fn new(plant: &StateSpace, exo: &StateSpace) -> Result<Self> {
        check_exo(plant, exo)?;
        let (np, nr, mp) = (plant.n(), exo.n(), plant.m());
        Ok(Self {
            a_bar: linalg::block_diag(&[plant.a(), exo.a()]),
            b_bar: linalg::vstack(&[plant.b(), &Mat::zeros(nr, mp)]),
            c_bar: linalg::hstack(&[plant.c(), &(-exo.c())]),
            d_p: plant.d().clone(),
        })
        .inspect(|c| debug_assert_eq!(c.a_bar.nrows(), np + nr))
    }
}

fn check_exo(plant: &StateSpace, exo: &StateSpace) -> Result<()> {
    if exo.q() != plant.q() {
        return Err(Error::dim(format!(
            "exosystem output dimension {} differs from plant output dimension {}",
            exo.q(),
            plant.q()
        )));
    }
    Ok(())
}

/// Solution `(X, U)` of `X A_r = A_p X + B_p U`, `C_p X + D_p U = C_r`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegulatorSolution {
    #[serde(with = "linalg::rows")]
    pub x: Mat,
    #[serde(with = "linalg::rows")]
    pub u: Mat,
    /// Frobenius residual of the two equations combined.
    pub residual: f64,
    /// Residual threshold for an exact solution.
    pub tolerance: f64,
}

impl RegulatorSolution {
    pub fn is_exact(&self) -> bool {
        self.residual < self.tolerance
    }

    /// Feedforward gain `G2 = U − G1 X`.
    pub fn feedforward(&self, g1: &Mat) -> Mat {
        &self.u - g1 * &self.x
    }
}

/// Minimum-norm least-squares solution of the regulator equations, exact or not.
pub fn solve_regulator_least_squares(plant: &StateSpace, exo: &StateSpace) -> Result<RegulatorSolution> {
    check_exo(plant, exo)?;
    let (np, mp) = (plant.n(), plant.m());
    let nr = exo.n();
    let (ap, bp, cp, dp) = (plant.a(), plant.b(), plant.c(), plant.d());
    let (ar, cr) = (exo.a(), exo.c());
    let i_np = Mat::identity(np, np);
    let i_nr = Mat::identity(nr, nr);
    // vec(X A_r − A_p X − B_p U) = (A_rᵀ ⊗ I − I ⊗ A_p) vec X − (I ⊗ B_p) vec U
    let dyn_x = linalg::kron(&ar.transpose(), &i_np) - linalg::kron(&i_nr, ap);
    let dyn_u = -linalg::kron(&i_nr, bp);
    let out_x = linalg::kron(&i_nr, cp);
    let out_u = linalg::kron(&i_nr, dp);
    let lhs = linalg::vstack(&[&linalg::hstack(&[&dyn_x, &dyn_u]), &linalg::hstack(&[&out_x, &out_u])]);
    let rhs = linalg::vstack(&[&Mat::zeros(np * nr, 1), &Mat::from_column_slice(cp.nrows() * nr, 1, cr.as_slice())]);
    let sol = linalg::pinv(&lhs)? * &rhs;
    let x = linalg::unvec(&sol.as_slice()[..np * nr], np, nr);
    let u = linalg::unvec(&sol.as_slice()[np * nr..], mp, nr);
    let r_dyn = &x * ar - ap * &x - bp * &u;
    let r_out = cp * &x + dp * &u - cr;
    let residual = (r_dyn.norm_squared() + r_out.norm_squared()).sqrt();
    let scale = [ap, bp, cp, dp, ar, cr]
        .iter()
        .map(|m| linalg::max_abs(m))
        .fold(1.0, f64::max);
    Ok(RegulatorSolution {
        x,
        u,
        residual,
        tolerance: 1e-9 * scale,
    })
}

/// Exact solution of the regulator equations; fails when the least-squares
/// residual exceeds `1e-9·scale`.
pub fn solve_regulator_equations(plant: &StateSpace, exo: &StateSpace) -> Result<RegulatorSolution> {
    let sol = solve_regulator_least_squares(plant, exo)?;
    if !sol.is_exact() {
        return Err(Error::Numerical(format!(
            "regulator equations unsolvable: residual {:.3e} exceeds {:.3e}",
            sol.residual, sol.tolerance
        )));
    }
    Ok(sol)
}

/// Standing assumptions of the output regulation problem with witnesses.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionReport {
    /// No exosystem eigenvalue strictly inside the unit disk.
    pub exosystem_antistable: bool,
    pub exosystem_eigenvalues: Vec<[f64; 2]>,
    /// `(A_p, B_p)` stabilizable.
    pub plant_stabilizable: bool,
    pub uncontrollable_mode: Option<[f64; 2]>,
    /// `(C̄, Ā)` detectable.
    pub composite_detectable: bool,
    pub unobservable_mode: Option<[f64; 2]>,
    /// Regulator equations solvable.
    pub regulator_solvable: bool,
    pub regulator_residual: f64,
}

impl AssumptionReport {
    pub fn all_hold(&self) -> bool {
        self.exosystem_antistable && self.plant_stabilizable && self.composite_detectable && self.regulator_solvable
    }
}

fn pair(z: nalgebra::Complex<f64>) -> [f64; 2] {
    [z.re, z.im]
}

pub fn check_assumptions(plant: &StateSpace, exo: &StateSpace) -> Result<AssumptionReport> {
    let comp = CompositeSystem::new(plant, exo)?;
    let exo_eigs = linalg::eigenvalues(exo.a());
    let unc = linsys::pbh_uncontrollable_mode(plant.a(), plant.b(), true);
    let unobs = linsys::pbh_unobservable_mode(&comp.a_bar, &comp.c_bar, true);
    let reg = solve_regulator_least_squares(plant, exo)?;
    Ok(AssumptionReport {
        exosystem_antistable: exo_eigs.iter().all(|z| z.norm() >= 1.0 - 1e-9),
        exosystem_eigenvalues: exo_eigs.into_iter().map(pair).collect(),
        plant_stabilizable: unc.is_none(),
        uncontrollable_mode: unc.map(pair),
        composite_detectable: unobs.is_none(),
        unobservable_mode: unobs.map(pair),
        regulator_solvable: reg.is_exact(),
        regulator_residual: reg.residual,
    })
}

/// Observer-based regulator `u_p = G x_c`, `x_c⁺ = A_c x_c − L e`.
#[derive(Debug, Clone, Serialize)]
pub struct TrackingController {
    #[serde(with = "linalg::rows")]
    pub g: Mat,
    #[serde(with = "linalg::rows")]
    pub l: Mat,
    #[serde(with = "linalg::rows")]
    pub a_c: Mat,
}

impl TrackingController {
    /// Autonomous loop of plant, exosystem and controller over
    /// `(x_p, x_r, x_c)` with output `e`.
    pub fn closed_loop(&self, plant: &StateSpace, exo: &StateSpace) -> Result<StateSpace> {
        let comp = CompositeSystem::new(plant, exo)?;
        let nbar = comp.a_bar.nrows();
        let top = linalg::hstack(&[&comp.a_bar, &(&comp.b_bar * &self.g)]);
        let e_x = comp.c_bar.clone();
        let e_c = &comp.d_p * &self.g;
        let bottom = linalg::hstack(&[&(-(&self.l * &e_x)), &(&self.a_c - &self.l * &e_c)]);
        let a = linalg::vstack(&[&top, &bottom]);
        let c = linalg::hstack(&[&e_x, &e_c]);
        let q = c.nrows();
        StateSpace::new(a, Mat::zeros(2 * nbar, 0), c, Mat::zeros(q, 0))
    }
}

/// Assembles controller (8) with `G = [G1, U − G1X]`.
pub fn design_observer_tracking_controller(
    plant: &StateSpace,
    exo: &StateSpace,
    g1: &Mat,
    l: &Mat,
) -> Result<TrackingController> {
    let comp = CompositeSystem::new(plant, exo)?;
    let nbar = comp.a_bar.nrows();
    if g1.shape() != (plant.m(), plant.n()) || l.shape() != (nbar, plant.q()) {
        return Err(Error::dim(format!(
            "G1 must be {}×{} and L {}×{}",
            plant.m(),
            plant.n(),
            nbar,
            plant.q()
        )));
    }
    let rho_g = linalg::spectral_radius(&(plant.a() + plant.b() * g1));
    if rho_g >= 1.0 {
        return Err(Error::Unstable(format!("A_p + B_p·G1 not Schur stable (radius {rho_g})")));
    }
    let rho_l = linalg::spectral_radius(&(&comp.a_bar + l * &comp.c_bar));
    if rho_l >= 1.0 {
        return Err(Error::Unstable(format!("Ā + L·C̄ not Schur stable (radius {rho_l})")));
    }
    let reg = solve_regulator_equations(plant, exo)?;
    let g = linalg::hstack(&[g1, &reg.feedforward(g1)]);
    let a_c = &comp.a_bar + l * &comp.c_bar + (&comp.b_bar + l * &comp.d_p) * &g;
    Ok(TrackingController { g, l: l.clone(), a_c })
}

/// Modified regulator driven by the true exosystem state:
/// `u_p = G1 x̄_c + G2 x_r`, `x̄_c⁺ = Ā_c x̄_c + Ā_r x_r − L1 e`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrivacyController {
    #[serde(with = "linalg::rows")]
    pub g1: Mat,
    #[serde(with = "linalg::rows")]
    pub g2: Mat,
    #[serde(with = "linalg::rows")]
    pub l1: Mat,
    #[serde(with = "linalg::rows")]
    pub a_c: Mat,
    #[serde(with = "linalg::rows")]
    pub a_r: Mat,
    /// Regulator solution used for `G2` and the steady controller state.
    #[serde(with = "linalg::rows")]
    pub x: Mat,
    /// Certified bound on the H∞ norm from `e` to `u_p`.
    pub gamma: f64,
    /// Frequency-sweep H∞ norm from `e` to `u_p`.
    pub hinf: f64,
    pub controller_radius: f64,
    pub observer_radius: f64,
    pub regulator_residual: f64,
}

impl PrivacyController {
    /// `Ā_c = A_p + B_p G1 + L1 (C_p + D_p G1)`.
    pub fn a_c_bar(&self, plant: &StateSpace) -> Result<Mat> {
        self.check_dims(plant)?;
        Ok(plant.a() + plant.b() * &self.g1 + &self.l1 * (plant.c() + plant.d() * &self.g1))
    }

    /// `Ā_r = −L1 C_r + (B_p + L1 D_p) G2`.
    pub fn a_r_bar(&self, plant: &StateSpace, exo: &StateSpace) -> Result<Mat> {
        self.check_dims(plant)?;
        if self.g2.ncols() != exo.n() || exo.q() != plant.q() {
            return Err(Error::dim("exosystem incompatible with G2 or plant outputs"));
        }
        Ok(-(&self.l1 * exo.c()) + (plant.b() + &self.l1 * plant.d()) * &self.g2)
    }

    fn check_dims(&self, plant: &StateSpace) -> Result<()> {
        let (n, m, q) = (plant.n(), plant.m(), plant.q());
        if self.g1.shape() != (m, n) || self.l1.shape() != (n, q) || self.g2.nrows() != m {
            return Err(Error::dim(format!(
                "controller gains G1 {:?}, G2 {:?}, L1 {:?} incompatible with plant (n={n}, m={m}, q={q})",
                self.g1.shape(),
                self.g2.shape(),
                self.l1.shape()
            )));
        }
        Ok(())
    }

    /// The controller seen from `e` to `u_p`: `(Ā_c, −L1, G1, 0)`.
    pub fn error_to_input(&self) -> StateSpace {
        let m = self.g1.nrows();
        let q = self.l1.ncols();
        StateSpace::new(self.a_c.clone(), -&self.l1, self.g1.clone(), Mat::zeros(m, q))
            .expect("controller matrices are consistent by construction")
    }

    /// Feedforward from the exosystem: `(Ā_c, Ā_r, G1, G2)`.
    pub fn reference_to_input(&self) -> StateSpace {
        StateSpace::new(self.a_c.clone(), self.a_r.clone(), self.g1.clone(), self.g2.clone())
            .expect("controller matrices are consistent by construction")
    }

    /// Controller state at the regulated steady state, `X x_r`.
    pub fn steady_state(&self, x_r: &Vector) -> Vector {
        &self.x * x_r
    }

    /// Builds and certifies a controller from given gains: `Ā_c` and the
    /// observer must be Schur stable and the H∞ norm from `e` to `u_p` must
    /// not exceed `gamma·(1 + 1e-6)`.
    pub fn from_gains(
        plant: &StateSpace,
        exo: &StateSpace,
        g1: Mat,
        l1: Mat,
        regulator: &RegulatorSolution,
        gamma: f64,
    ) -> Result<Self> {
        let g2 = regulator.feedforward(&g1);
        let mut ctrl = Self {
            g1,
            g2,
            l1,
            a_c: Mat::zeros(0, 0),
            a_r: Mat::zeros(0, 0),
            x: regulator.x.clone(),
            gamma,
            hinf: f64::NAN,
            controller_radius: f64::NAN,
            observer_radius: f64::NAN,
            regulator_residual: regulator.residual,
        };
        ctrl.a_c = ctrl.a_c_bar(plant)?;
        ctrl.a_r = ctrl.a_r_bar(plant, exo)?;
        ctrl.controller_radius = linalg::spectral_radius(&ctrl.a_c);
        ctrl.observer_radius = linalg::spectral_radius(&(plant.a() + &ctrl.l1 * plant.c()));
        if ctrl.controller_radius >= 1.0 {
            return Err(Error::Unstable(format!(
                "controller matrix Ā_c not Schur stable (radius {})",
                ctrl.controller_radius
            )));
        }
        if ctrl.observer_radius >= 1.0 {
            return Err(Error::Unstable(format!(
                "A_p + L1·C_p not Schur stable (radius {})",
                ctrl.observer_radius
            )));
        }
        ctrl.hinf = hinf_sdp::hinf_norm(&ctrl.error_to_input(), hinf_sdp::DEFAULT_TOL)?;
        if ctrl.hinf > gamma * (1.0 + 1e-6) {
            return Err(Error::Numerical(format!(
                "controller H∞ norm {} exceeds certified level {gamma}",
                ctrl.hinf
            )));
        }
        Ok(ctrl)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegulatorMode {
    /// Require an exact solution of the regulator equations.
    Exact,
    /// Accept the minimum-norm least-squares solution.
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObserverObjective {
    /// Fastest observer decay compatible with the H∞ constraint.
    DecayRate,
    /// Analytic center of the feasible set (maximum common slack).
    MaxSlack,
}

#[derive(Debug, Clone)]
pub struct PrivacyDesign {
    /// State feedback gain; computed by LQR with `Q = I`, `R = I` when absent.
    pub g1: Option<Mat>,
    pub gamma: f64,
    pub gamma_bar: Option<f64>,
    pub regulator: RegulatorMode,
    pub objective: ObserverObjective,
}

impl PrivacyDesign {
    pub fn new(gamma: f64) -> Self {
        Self {
            g1: None,
            gamma,
            gamma_bar: None,
            regulator: RegulatorMode::Exact,
            objective: ObserverObjective::DecayRate,
        }
    }
}

/// `G1 = −K` from the discrete LQR with unit weights.
pub fn lqr_gain(plant: &StateSpace) -> Result<Mat> {
    let n = plant.n();
    let m = plant.m();
    let sol = linsys::dare(plant.a(), plant.b(), &Mat::identity(n, n), &Mat::identity(m, m))?;
    Ok(-sol.k)
}

fn infeasible_with_bound(plant: &StateSpace, g1: &Mat, gamma: f64) -> Error {
    let mut hi = gamma.max(1e-6) * 2.0;
    let opts = SdpOptions::early_exit();
    let mut found = false;
    for _ in 0..40 {
        if hinf_sdp::solve_lemma(plant, g1, &LemmaConfig::at_gamma(hi), &opts)
            .map(|o| o.is_feasible())
            .unwrap_or(false)
        {
            found = true;
            break;
        }
        hi *= 2.0;
    }
    let bound = if found {
        hinf_sdp::min_feasible_gamma(plant, g1, (gamma, hi), 1e-3).ok()
    } else {
        None
    };
    Error::Infeasible {
        reason: match bound {
            Some(b) => format!("controller H∞ LMIs infeasible at γ = {gamma}; smallest feasible γ ≈ {b:.6}"),
            None => format!("controller H∞ LMIs infeasible at γ = {gamma} and at every tried larger level"),
        },
        lower_bound: bound,
    }
}

/// Designs `L1` from the observer and controller H∞ LMIs (plus the
/// closed-loop LMI when `gamma_bar` is given), then certifies the result.
pub fn design_privacy_controller(
    plant: &StateSpace,
    exo: &StateSpace,
    design: &PrivacyDesign,
) -> Result<PrivacyController> {
    let regulator = match design.regulator {
        RegulatorMode::Exact => solve_regulator_equations(plant, exo)?,
        RegulatorMode::LeastSquares => solve_regulator_least_squares(plant, exo)?,
    };
    let g1 = match &design.g1 {
        Some(g) => g.clone(),
        None => lqr_gain(plant)?,
    };
    let config = |rho: f64| LemmaConfig {
        gamma: Some(design.gamma),
        gamma_bar: design.gamma_bar,
        observer_decay: rho,
        observer: ObserverGain::Free,
    };
    let quick = SdpOptions::early_exit();
    let base = hinf_sdp::solve_lemma(plant, &g1, &config(1.0), &quick)?;
    if !base.is_feasible() {
        return Err(infeasible_with_bound(plant, &g1, design.gamma));
    }
    let rho = match design.objective {
        ObserverObjective::MaxSlack => 1.0,
        ObserverObjective::DecayRate => {
            let (mut lo, mut hi) = (0.0, 1.0);
            while hi - lo > 1e-3 {
                let mid = 0.5 * (lo + hi);
                if hinf_sdp::solve_lemma(plant, &g1, &config(mid), &quick)?.is_feasible() {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            // back off from the boundary so the certificate keeps a margin
            (hi + 0.02 * (1.0 - hi)).min(1.0)
        }
    };
    let outcome = hinf_sdp::solve_lemma(plant, &g1, &config(rho), &SdpOptions::default())?;
    let l1 = match (outcome.is_feasible(), outcome.l1) {
        (true, Some(l1)) => l1,
        _ => {
            return Err(Error::Numerical(format!(
                "LMI solve at observer decay {rho} lost feasibility: {}",
                outcome.solution.diagnostics
            )))
        }
    };
    PrivacyController::from_gains(plant, exo, g1, l1, &regulator, design.gamma)
}

/// Floor on `λ_min(Σ)` for Gaussian noise on the published `u_p`:
/// `(c·(λ_max^{1/2}(O_∞(Ā_c, G1)) + γ)·R(ε, δ))²` with the certified `γ`.
pub fn controller_privacy_noise(controller: &PrivacyController, budget: &PrivacyBudget) -> Result<f64> {
    let cr = budget.scaled_r()?;
    let sys = controller.error_to_input();
    let obs = observability::infinite_observability_gramian(&sys)?;
    let floor = cr * (linalg::lambda_max(&obs).max(0.0).sqrt() + controller.gamma);
    Ok(floor * floor)
}
