//! LMIs certifying observer stability and H∞ bounds of the modified
//! tracking controller, and the bisections built on them.

use serde::Serialize;

use super::lmi::{BlockLmi, Expr, LmiProblem, Var};
use super::solver::{sdp_feasible, SdpOptions, SdpSolution, SdpStatus};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::linsys::StateSpace;

/// Decision variables `P` and `L̂1`; `L̂1` is either free or tied to a
/// fixed observer gain through `L̂1 = P·L1`.
#[derive(Debug, Clone)]
pub struct ObserverVars {
    pub p: Var,
    pub l_hat: Expr,
    free_l_hat: Option<Var>,
}

impl ObserverVars {
    pub fn free(prob: &mut LmiProblem, plant: &StateSpace) -> Result<Self> {
        let p = prob.symmetric("P", plant.n())?;
        let l = prob.full("L_hat", plant.n(), plant.q())?;
        Ok(Self {
            p,
            l_hat: Expr::var(l),
            free_l_hat: Some(l),
        })
    }

    pub fn fixed_gain(prob: &mut LmiProblem, plant: &StateSpace, l1: &Mat) -> Result<Self> {
        if l1.shape() != (plant.n(), plant.q()) {
            return Err(Error::dim(format!(
                "observer gain must be {}×{}, got {}×{}",
                plant.n(),
                plant.q(),
                l1.nrows(),
                l1.ncols()
            )));
        }
        let p = prob.symmetric("P", plant.n())?;
        Ok(Self {
            p,
            l_hat: Expr::var(p).rmul(l1),
            free_l_hat: None,
        })
    }

    pub fn is_free(&self) -> bool {
        self.free_l_hat.is_some()
    }
}

fn check_gain(plant: &StateSpace, g1: &Mat) -> Result<()> {
    if g1.shape() != (plant.m(), plant.n()) {
        return Err(Error::dim(format!(
            "state feedback gain must be {}×{}, got {}×{}",
            plant.m(),
            plant.n(),
            g1.nrows(),
            g1.ncols()
        )));
    }
    let rho = linalg::spectral_radius(&(plant.a() + plant.b() * g1));
    if rho >= 1.0 {
        return Err(Error::Unstable(format!(
            "A_p + B_p·G1 is not Schur stable (spectral radius {rho})"
        )));
    }
    Ok(())
}

/// `P(A_p + B_p G1) + L̂1(C_p + D_p G1)`.
fn controller_state_block(plant: &StateSpace, g1: &Mat, vars: &ObserverVars) -> Expr {
    let acl = plant.a() + plant.b() * g1;
    let ccl = plant.c() + plant.d() * g1;
    Expr::var(vars.p).rmul(&acl).plus(vars.l_hat.clone().rmul(&ccl))
}

/// `[[ρP, PA_p + L̂1C_p], [·, ρP]] ≻ 0`, certifying spectral radius of
/// `A_p + L1 C_p` below `ρ`; `ρ = 1` is plain observer stability.
pub fn observer_lmi(plant: &StateSpace, g1: &Mat, vars: &ObserverVars, rho: f64) -> Result<BlockLmi> {
    check_gain(plant, g1)?;
    let n = plant.n();
    let off = Expr::var(vars.p).rmul(plant.a()).plus(vars.l_hat.clone().rmul(plant.c()));
    Ok(BlockLmi::new("observer", &[n, n])
        .set(0, 0, Expr::var(vars.p).scale(rho))
        .set(1, 0, off)
        .set(1, 1, Expr::var(vars.p).scale(rho)))
}

/// Bounded-real LMI of the controller `(Ā_c, −L1, G1, 0)` at level `γ`.
pub fn controller_hinf_lmi(plant: &StateSpace, g1: &Mat, gamma: f64, vars: &ObserverVars) -> Result<BlockLmi> {
    check_gain(plant, g1)?;
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("γ must be positive, got {gamma}")));
    }
    let (n, m, q) = (plant.n(), plant.m(), plant.q());
    Ok(BlockLmi::new("controller-hinf", &[n, q, n, m])
        .set(0, 0, vars.p)
        .set(1, 1, Expr::identity(q, gamma * gamma))
        .set(2, 0, controller_state_block(plant, g1, vars))
        .set(2, 1, vars.l_hat.clone().scale(-1.0))
        .set(2, 2, vars.p)
        .set(3, 0, g1.clone())
        .set(3, 3, Mat::identity(m, m)))
}

/// `[[P, P̄13], [P̄13ᵀ, P]] ≻ 0`: the controller matrix `Ā_c` is Schur stable.
pub fn strong_stabilizability_lmi(plant: &StateSpace, g1: &Mat, vars: &ObserverVars) -> Result<BlockLmi> {
    check_gain(plant, g1)?;
    let n = plant.n();
    Ok(BlockLmi::new("controller-stability", &[n, n])
        .set(0, 0, vars.p)
        .set(1, 0, controller_state_block(plant, g1, vars))
        .set(1, 1, vars.p))
}

/// Bounded-real LMI of the closed loop from the actuator noise `w` to `y_p`
/// with block-diagonal storage `diag(Q, P)`.
pub fn closed_loop_hinf_lmi(
    plant: &StateSpace,
    g1: &Mat,
    gamma_bar: f64,
    vars: &ObserverVars,
    q_var: Var,
) -> Result<BlockLmi> {
    check_gain(plant, g1)?;
    if !(gamma_bar > 0.0) {
        return Err(Error::invalid(format!("γ̄ must be positive, got {gamma_bar}")));
    }
    let (n, m, q) = (plant.n(), plant.m(), plant.q());
    let (a, b, c, d) = (plant.a(), plant.b(), plant.c(), plant.d());
    let p25 = Expr::var(vars.p)
        .rmul(&(a + b * g1))
        .plus(vars.l_hat.clone().rmul(c));
    Ok(BlockLmi::new("closed-loop-hinf", &[n, n, m, n, n, q])
        .set(0, 0, q_var)
        .set(1, 1, vars.p)
        .set(2, 2, Expr::identity(m, gamma_bar * gamma_bar))
        .set(3, 0, Expr::var(q_var).rmul(a))
        .set(3, 1, Expr::var(q_var).rmul(&(b * g1)))
        .set(3, 2, Expr::var(q_var).rmul(b))
        .set(3, 3, q_var)
        .set(4, 0, vars.l_hat.clone().rmul(c).scale(-1.0))
        .set(4, 1, p25)
        .set(4, 2, vars.l_hat.clone().rmul(d).scale(-1.0))
        .set(4, 4, vars.p)
        .set(5, 0, c.clone())
        .set(5, 1, d * g1)
        .set(5, 2, d.clone())
        .set(5, 5, Mat::identity(q, q)))
}

/// Closed loop from actuator noise `w` (added to `u_p`) to `y_p` over the
/// states `(x_p, x̄_c)`; the exosystem drops out of this channel.
pub fn closed_loop_noise_channel(plant: &StateSpace, g1: &Mat, l1: &Mat) -> Result<StateSpace> {
    let (a, b, c, d) = (plant.a(), plant.b(), plant.c(), plant.d());
    let bg = b * g1;
    let top = linalg::hstack(&[a, &bg]);
    let bottom = linalg::hstack(&[&(-(l1 * c)), &(a + &bg + l1 * c)]);
    StateSpace::new(
        linalg::vstack(&[&top, &bottom]),
        linalg::vstack(&[b, &(-(l1 * d))]),
        linalg::hstack(&[c, &(d * g1)]),
        d.clone(),
    )
}

/// Which observer gain the feasibility run searches over.
#[derive(Debug, Clone)]
pub enum ObserverGain {
    Free,
    Fixed(Mat),
}

#[derive(Debug, Clone)]
pub struct LemmaConfig {
    /// Controller H∞ level; `None` replaces the bounded-real LMI by the
    /// plain controller-stability LMI.
    pub gamma: Option<f64>,
    pub gamma_bar: Option<f64>,
    /// Required observer decay rate `ρ ≤ 1`.
    pub observer_decay: f64,
    pub observer: ObserverGain,
}

impl LemmaConfig {
    pub fn at_gamma(gamma: f64) -> Self {
        Self {
            gamma: Some(gamma),
            gamma_bar: None,
            observer_decay: 1.0,
            observer: ObserverGain::Free,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LemmaOutcome {
    pub solution: SdpSolution,
    /// `L1 = P⁻¹ L̂1` when feasible (or the fixed gain).
    #[serde(with = "opt_rows")]
    pub l1: Option<Mat>,
}

mod opt_rows {
    use crate::linalg::{mat_to_rows, Mat};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(m: &Option<Mat>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match m {
            Some(m) => s.serialize_some(&mat_to_rows(m)),
            None => s.serialize_none(),
        }
    }
}

impl LemmaOutcome {
    pub fn is_feasible(&self) -> bool {
        self.solution.is_feasible()
    }
}

/// Assembles the requested LMIs over `P`, `L̂1` (and `Q` for the closed loop).
pub fn lemma_problem(plant: &StateSpace, g1: &Mat, cfg: &LemmaConfig) -> Result<(LmiProblem, ObserverVars)> {
    let mut prob = LmiProblem::new();
    let vars = match &cfg.observer {
        ObserverGain::Free => ObserverVars::free(&mut prob, plant)?,
        ObserverGain::Fixed(l1) => ObserverVars::fixed_gain(&mut prob, plant, l1)?,
    };
    prob.constrain(observer_lmi(plant, g1, &vars, cfg.observer_decay)?);
    match cfg.gamma {
        Some(g) => prob.constrain(controller_hinf_lmi(plant, g1, g, &vars)?),
        None => prob.constrain(strong_stabilizability_lmi(plant, g1, &vars)?),
    }
    if let Some(gb) = cfg.gamma_bar {
        let q = prob.symmetric("Q", plant.n())?;
        prob.constrain(closed_loop_hinf_lmi(plant, g1, gb, &vars, q)?);
    }
    Ok((prob, vars))
}

/// Solves the assembled LMIs and recovers `L1`.
pub fn solve_lemma(plant: &StateSpace, g1: &Mat, cfg: &LemmaConfig, opts: &SdpOptions) -> Result<LemmaOutcome> {
    let (prob, vars) = lemma_problem(plant, g1, cfg)?;
    let solution = sdp_feasible(&prob, opts);
    let l1 = match (&cfg.observer, solution.status) {
        (ObserverGain::Fixed(l1), _) => Some(l1.clone()),
        (ObserverGain::Free, SdpStatus::Feasible) => {
            let p = solution.get("P").expect("P is always a variable");
            let l_hat = solution.get("L_hat").expect("free observer gain");
            let chol = p
                .clone()
                .cholesky()
                .ok_or_else(|| Error::Numerical("certified P is not positive definite".into()))?;
            Some(chol.solve(l_hat))
        }
        _ => None,
    };
    debug_assert!(vars.is_free() == matches!(cfg.observer, ObserverGain::Free));
    Ok(LemmaOutcome { solution, l1 })
}

/// Observer and controller-stability LMIs jointly: a stable controller with
/// some finite H∞ level exists for this `G1`.
pub fn strong_stabilizability(plant: &StateSpace, g1: &Mat) -> Result<LemmaOutcome> {
    let cfg = LemmaConfig {
        gamma: None,
        gamma_bar: None,
        observer_decay: 1.0,
        observer: ObserverGain::Free,
    };
    solve_lemma(plant, g1, &cfg, &SdpOptions::default())
}

/// Smallest `γ` in `bracket` for which the observer and controller H∞ LMIs
/// are jointly feasible, by bisection to relative width `rel_tol`.
pub fn min_feasible_gamma(plant: &StateSpace, g1: &Mat, bracket: (f64, f64), rel_tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = bracket;
    if !(hi > lo && lo >= 0.0) {
        return Err(Error::invalid(format!("bad γ bracket [{lo}, {hi}]")));
    }
    let opts = SdpOptions::early_exit();
    let feasible = |g: f64| -> Result<bool> { Ok(solve_lemma(plant, g1, &LemmaConfig::at_gamma(g), &opts)?.is_feasible()) };
    if !feasible(hi)? {
        return Err(Error::Infeasible {
            reason: format!("controller H∞ LMIs infeasible at the bracket top γ = {hi}"),
            lower_bound: Some(hi),
        });
    }
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        if feasible(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hinf_sdp::norm::hinf_norm;

    fn scalar_plant() -> StateSpace {
        StateSpace::scalar(0.5, 1.0, 1.0, 0.0)
    }

    #[test]
    fn scalar_observer_deadbeat() {
        // P = 1, L̂1 = −0.5 gives the block [[1, 0], [0, 1]]
        let plant = scalar_plant();
        let g1 = Mat::from_element(1, 1, 0.0);
        let mut prob = LmiProblem::new();
        let vars = ObserverVars::fixed_gain(&mut prob, &plant, &Mat::from_element(1, 1, -0.5)).unwrap();
        let lmi = observer_lmi(&plant, &g1, &vars, 1.0).unwrap();
        let val = lmi.evaluate(prob.variables(), &[1.0]);
        assert!((val - Mat::identity(2, 2)).amax() < 1e-15);
    }

    #[test]
    fn destabilizing_gain_rejected() {
        let plant = scalar_plant();
        let mut prob = LmiProblem::new();
        let vars = ObserverVars::free(&mut prob, &plant).unwrap();
        assert!(matches!(
            observer_lmi(&plant, &Mat::from_element(1, 1, 1.0), &vars, 1.0),
            Err(Error::Unstable(_))
        ));
    }

    #[test]
    fn undetectable_unstable_pair_infeasible() {
        let plant = StateSpace::scalar(1.5, 1.0, 0.0, 0.0);
        let g1 = Mat::from_element(1, 1, -1.0);
        let out = strong_stabilizability(&plant, &g1).unwrap();
        assert_ne!(out.solution.status, SdpStatus::Feasible);
    }

    #[test]
    fn zero_gain_on_stable_plant_is_strongly_stabilizable() {
        let plant = scalar_plant();
        let out = strong_stabilizability(&plant, &Mat::from_element(1, 1, 0.0)).unwrap();
        assert!(out.is_feasible());
    }

    #[test]
    fn designed_gain_meets_bound() {
        let plant = StateSpace::scalar(0.9, 1.0, 1.0, 0.0);
        let g1 = Mat::from_element(1, 1, -0.5);
        let gamma = 0.6;
        let out = solve_lemma(&plant, &g1, &LemmaConfig::at_gamma(gamma), &SdpOptions::default()).unwrap();
        assert!(out.is_feasible());
        let l1 = out.l1.unwrap();
        let ac = plant.a() + plant.b() * &g1 + &l1 * (plant.c() + plant.d() * &g1);
        let ctrl = StateSpace::new(ac, -&l1, g1.clone(), Mat::zeros(1, 1)).unwrap();
        assert!(hinf_norm(&ctrl, 1e-6).unwrap() <= gamma * (1.0 + 1e-6));
        assert!(linalg::spectral_radius(&(plant.a() + &l1 * plant.c())) < 1.0);
    }

    #[test]
    fn min_gamma_brackets_grid_scan() {
        let plant = StateSpace::scalar(0.9, 1.0, 1.0, 0.0);
        let g1 = Mat::from_element(1, 1, -0.5);
        let gstar = min_feasible_gamma(&plant, &g1, (1e-4, 2.0), 1e-3).unwrap();
        let opts = SdpOptions::early_exit();
        let at = |g: f64| solve_lemma(&plant, &g1, &LemmaConfig::at_gamma(g), &opts).unwrap().is_feasible();
        assert!(at(gstar * 1.01));
        assert!(!at(gstar * 0.99));
    }

    #[test]
    fn tiny_gamma_bracket_errors() {
        let plant = StateSpace::scalar(0.9, 1.0, 1.0, 0.0);
        let g1 = Mat::from_element(1, 1, -0.5);
        assert!(matches!(
            min_feasible_gamma(&plant, &g1, (1e-8, 1e-6), 1e-3),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn noise_channel_separation_spectrum() {
        let plant = StateSpace::scalar(0.9, 1.0, 1.0, 0.0);
        let g1 = Mat::from_element(1, 1, -0.5);
        let l1 = Mat::from_element(1, 1, -0.7);
        let cl = closed_loop_noise_channel(&plant, &g1, &l1).unwrap();
        let mut eig: Vec<f64> = linalg::eigenvalues(cl.a()).iter().map(|z| z.re).collect();
        eig.sort_by(f64::total_cmp);
        assert!((eig[0] - 0.2).abs() < 1e-12 && (eig[1] - 0.4).abs() < 1e-12);
    }
}
