//! H∞ norms of discrete-time systems and a semidefinite feasibility layer
//! for the controller-design LMIs.

mod design;
mod lmi;
mod norm;
mod solver;

pub use design::{
    closed_loop_hinf_lmi, closed_loop_noise_channel, controller_hinf_lmi, lemma_problem, min_feasible_gamma,
    observer_lmi, solve_lemma, strong_stabilizability, strong_stabilizability_lmi, LemmaConfig, LemmaOutcome,
    ObserverGain, ObserverVars,
};
pub use lmi::{BlockLmi, Expr, LmiProblem, Objective, Var, VarKind, VariableInfo};
pub use norm::{
    bounded_real_feasible, bounded_real_problem, hinf_norm, hinf_norm_lmi, hinf_norm_sweep, hinf_report, HinfReport,
    DEFAULT_TOL,
};
pub use solver::{sdp_feasible, SdpOptions, SdpSolution, SdpStatus};
