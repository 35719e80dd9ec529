//! Bounded-cost-safe LQR dual control.
//!
//! A stable linear plant `x_{k+1} = A x_k + B u_k + w_k` with unknown
//! `(A, B)` is controlled and identified at once: exploration noise decaying
//! as `(k+1)^{-β}` feeds a cross-correlation estimate of the Markov
//! parameters `A^τ B`, the model is rebuilt from them by virtual rollouts,
//! and the certainty-equivalent LQR gain is applied through a switching
//! policy that withholds feedback whenever the gain or the state is large.

pub mod algebra;
pub mod dual;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod markov;
pub mod policy;
pub mod reconstruct;
pub mod rng;
pub mod system;
pub mod trajectory;

pub use algebra::{
    lyap_norm_bound, policy_cost, pseudo_inverse, riccati_sensitivity_bound, sensitivity_weight, solve_dare,
    solve_dlyap, spectral_radius, GainSolution, Matrix, Vector,
};
pub use dual::{
    run_certainty_equivalence, run_safe, update_gain, ControllerState, DualControlConfig, GainSchedule, PolicyKind,
    RunOutput, RunSummary,
};
pub use error::{Error, Result};
pub use evaluation::bounds::{
    escape_bound, fourth_moment_bound, noise_accumulation, switching_gap_bound, BoundCertificate,
    LyapunovCertificate,
};
pub use evaluation::cost::{empirical_cost, noisy_policy_cost, CostReport, EmpiricalCost};
pub use evaluation::oscillation::{oscillation_demo, OscillationConfig, OscillationTrace};
pub use evaluation::rate::{fit_power_law, PowerLawFit};
pub use evaluation::validate::{validate_bounds, ValidationConfig, ValidationReport};
pub use markov::{direct_estimate, History, MarkovEstimator};
pub use policy::{
    safe_policy_step, warmup_input, ExplorationRate, LinearPolicy, Policy, PolicyDecision, PolicyState, SafePolicy,
    SwitchingPolicy,
};
pub use reconstruct::{block_toeplitz, reconstruct, ProbeBattery, Reconstruction};
pub use system::{random_stable_system, sample_gaussian, true_markov, GaussianSampler, LinearSystem};
pub use trajectory::{simulate, Snapshot, StepRecord, TrajectoryRecord};
