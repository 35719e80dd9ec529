//! Control policies: the safe switching policy, warm-up inputs and plain
//! linear feedback.
//!
//! Every policy carries an internal [`PolicyState`] (the non-action counter)
//! that is passed in and returned by value. Exploration draws come from the
//! generator supplied by the caller, one `p`-dimensional standard normal per
//! decision, so two runs with the same stream see the same `ζ_k`.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::algebra::{spectral_norm, Matrix, Vector};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PolicyState {
    /// Remaining non-action steps.
    pub safe_steps: usize,
}

impl PolicyState {
    pub const IDLE: PolicyState = PolicyState { safe_steps: 0 };
}

/// One policy evaluation: `u = ũ + scale·ζ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDecision {
    pub u: Vector,
    /// Exploitation input, either `K x` or zero.
    pub u_exploit: Vector,
    pub zeta: Vector,
    pub noise_scale: f64,
    pub next: PolicyState,
    /// Whether the feedback term was applied.
    pub acted: bool,
}

impl PolicyDecision {
    fn assemble(u_exploit: Vector, zeta: Vector, noise_scale: f64, next: PolicyState, acted: bool) -> Self {
        let u = &u_exploit + &zeta * noise_scale;
        Self {
            u,
            u_exploit,
            zeta,
            noise_scale,
            next,
            acted,
        }
    }
}

/// Exploration decay exponent β in `(k+1)^{-β} ζ_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExplorationRate(f64);

impl ExplorationRate {
    /// β in the open interval (0, 1/2), where the convergence guarantees hold.
    pub fn new(beta: f64) -> Result<Self> {
        if beta > 0.0 && beta < 0.5 {
            Ok(Self(beta))
        } else {
            Err(invalid(format!("beta must lie in (0, 1/2), got {beta}")))
        }
    }

    /// β in the closed interval [0, 1/2], for sweeps that include the endpoints.
    pub fn sweep(beta: f64) -> Result<Self> {
        if (0.0..=0.5).contains(&beta) {
            Ok(Self(beta))
        } else {
            Err(invalid(format!("beta must lie in [0, 1/2], got {beta}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// `(k+1)^{-β}`.
    pub fn scale(self, k: usize) -> f64 {
        ((k + 1) as f64).powf(-self.0)
    }
}

pub(crate) fn draw_zeta(rng: &mut (impl Rng + ?Sized), p: usize) -> Vector {
    Vector::from_fn(p, |_, _| rng.sample(StandardNormal))
}

/// Length of the non-action period started by a trigger at step `k`,
/// `max(⌊ln k⌋ + 1, 1)`.
pub fn non_action_length(k: usize) -> usize {
    let k = k.max(1) as f64;
    (k.ln().floor() as usize + 1).max(1)
}

/// Switching threshold `ln k`.
pub fn switching_threshold(k: usize) -> f64 {
    (k.max(1) as f64).ln()
}

/// The threshold rule: while the counter runs the feedback is withheld; a
/// fresh trigger withholds it for `hold` steps including the current one.
fn switch(state: PolicyState, gain_norm: f64, x_norm: f64, threshold: f64, hold: usize) -> (bool, PolicyState) {
    if state.safe_steps > 0 {
        (false, PolicyState { safe_steps: state.safe_steps - 1 })
    } else if gain_norm.max(x_norm) >= threshold {
        (false, PolicyState { safe_steps: hold.max(1) - 1 })
    } else {
        (true, PolicyState::IDLE)
    }
}

/// One step of the safe policy at step `k ≥ 1` with gain `K`.
pub fn safe_policy_step<R: Rng + ?Sized>(
    x: &Vector,
    state: PolicyState,
    k: usize,
    gain: &Matrix,
    beta: ExplorationRate,
    rng: &mut R,
) -> Result<PolicyDecision> {
    if k == 0 {
        return Err(invalid("safe policy steps start at k = 1"));
    }
    if gain.ncols() != x.len() {
        return Err(invalid(format!(
            "gain has {} columns but the state has length {}",
            gain.ncols(),
            x.len()
        )));
    }
    let gain_norm = spectral_norm(gain);
    Ok(safe_decision(x, state, k, gain, gain_norm, beta, rng))
}

pub(crate) fn safe_decision<R: Rng + ?Sized>(
    x: &Vector,
    state: PolicyState,
    k: usize,
    gain: &Matrix,
    gain_norm: f64,
    beta: ExplorationRate,
    rng: &mut R,
) -> PolicyDecision {
    let (acted, next) = switch(state, gain_norm, x.norm(), switching_threshold(k), non_action_length(k));
    let u_exploit = if acted { gain * x } else { Vector::zeros(gain.nrows()) };
    let zeta = draw_zeta(rng, gain.nrows());
    PolicyDecision::assemble(u_exploit, zeta, beta.scale(k), next, acted)
}

/// Pure exploration input `(k+1)^{-β} ζ` used during warm-up.
pub fn warmup_input<R: Rng + ?Sized>(k: usize, p: usize, beta: ExplorationRate, rng: &mut R) -> PolicyDecision {
    let zeta = draw_zeta(rng, p);
    PolicyDecision::assemble(Vector::zeros(p), zeta, beta.scale(k), PolicyState::IDLE, false)
}

/// A stateful policy `(u_k, ξ_{k+1}) = π(x_k, ξ_k)` evaluated at step `k`.
pub trait Policy {
    fn input_dim(&self) -> usize;

    fn decide(&mut self, x: &Vector, state: PolicyState, k: usize, rng: &mut dyn RngCore) -> PolicyDecision;
}

/// The safe switching policy with a fixed gain, threshold `ln k` and
/// non-action period `⌊ln k⌋ + 1`.
#[derive(Debug, Clone)]
pub struct SafePolicy {
    gain: Matrix,
    gain_norm: f64,
    beta: ExplorationRate,
}

impl SafePolicy {
    pub fn new(gain: Matrix, beta: ExplorationRate) -> Self {
        let gain_norm = spectral_norm(&gain);
        Self { gain, gain_norm, beta }
    }

    pub fn gain(&self) -> &Matrix {
        &self.gain
    }

    pub fn gain_norm(&self) -> f64 {
        self.gain_norm
    }

    pub fn set_gain(&mut self, gain: Matrix) {
        self.gain_norm = spectral_norm(&gain);
        self.gain = gain;
    }
}

impl Policy for SafePolicy {
    fn input_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn decide(&mut self, x: &Vector, state: PolicyState, k: usize, rng: &mut dyn RngCore) -> PolicyDecision {
        safe_decision(x, state, k.max(1), &self.gain, self.gain_norm, self.beta, rng)
    }
}

/// Exploration noise added to a linear policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Exploration {
    None,
    /// `σ ζ_k` with constant σ.
    Constant(f64),
    /// `k^{-β} ζ_k` (with `k` clamped to at least 1), the certainty-equivalence baseline.
    Decaying(f64),
}

impl Exploration {
    pub fn scale(self, k: usize) -> f64 {
        match self {
            Exploration::None => 0.0,
            Exploration::Constant(s) => s,
            Exploration::Decaying(beta) => (k.max(1) as f64).powf(-beta),
        }
    }
}

/// `u = K x`, optionally with exploration noise.
#[derive(Debug, Clone)]
pub struct LinearPolicy {
    pub gain: Matrix,
    pub exploration: Exploration,
}

impl LinearPolicy {
    pub fn new(gain: Matrix) -> Self {
        Self {
            gain,
            exploration: Exploration::None,
        }
    }

    pub fn with_exploration(gain: Matrix, exploration: Exploration) -> Self {
        Self { gain, exploration }
    }

    pub fn input(&self, x: &Vector) -> Vector {
        &self.gain * x
    }
}

impl Policy for LinearPolicy {
    fn input_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn decide(&mut self, x: &Vector, _state: PolicyState, k: usize, rng: &mut dyn RngCore) -> PolicyDecision {
        let zeta = match self.exploration {
            Exploration::None => Vector::zeros(self.gain.nrows()),
            _ => draw_zeta(rng, self.gain.nrows()),
        };
        PolicyDecision::assemble(self.input(x), zeta, self.exploration.scale(k), PolicyState::IDLE, true)
    }
}

/// Noise-free switching policy with fixed threshold `M` and non-action
/// duration `t`: the feedback `K x` is withheld for `t` steps whenever
/// `max(‖K‖, ‖x‖) ≥ M`.
#[derive(Debug, Clone)]
pub struct SwitchingPolicy {
    gain: Matrix,
    gain_norm: f64,
    pub threshold: f64,
    pub hold: usize,
}

impl SwitchingPolicy {
    pub fn new(gain: Matrix, threshold: f64, hold: usize) -> Result<Self> {
        if hold == 0 {
            return Err(invalid("non-action duration must be at least 1"));
        }
        if !(threshold > 0.0) {
            return Err(invalid("switching threshold must be positive"));
        }
        let gain_norm = spectral_norm(&gain);
        Ok(Self {
            gain,
            gain_norm,
            threshold,
            hold,
        })
    }
}

impl Policy for SwitchingPolicy {
    fn input_dim(&self) -> usize {
        self.gain.nrows()
    }

    fn decide(&mut self, x: &Vector, state: PolicyState, _k: usize, _rng: &mut dyn RngCore) -> PolicyDecision {
        let (acted, next) = switch(state, self.gain_norm, x.norm(), self.threshold, self.hold);
        let p = self.gain.nrows();
        let u_exploit = if acted { &self.gain * x } else { Vector::zeros(p) };
        PolicyDecision::assemble(u_exploit, Vector::zeros(p), 0.0, next, acted)
    }
}
