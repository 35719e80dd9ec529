//! Closed-loop rollouts and their records.

use std::io::Write;

use rand::Rng;
use serde::{Serialize, Serializer};

use crate::algebra::{Matrix, Vector};
use crate::error::{invalid, Error, Result};
use crate::policy::{Policy, PolicyDecision, PolicyState};
use crate::system::{GaussianSampler, LinearSystem};

/// States with norm above this are treated as numerical blow-up.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

pub(crate) fn serialize_rows<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    crate::system::matrix_to_rows(m).serialize(s)
}

pub(crate) fn serialize_opt_rows<S: Serializer>(m: &Option<Matrix>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(crate::system::matrix_to_rows).serialize(s)
}

/// One recorded step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub x: Vector,
    pub u: Vector,
    pub u_exploit: Vector,
    pub zeta: Vector,
    pub noise_scale: f64,
    /// Non-action counter in effect when the input was chosen.
    pub safe_steps: usize,
    pub gain_id: usize,
}

impl StepRecord {
    pub fn new(k: usize, x: &Vector, decision: &PolicyDecision, state: PolicyState, gain_id: usize) -> Self {
        Self {
            k,
            x: x.clone(),
            u: decision.u.clone(),
            u_exploit: decision.u_exploit.clone(),
            zeta: decision.zeta.clone(),
            noise_scale: decision.noise_scale,
            safe_steps: state.safe_steps,
            gain_id,
        }
    }
}

/// Estimation state at a snapshot step.
#[derive(Debug, Clone, Serialize)]
pub struct Snapshot {
    pub k: usize,
    pub gain_id: usize,
    #[serde(rename = "A_hat", serialize_with = "serialize_opt_rows")]
    pub a_hat: Option<Matrix>,
    #[serde(rename = "B_hat", serialize_with = "serialize_opt_rows")]
    pub b_hat: Option<Matrix>,
    #[serde(rename = "K_hat", serialize_with = "serialize_rows")]
    pub gain: Matrix,
    /// Frobenius error of each `Ĥ_{k,τ}`.
    #[serde(rename = "H_err")]
    pub h_err: Vec<f64>,
    /// Spectral-norm errors; absent when no reconstruction is available.
    #[serde(rename = "A_err")]
    pub a_err: Option<f64>,
    #[serde(rename = "B_err")]
    pub b_err: Option<f64>,
    #[serde(rename = "K_err")]
    pub k_err: f64,
    /// `(J(K̂) − J*)/J*`; absent when `A + B K̂` is unstable.
    pub cost_gap: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrajectoryRecord {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl TrajectoryRecord {
    /// Writes `k,norm_x,norm_u,safesteps,gain_id`, followed by `x_0 … x_{n−1}`
    /// when `full_state` is set.
    pub fn write_csv<W: Write>(&self, out: W, full_state: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.steps.first().map_or(0, |s| s.x.len());
        let mut header: Vec<String> = ["k", "norm_x", "norm_u", "safesteps", "gain_id"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if full_state {
            header.extend((0..n).map(|i| format!("x{i}")));
        }
        w.write_record(&header)?;
        for s in &self.steps {
            let mut row = vec![
                s.k.to_string(),
                s.x.norm().to_string(),
                s.u.norm().to_string(),
                s.safe_steps.to_string(),
                s.gain_id.to_string(),
            ];
            if full_state {
                row.extend(s.x.iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rolls out `policy` for `steps` steps from `x₀ ~ 𝒩(0, X₀)`, recording
/// every step.
pub fn simulate<P: Policy + ?Sized, R: Rng>(
    sys: &LinearSystem,
    policy: &mut P,
    steps: usize,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    if steps == 0 {
        return Err(invalid("simulation needs at least one step"));
    }
    if policy.input_dim() != sys.p() {
        return Err(invalid("policy input dimension does not match the system"));
    }
    let noise = GaussianSampler::new(&sys.w)?;
    let init = GaussianSampler::new(&sys.x0)?;
    let mut x = init.sample(rng);
    let mut state = PolicyState::IDLE;
    let mut record = TrajectoryRecord {
        steps: Vec::with_capacity(steps),
        snapshots: Vec::new(),
    };
    let mut w = Vector::zeros(sys.n());
    let mut z = Vector::zeros(sys.n());
    let mut next = Vector::zeros(sys.n());
    for k in 0..steps {
        let decision = policy.decide(&x, state, k, rng);
        record.steps.push(StepRecord::new(k, &x, &decision, state, 0));
        state = decision.next;
        noise.sample_into(rng, &mut z, &mut w);
        sys.step_into(&x, &decision.u, &w, &mut next);
        std::mem::swap(&mut x, &mut next);
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD {
            return Err(Error::Diverged { step: k + 1, norm });
        }
    }
    Ok(record)
}
