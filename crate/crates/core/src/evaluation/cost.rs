//! Analytic and empirical policy costs.

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::algebra::{policy_cost, closed_loop_value, Matrix, Vector};
use crate::error::{invalid, Result};
use crate::policy::{Policy, PolicyState};
use crate::rng::rng_from;
use crate::system::{GaussianSampler, LinearSystem};
use crate::trajectory::DIVERGENCE_THRESHOLD;

/// Default rollout length and count.
pub const DEFAULT_HORIZON: usize = 10_000;
pub const DEFAULT_ROLLOUTS: usize = 10;

/// Average per-step cost, or a divergence marker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EmpiricalCost {
    Finite(f64),
    Diverged { rollout: usize, step: usize },
}

impl EmpiricalCost {
    /// The cost, with divergence mapped to `+∞`.
    pub fn value(self) -> f64 {
        match self {
            EmpiricalCost::Finite(v) => v,
            EmpiricalCost::Diverged { .. } => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, EmpiricalCost::Finite(_))
    }
}

/// Serialized as a number, or the string `"inf"`.
impl Serialize for EmpiricalCost {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EmpiricalCost::Finite(v) => s.serialize_f64(*v),
            EmpiricalCost::Diverged { .. } => s.serialize_str("inf"),
        }
    }
}

fn rollout<P: Policy>(
    sys: &LinearSystem,
    mut policy: P,
    horizon: usize,
    noise: &GaussianSampler,
    init: &GaussianSampler,
    seed: u64,
) -> std::result::Result<f64, usize> {
    let mut rng = rng_from(seed);
    let rng: &mut dyn RngCore = &mut rng;
    let n = sys.n();
    let mut x = init.sample(rng);
    let (mut w, mut z, mut next) = (Vector::zeros(n), Vector::zeros(n), Vector::zeros(n));
    let mut state = PolicyState::IDLE;
    let mut total = 0.0;
    for k in 0..horizon {
        let d = policy.decide(&x, state, k, rng);
        total += x.dot(&(&sys.q * &x)) + d.u.dot(&(&sys.r * &d.u));
        state = d.next;
        noise.sample_into(rng, &mut z, &mut w);
        sys.step_into(&x, &d.u, &w, &mut next);
        std::mem::swap(&mut x, &mut next);
        let norm = x.norm();
        if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD {
            return Err(k + 1);
        }
    }
    Ok(total / horizon as f64)
}

/// `(1/N)(1/T) Σ_i Σ_t (x_tᵀQx_t + u_tᵀRu_t)` over `N` independent rollouts
/// of length `T`, each starting from a fresh copy of `policy`.
///
/// Rollouts run in parallel on seeds drawn from `rng`, so the result does
/// not depend on the thread count.
pub fn empirical_cost<P, R>(
    sys: &LinearSystem,
    policy: &P,
    horizon: usize,
    rollouts: usize,
    rng: &mut R,
) -> Result<EmpiricalCost>
where
    P: Policy + Clone + Send + Sync,
    R: Rng + ?Sized,
{
    if horizon == 0 || rollouts == 0 {
        return Err(invalid("empirical cost needs T >= 1 and N >= 1"));
    }
    if policy.input_dim() != sys.p() {
        return Err(invalid("policy input dimension does not match the system"));
    }
    let noise = GaussianSampler::new(&sys.w)?;
    let init = GaussianSampler::new(&sys.x0)?;
    let seeds: Vec<u64> = (0..rollouts).map(|_| rng.next_u64()).collect();
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| rollout(sys, policy.clone(), horizon, &noise, &init, seed))
        .collect();
    let mut sum = 0.0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => sum += v,
            Err(step) => return Ok(EmpiricalCost::Diverged { rollout: i, step }),
        }
    }
    Ok(EmpiricalCost::Finite(sum / rollouts as f64))
}

/// Cost of `u = Kx + σζ`: `Tr((W + σ²BBᵀ)P_K) + σ²Tr(R)`.
pub fn noisy_policy_cost(sys: &LinearSystem, k: &Matrix, sigma2: f64) -> Result<f64> {
    if !(sigma2 >= 0.0) {
        return Err(invalid("noise variance must be nonnegative"));
    }
    let pk = closed_loop_value(sys, k)?;
    let forcing = &sys.w + &sys.b * sys.b.transpose() * sigma2;
    Ok((forcing * pk).trace() + sigma2 * sys.r.trace())
}

#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub j_analytic: f64,
    pub j_empirical: EmpiricalCost,
    pub j_star: f64,
    /// `J_analytic − J*`.
    pub gap_analytic: f64,
    /// `Ĵ − J_analytic`.
    pub gap_empirical: f64,
    pub horizon: usize,
    pub rollouts: usize,
}

impl CostReport {
    pub fn relative_error(&self) -> f64 {
        (self.j_empirical.value() - self.j_analytic).abs() / self.j_analytic
    }
}

/// Compares the analytic and empirical cost of the noise-free `u = Kx`.
pub fn cost_report<R: Rng + ?Sized>(
    sys: &LinearSystem,
    k: &Matrix,
    j_star: f64,
    horizon: usize,
    rollouts: usize,
    rng: &mut R,
) -> Result<CostReport> {
    let j_analytic = policy_cost(sys, k)?;
    let policy = crate::policy::LinearPolicy::new(k.clone());
    let j_empirical = empirical_cost(sys, &policy, horizon, rollouts, rng)?;
    Ok(CostReport {
        j_analytic,
        j_empirical,
        j_star,
        gap_analytic: j_analytic - j_star,
        gap_empirical: j_empirical.value() - j_analytic,
        horizon,
        rollouts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::solve_dare;
    use crate::policy::{Exploration, LinearPolicy};

    #[test]
    fn deterministic_zero_system_costs_nothing() {
        let mut sys = LinearSystem::scalar(0.5, 1.0, 0.0, 1.0, 1.0).unwrap();
        sys.x0 = Matrix::zeros(1, 1);
        let c = empirical_cost(&sys, &LinearPolicy::new(Matrix::zeros(1, 1)), 100, 3, &mut rng_from(1)).unwrap();
        assert_eq!(c, EmpiricalCost::Finite(0.0));
    }

    #[test]
    fn scalar_optimal_cost() {
        let sys = LinearSystem::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let k = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r).unwrap().k;
        let c = empirical_cost(&sys, &LinearPolicy::new(k), 100_000, 10, &mut rng_from(2)).unwrap();
        assert!((c.value() - 1.1327822).abs() / 1.1327822 < 0.05);
    }

    #[test]
    fn exploration_noise_adds_its_closed_form() {
        let sys = LinearSystem::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let k = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r).unwrap().k;
        let sigma = 1.0;
        let quiet = empirical_cost(&sys, &LinearPolicy::new(k.clone()), 100_000, 10, &mut rng_from(3)).unwrap();
        let noisy_policy = LinearPolicy::with_exploration(k.clone(), Exploration::Constant(sigma));
        let noisy = empirical_cost(&sys, &noisy_policy, 100_000, 10, &mut rng_from(4)).unwrap();
        let pk = closed_loop_value(&sys, &k).unwrap();
        let predicted = sigma * sigma * (sys.r.trace() + (sys.b.transpose() * &pk * &sys.b).trace());
        let measured = noisy.value() - quiet.value();
        assert!((measured - predicted).abs() / predicted < 0.1, "{measured} vs {predicted}");
        let closed = noisy_policy_cost(&sys, &k, 1.0).unwrap() - policy_cost(&sys, &k).unwrap();
        assert!((closed - predicted).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_a_marker() {
        let sys = LinearSystem::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let c = empirical_cost(&sys, &LinearPolicy::new(Matrix::from_element(1, 1, 2.0)), 1000, 2, &mut rng_from(5)).unwrap();
        assert!(matches!(c, EmpiricalCost::Diverged { rollout: 0, .. }));
        assert_eq!(serde_json::to_string(&c).unwrap(), "\"inf\"");
        assert!(c.value().is_infinite());
    }

    #[test]
    fn parallel_result_is_reproducible() {
        let sys = LinearSystem::scalar(0.5, 1.0, 1.0, 1.0, 1.0).unwrap();
        let p = LinearPolicy::new(Matrix::from_element(1, 1, -0.2));
        let a = empirical_cost(&sys, &p, 1000, 8, &mut rng_from(6)).unwrap();
        let b = empirical_cost(&sys, &p, 1000, 8, &mut rng_from(6)).unwrap();
        assert_eq!(a, b);
    }
}
