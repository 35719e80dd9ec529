//! Monte-Carlo validation of the closed-form bounds.
//!
//! Each check reports the formula value, the empirical counterpart and a
//! status. Checks whose preconditions fail are reported as `invalid`
//! rather than failing the suite; Monte-Carlo comparisons are skipped when
//! the requested sample size is below their default.

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::algebra::{
    closed_loop_value, lyap_norm_bound, policy_cost, riccati_sensitivity_bound, sensitivity_weight, solve_dare,
    solve_dlyap, Matrix, Vector,
};
use crate::error::Result;
use crate::evaluation::bounds::{escape_bound, fourth_moment_bound, switching_gap_bound, BoundCertificate};
use crate::evaluation::cost::empirical_cost;
use crate::policy::{LinearPolicy, Policy, PolicyState, SwitchingPolicy};
use crate::rng::{mix_seed, rng_from};
use crate::system::{random_stable_system, GaussianSampler, LinearSystem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
    Invalid,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub status: Status,
    pub formula_value: Option<f64>,
    pub empirical_value: Option<f64>,
    pub samples: usize,
    pub message: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, pass: bool, formula: Option<f64>, empirical: Option<f64>, samples: usize) -> Self {
        Self {
            name: name.into(),
            status: if pass { Status::Pass } else { Status::Fail },
            formula_value: formula,
            empirical_value: empirical,
            samples,
            message: String::new(),
        }
    }

    fn with_message(mut self, message: impl Into<String>) -> Self {
        self.message = message.into();
        self
    }

    fn skipped(name: impl Into<String>, samples: usize, default: usize) -> Self {
        Self {
            name: name.into(),
            status: Status::Skipped,
            formula_value: None,
            empirical_value: None,
            samples,
            message: format!("reduced fidelity: {samples} samples requested, comparison needs {default}"),
        }
    }

    fn invalid(name: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            status: Status::Invalid,
            formula_value: None,
            empirical_value: None,
            samples: 0,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub reduced: bool,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    /// No check failed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn count(&self, status: Status) -> usize {
        self.checks.iter().filter(|c| c.status == status).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub seed: u64,
    /// Replicate count for the escape and fourth-moment comparisons; below
    /// their defaults every Monte-Carlo comparison is skipped.
    pub samples: Option<usize>,
    pub escape_thresholds: Vec<f64>,
    pub escape_step: usize,
    pub escape_replicates: usize,
    pub moment_threshold: f64,
    pub moment_hold: usize,
    pub moment_step: usize,
    pub moment_replicates: usize,
    pub gap_threshold: f64,
    pub gap_hold: usize,
    pub gap_horizon: usize,
    pub gap_rollouts: usize,
    pub sensitivity_deltas: Vec<f64>,
    pub lyapunov_systems: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            samples: None,
            escape_thresholds: vec![6.0, 8.0, 10.0],
            escape_step: 200,
            escape_replicates: 100_000,
            moment_threshold: 5.0,
            moment_hold: 3,
            moment_step: 500,
            moment_replicates: 10_000,
            gap_threshold: 6.0,
            gap_hold: 3,
            gap_horizon: 100_000,
            gap_rollouts: 20,
            sensitivity_deltas: vec![1e-1, 1e-2, 1e-3],
            lyapunov_systems: 20,
        }
    }
}

impl ValidationConfig {
    /// Sample size for a check with the given default, or `None` to skip.
    fn samples_for(&self, default: usize) -> Option<usize> {
        if self.reduced() {
            None
        } else {
            Some(self.samples.unwrap_or(default))
        }
    }

    pub fn reduced(&self) -> bool {
        self.samples
            .is_some_and(|s| s < self.escape_replicates.min(self.moment_replicates))
    }
}

/// Scalar plant `x⁺ = 0.5x + u + w`, `W = 1`.
pub fn scalar_system() -> LinearSystem {
    LinearSystem::scalar(0.5, 1.0, 1.0, 1.0, 1.0).expect("valid scalar system")
}

/// Two-state plant with `W = X₀ = 0.25 I` used by the switched-policy checks.
pub fn switching_system() -> LinearSystem {
    LinearSystem::new(
        Matrix::from_row_slice(2, 2, &[0.6, 0.2, 0.0, 0.5]),
        Matrix::from_row_slice(2, 1, &[1.0, 0.5]),
        Matrix::identity(2, 2) * 0.25,
        Matrix::identity(2, 2) * 0.25,
        Matrix::identity(2, 2),
        Matrix::identity(1, 1),
    )
    .expect("valid switching system")
}

/// `x_k` of one rollout under `policy`.
pub fn terminal_state<P: Policy>(sys: &LinearSystem, mut policy: P, steps: usize, seed: u64) -> Result<Vector> {
    let mut rng = rng_from(seed);
    let rng: &mut dyn RngCore = &mut rng;
    let noise = GaussianSampler::new(&sys.w)?;
    let n = sys.n();
    let mut x = GaussianSampler::new(&sys.x0)?.sample(rng);
    let (mut w, mut z, mut next) = (Vector::zeros(n), Vector::zeros(n), Vector::zeros(n));
    let mut state = PolicyState::IDLE;
    for k in 0..steps {
        let d = policy.decide(&x, state, k, rng);
        state = d.next;
        noise.sample_into(rng, &mut z, &mut w);
        sys.step_into(&x, &d.u, &w, &mut next);
        std::mem::swap(&mut x, &mut next);
    }
    Ok(x)
}

fn terminal_norms<P: Policy + Clone + Send + Sync>(
    sys: &LinearSystem,
    policy: &P,
    steps: usize,
    replicates: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    (0..replicates)
        .into_par_iter()
        .map(|i| terminal_state(sys, policy.clone(), steps, mix_seed(seed, i as u64, 0xE5C)).map(|x| x.norm()))
        .collect()
}

fn escape_checks(cfg: &ValidationConfig, out: &mut Vec<CheckResult>) -> Result<()> {
    let sys = scalar_system();
    let base = BoundCertificate::open_loop(&sys, 1.0, 1)?;
    let floor = base.escape_floor();
    let doubled = |m: f64| -> Result<bool> {
        Ok(escape_bound(&base.with_threshold(2.0 * m)?)? < escape_bound(&base.with_threshold(m)?)?)
    };
    out.push(
        CheckResult::new("escape/monotone", doubled(floor)? && doubled(2.0 * floor)?, None, None, 0)
            .with_message(format!("bound(2M) < bound(M) from the floor M = {floor:.4}")),
    );

    let name = |m: f64| format!("escape/monte_carlo/M={m}");
    let bounds = cfg
        .escape_thresholds
        .iter()
        .map(|&m| Ok((m, escape_bound(&base.with_threshold(m)?))))
        .collect::<Result<Vec<_>>>()?;
    let reps = cfg.samples_for(cfg.escape_replicates);
    let norms = match reps {
        Some(reps) if bounds.iter().any(|(_, b)| b.is_ok()) => {
            let zero = LinearPolicy::new(Matrix::zeros(1, 1));
            terminal_norms(&sys, &zero, cfg.escape_step, reps, cfg.seed)?
        }
        _ => Vec::new(),
    };
    for (m, bound) in bounds {
        let check = match (bound, reps) {
            // Out-of-range thresholds are reported even in reduced mode.
            (Err(e), _) => CheckResult::invalid(name(m), e.to_string()),
            (Ok(_), None) => CheckResult::skipped(name(m), cfg.samples.unwrap_or(0), cfg.escape_replicates),
            (Ok(bound), Some(reps)) => {
                let freq = norms.iter().filter(|&&v| v >= m).count() as f64 / reps as f64;
                CheckResult::new(name(m), freq <= bound, Some(bound), Some(freq), reps)
            }
        };
        out.push(check);
    }
    Ok(())
}

fn moment_checks(cfg: &ValidationConfig, out: &mut Vec<CheckResult>) -> Result<()> {
    let sys = switching_system();
    let k = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)?.k;
    let cert = match BoundCertificate::switching(&sys, &k, cfg.moment_threshold, cfg.moment_hold) {
        Ok(c) => c,
        Err(e) => {
            out.push(CheckResult::invalid("fourth_moment/monte_carlo", e.to_string()));
            return Ok(());
        }
    };
    let values: Vec<f64> = [1.0, 2.0, 4.0]
        .iter()
        .map(|&s| cert.with_threshold(s * cfg.moment_threshold).map(|c| fourth_moment_bound(&c)))
        .collect::<Result<_>>()?;
    out.push(CheckResult::new("fourth_moment/monotone", values.windows(2).all(|w| w[0] < w[1]), None, None, 0));

    let Some(reps) = cfg.samples_for(cfg.moment_replicates) else {
        out.push(CheckResult::skipped("fourth_moment/monte_carlo", cfg.samples.unwrap_or(0), cfg.moment_replicates));
        return Ok(());
    };
    let policy = SwitchingPolicy::new(k, cfg.moment_threshold, cfg.moment_hold)?;
    let norms = terminal_norms(&sys, &policy, cfg.moment_step, reps, mix_seed(cfg.seed, 4, 4))?;
    let moment = norms.iter().map(|v| v.powi(4)).sum::<f64>() / reps as f64;
    let bound = fourth_moment_bound(&cert);
    out.push(CheckResult::new("fourth_moment/monte_carlo", moment <= bound, Some(bound), Some(moment), reps));
    Ok(())
}

fn gap_checks(cfg: &ValidationConfig, out: &mut Vec<CheckResult>) -> Result<()> {
    let sys = switching_system();
    let k = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)?.k;
    let cert = match BoundCertificate::switching(&sys, &k, cfg.gap_threshold, cfg.gap_hold) {
        Ok(c) => c,
        Err(e) => {
            out.push(CheckResult::invalid("switching_gap/monte_carlo", e.to_string()));
            return Ok(());
        }
    };
    let at = |m: f64, t: usize| -> Result<_> {
        switching_gap_bound(&cert.with_threshold(m)?.with_hold(t)?, &sys, &k)
    };
    let (m, t) = (cfg.gap_threshold, cfg.gap_hold);
    let decreasing = at(m, t)?.bound > at(2.0 * m, t)?.bound && at(2.0 * m, t)?.bound > at(4.0 * m, t)?.bound;
    out.push(CheckResult::new("switching_gap/decreasing_in_M", decreasing, None, None, 0));
    let (g1, g2) = (at(m, t)?.g, at(m, 2 * t)?.g);
    out.push(CheckResult::new(
        "switching_gap/linear_in_t",
        (g2 - 2.0 * g1).abs() <= 1e-9 * g2.abs().max(f64::MIN_POSITIVE),
        Some(g2),
        Some(2.0 * g1),
        0,
    ));

    if cfg.reduced() {
        out.push(CheckResult::skipped("switching_gap/monte_carlo", cfg.samples.unwrap_or(0), cfg.gap_rollouts));
        return Ok(());
    }
    let rollouts = cfg.gap_rollouts;
    let policy = SwitchingPolicy::new(k.clone(), m, t)?;
    let emp = empirical_cost(&sys, &policy, cfg.gap_horizon, rollouts, &mut rng_from(mix_seed(cfg.seed, 5, 5)))?;
    let gap = emp.value() - policy_cost(&sys, &k)?;
    let bound = at(m, t)?.bound;
    out.push(CheckResult::new("switching_gap/monte_carlo", gap <= bound, Some(bound), Some(gap), rollouts));
    Ok(())
}

/// `‖P_K̂ − P*‖_F` against the sensitivity bound for `K̂ = K* + δE`, and the
/// ratio `‖ΔP‖/δ²` across the deltas.
fn sensitivity_checks(cfg: &ValidationConfig, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = rng_from(mix_seed(cfg.seed, 6, 6));
    let mut systems = vec![scalar_system(), switching_system()];
    systems.push(random_stable_system(3, 2, 0.9, &mut rng)?);
    for (idx, sys) in systems.iter().enumerate() {
        let sol = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)?;
        let weight = sensitivity_weight(&sys.b, &sys.r, &sol.p);
        let dir = Matrix::from_fn(sys.p(), sys.n(), |i, j| if (i + j) % 2 == 0 { 1.0 } else { -0.5 });
        let dir = &dir / dir.norm();
        let mut ratios = Vec::new();
        for &delta in &cfg.sensitivity_deltas {
            let dk = &dir * delta;
            let k_hat = &sol.k + &dk;
            let name = format!("riccati_sensitivity/system{idx}/delta={delta}");
            let actual = match closed_loop_value(sys, &k_hat) {
                Ok(p_hat) => (&p_hat - &sol.p).norm(),
                Err(e) => {
                    out.push(CheckResult::invalid(name, e.to_string()));
                    continue;
                }
            };
            let bound = riccati_sensitivity_bound(&sys.closed_loop(&k_hat), &weight, &dk)?;
            ratios.push(actual / (delta * delta));
            // ΔP is a difference of two solved matrices; allow for their rounding
            let slack = 1e-12 * sol.p.norm();
            out.push(CheckResult::new(name, actual <= bound + slack, Some(bound), Some(actual), 0));
        }
        if ratios.len() >= 2 {
            let hi = ratios.iter().cloned().fold(f64::MIN, f64::max);
            let lo = ratios.iter().cloned().fold(f64::MAX, f64::min);
            out.push(
                CheckResult::new(format!("riccati_sensitivity/system{idx}/quadratic_ratio"), hi <= 2.0 * lo, None, Some(hi / lo), 0)
                    .with_message("max/min of ‖ΔP‖/δ² across deltas"),
            );
        }
    }
    Ok(())
}

fn lyapunov_checks(cfg: &ValidationConfig, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = rng_from(mix_seed(cfg.seed, 7, 7));
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for i in 0..cfg.lyapunov_systems {
        let n = 2 + i % 4;
        let sys = random_stable_system(n, 1, 0.5 + 0.45 * (i as f64 / cfg.lyapunov_systems.max(1) as f64), &mut rng)?;
        let qm = Matrix::identity(n, n);
        let x = solve_dlyap(&sys.a, &qm)?;
        let bound = lyap_norm_bound(&sys.a, &qm)?;
        let ratio = x.norm() / bound;
        worst = worst.max(ratio);
        ok &= ratio <= 1.0 + 1e-9;
    }
    out.push(
        CheckResult::new("lyapunov_norm_bound", ok, Some(1.0), Some(worst), cfg.lyapunov_systems)
            .with_message("largest ‖X‖_F / bound over random systems"),
    );
    Ok(())
}

pub fn validate_bounds(cfg: &ValidationConfig) -> Result<ValidationReport> {
    let mut checks = Vec::new();
    escape_checks(cfg, &mut checks)?;
    moment_checks(cfg, &mut checks)?;
    gap_checks(cfg, &mut checks)?;
    sensitivity_checks(cfg, &mut checks)?;
    lyapunov_checks(cfg, &mut checks)?;
    Ok(ValidationReport {
        reduced: cfg.reduced(),
        checks,
    })
}
