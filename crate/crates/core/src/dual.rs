//! The dual-control loop: warm-up, online Markov estimation, scheduled gain
//! synthesis from the reconstructed model, and the safe switching policy.
//! The certainty-equivalence baseline shares the loop with a plain
//! linear policy in place of the safe one.

use serde::{Deserialize, Serialize};

use crate::algebra::{policy_cost, solve_dare, spectral_norm, spectral_radius, Matrix, Vector};
use crate::error::{invalid, Error, Result};
use crate::markov::MarkovEstimator;
use crate::policy::{
    draw_zeta, safe_decision, warmup_input, Exploration, ExplorationRate, PolicyDecision, PolicyState,
};
use crate::reconstruct::{reconstruct, Reconstruction, DEFAULT_PROBES};
use crate::rng::{mix_seed, rng_from, stream, SimRng, Stream};
use crate::system::{matrix_to_rows, rows_to_matrix, true_markov, GaussianSampler, LinearSystem};
use crate::trajectory::{serialize_rows, Snapshot, StepRecord, TrajectoryRecord, DIVERGENCE_THRESHOLD};

/// Steps at which the gain is recomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GainSchedule {
    /// `⌊10^{j/2}⌋` for `j = 0, 1, 2, …`.
    #[default]
    HalfDecades,
    Explicit(Vec<usize>),
}

impl GainSchedule {
    /// Schedule points up to and including `limit`.
    pub fn points(&self, limit: usize) -> Vec<usize> {
        match self {
            GainSchedule::HalfDecades => {
                let mut out: Vec<usize> = Vec::new();
                for j in 0.. {
                    let k = 10f64.powf(j as f64 / 2.0).floor() as usize;
                    if k > limit {
                        break;
                    }
                    if out.last() != Some(&k) {
                        out.push(k);
                    }
                }
                out
            }
            GainSchedule::Explicit(points) => points.iter().copied().filter(|&k| k <= limit).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if let GainSchedule::Explicit(points) = self {
            if points.windows(2).any(|w| w[0] >= w[1]) {
                return Err(invalid("gain schedule must be strictly increasing"));
            }
        }
        Ok(())
    }
}

/// Log-spaced snapshot steps `round(10^{j/per_decade})` within
/// `[from, limit]`; every power of ten in range is included.
pub fn log_spaced(from: usize, limit: usize, per_decade: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    if per_decade == 0 || from > limit {
        return out;
    }
    for j in 0.. {
        let k = 10f64.powf(j as f64 / per_decade as f64).round() as usize;
        if k > limit {
            break;
        }
        if k >= from && out.last().is_none_or(|&last| k > last) {
            out.push(k);
        }
    }
    out
}

pub const MAX_SNAPSHOTS_PER_DECADE: usize = 128;

/// State norm reported as a large excursion.
pub const LARGE_STATE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualControlConfig {
    pub beta: f64,
    /// Admit β = 0 and β = 1/2.
    pub sweep: bool,
    pub total_steps: usize,
    pub schedule: GainSchedule,
    pub n_probes: usize,
    pub seed: u64,
    /// Record every `record_stride`-th step; 0 records none.
    pub record_stride: usize,
    /// Pure-exploration steps; defaults to `n + p`.
    pub warmup_steps: Option<usize>,
    pub snapshots_per_decade: usize,
    /// Deploy this gain throughout and skip gain updates.
    pub frozen_gain: Option<Vec<Vec<f64>>>,
}

impl Default for DualControlConfig {
    fn default() -> Self {
        Self {
            beta: 0.25,
            sweep: false,
            total_steps: 10_000,
            schedule: GainSchedule::default(),
            n_probes: DEFAULT_PROBES,
            seed: 0,
            record_stride: 1,
            warmup_steps: None,
            snapshots_per_decade: 16,
            frozen_gain: None,
        }
    }
}

impl DualControlConfig {
    pub fn rate(&self) -> Result<ExplorationRate> {
        if self.sweep {
            ExplorationRate::sweep(self.beta)
        } else {
            ExplorationRate::new(self.beta)
        }
    }

    pub fn warmup(&self, n: usize, p: usize) -> usize {
        self.warmup_steps.unwrap_or(n + p)
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        self.rate()?;
        self.schedule.validate()?;
        if self.total_steps < n + p {
            return Err(invalid(format!("total_steps must be at least n + p = {}", n + p)));
        }
        if self.n_probes == 0 {
            return Err(invalid("n_probes must be positive"));
        }
        if self.warmup(n, p) < n + p {
            return Err(invalid(format!("warm-up must last at least n + p = {} steps", n + p)));
        }
        if self.snapshots_per_decade > MAX_SNAPSHOTS_PER_DECADE {
            return Err(invalid(format!(
                "at most {MAX_SNAPSHOTS_PER_DECADE} snapshots per decade"
            )));
        }
        if let Some(rows) = &self.frozen_gain {
            rows_to_matrix(rows, p, n, "frozen gain")?;
        }
        Ok(())
    }

    fn frozen(&self, n: usize, p: usize) -> Result<Option<Matrix>> {
        self.frozen_gain
            .as_ref()
            .map(|rows| rows_to_matrix(rows, p, n, "frozen gain"))
            .transpose()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FallbackEvent {
    pub k: usize,
    pub reason: String,
}

/// Result of one gain synthesis.
#[derive(Debug, Clone)]
pub struct GainUpdate {
    pub gain: Matrix,
    pub reconstruction: Option<Reconstruction>,
    /// Why the zero gain was substituted, if it was.
    pub fallback: Option<String>,
}

/// Reconstructs the model from `h`, solves the Riccati equation for it and
/// returns the certainty-equivalent gain, or the zero gain with a reason.
pub fn update_gain(h: &[Matrix], q: &Matrix, r: &Matrix, n_probes: usize, probe_rng: &mut SimRng) -> GainUpdate {
    let p = r.nrows();
    let n = q.nrows();
    let fallback = |reconstruction, reason: String| GainUpdate {
        gain: Matrix::zeros(p, n),
        reconstruction,
        fallback: Some(reason),
    };
    let rec = match reconstruct(h, n_probes, probe_rng) {
        Ok(rec) => rec,
        Err(e) => return fallback(None, e.to_string()),
    };
    match solve_dare(&rec.a, &rec.b, q, r) {
        Ok(sol) => GainUpdate {
            gain: sol.k,
            reconstruction: Some(rec),
            fallback: None,
        },
        Err(e) => fallback(Some(rec), e.to_string()),
    }
}

/// Mutable controller state carried through the loop.
#[derive(Debug, Clone)]
pub struct ControllerState {
    pub gain: Matrix,
    pub gain_norm: f64,
    pub gain_id: usize,
    pub policy: PolicyState,
    pub estimator: MarkovEstimator,
    pub last: Option<Reconstruction>,
    pub fallbacks: Vec<FallbackEvent>,
}

impl ControllerState {
    pub fn new(n: usize, p: usize, beta: f64) -> Result<Self> {
        Ok(Self {
            gain: Matrix::zeros(p, n),
            gain_norm: 0.0,
            gain_id: 0,
            policy: PolicyState::IDLE,
            estimator: MarkovEstimator::new(n, p, n + p, beta)?,
            last: None,
            fallbacks: Vec::new(),
        })
    }

    fn set_gain(&mut self, gain: Matrix) {
        self.gain_norm = spectral_norm(&gain);
        self.gain = gain;
        self.gain_id += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Safe,
    CertaintyEquivalence,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub kind: PolicyKind,
    pub seed: u64,
    pub beta: f64,
    pub total_steps: usize,
    /// Steps completed before the run ended.
    pub steps_run: usize,
    pub diverged_at: Option<usize>,
    /// First step with `‖x_k‖ > 10⁶`.
    pub first_large_state: Option<usize>,
    pub max_state_norm: f64,
    /// Steps with `‖ũ_k‖ > (ln k)²`.
    pub exploit_bound_violations: usize,
    pub gain_updates: usize,
    pub fallback_events: Vec<FallbackEvent>,
    pub optimal_cost: f64,
    #[serde(serialize_with = "serialize_rows")]
    pub final_gain: Matrix,
    pub final_h_err: Vec<f64>,
    pub final_a_err: Option<f64>,
    pub final_b_err: Option<f64>,
    pub final_k_err: f64,
    pub final_cost_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub record: TrajectoryRecord,
}

/// Generator for the probe inputs used at step `k`.
pub fn probe_rng(seed: u64, k: usize) -> SimRng {
    rng_from(mix_seed(seed, Stream::Probes as u64, k as u64))
}

struct Reference {
    markov: Vec<Matrix>,
    a: Matrix,
    b: Matrix,
    k_star: Matrix,
    j_star: f64,
}

impl Reference {
    fn new(sys: &LinearSystem) -> Result<Self> {
        let sol = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r)?;
        Ok(Self {
            markov: true_markov(sys, sys.n() + sys.p()),
            a: sys.a.clone(),
            b: sys.b.clone(),
            j_star: (&sys.w * &sol.p).trace(),
            k_star: sol.k,
        })
    }

    fn snapshot(&self, sys: &LinearSystem, k: usize, ctrl: &ControllerState, rec: Option<&Reconstruction>) -> Snapshot {
        let h_err = ctrl
            .estimator
            .estimate_all()
            .map(|hs| hs.iter().zip(&self.markov).map(|(e, t)| (e - t).norm()).collect())
            .unwrap_or_default();
        let cost_gap = policy_cost(sys, &ctrl.gain)
            .ok()
            .map(|j| (j - self.j_star) / self.j_star);
        Snapshot {
            k,
            gain_id: ctrl.gain_id,
            a_hat: rec.map(|r| r.a.clone()),
            b_hat: rec.map(|r| r.b.clone()),
            gain: ctrl.gain.clone(),
            h_err,
            a_err: rec.map(|r| spectral_norm(&(&r.a - &self.a))),
            b_err: rec.map(|r| spectral_norm(&(&r.b - &self.b))),
            k_err: spectral_norm(&(&ctrl.gain - &self.k_star)),
            cost_gap,
        }
    }
}

/// Runs the dual-control loop with the safe policy.
///
/// A state norm above `1e12` aborts with [`Error::Diverged`].
pub fn run_safe(sys: &LinearSystem, config: &DualControlConfig) -> Result<RunOutput> {
    let out = run_loop(sys, config, PolicyKind::Safe)?;
    match out.summary.diverged_at {
        Some(step) => Err(Error::Diverged {
            step,
            norm: out.summary.max_state_norm,
        }),
        None => Ok(out),
    }
}

/// Runs the loop with the certainty-equivalence policy
/// `u = K̂ x + k^{−β} ζ`; divergence is reported in the summary.
pub fn run_certainty_equivalence(sys: &LinearSystem, config: &DualControlConfig) -> Result<RunOutput> {
    run_loop(sys, config, PolicyKind::CertaintyEquivalence)
}

fn run_loop(sys: &LinearSystem, config: &DualControlConfig, kind: PolicyKind) -> Result<RunOutput> {
    let (n, p) = (sys.n(), sys.p());
    sys.require_stable()?;
    config.validate(n, p)?;
    let rate = config.rate()?;
    let m = n + p;
    let warmup = config.warmup(n, p);
    let frozen = config.frozen(n, p)?;
    let reference = Reference::new(sys)?;

    let mut process = stream(config.seed, Stream::Process);
    let mut explore = stream(config.seed, Stream::Exploration);
    let noise = GaussianSampler::new(&sys.w)?;
    let init = GaussianSampler::new(&sys.x0)?;

    let total = config.total_steps;
    let updates = if frozen.is_some() {
        Vec::new()
    } else {
        config.schedule.points(total).into_iter().filter(|&k| k >= m).collect()
    };
    let snaps = log_spaced(m, total, config.snapshots_per_decade);
    let (mut next_update, mut next_snap) = (0, 0);

    let mut ctrl = ControllerState::new(n, p, rate.value())?;
    if let Some(gain) = frozen {
        ctrl.set_gain(gain);
    }
    let ce_noise = Exploration::Decaying(rate.value());
    let mut record = TrajectoryRecord::default();
    let mut x = init.sample(&mut process);
    let mut prev: Option<PolicyDecision> = None;
    let mut max_norm = x.norm();
    let mut violations = 0;
    let mut diverged_at = None;
    let mut first_large = None;
    let mut steps_run = 0;
    let (mut w, mut z, mut next) = (Vector::zeros(n), Vector::zeros(n), Vector::zeros(n));

    for k in 0..=total {
        if let Some(d) = &prev {
            ctrl.estimator.ingest(&x, &d.zeta, &d.u_exploit)?;
        }
        let mut fresh: Option<Reconstruction> = None;
        if updates.get(next_update) == Some(&k) {
            next_update += 1;
            let update = match ctrl.estimator.estimate_all() {
                Ok(h) => update_gain(&h, &sys.q, &sys.r, config.n_probes, &mut probe_rng(config.seed, k)),
                Err(e) => GainUpdate {
                    gain: Matrix::zeros(p, n),
                    reconstruction: None,
                    fallback: Some(e.to_string()),
                },
            };
            if let Some(reason) = update.fallback {
                ctrl.fallbacks.push(FallbackEvent { k, reason });
            }
            ctrl.set_gain(update.gain);
            fresh = update.reconstruction;
            if fresh.is_some() {
                ctrl.last.clone_from(&fresh);
            }
        }
        if snaps.get(next_snap) == Some(&k) || fresh.is_some() {
            while snaps.get(next_snap).is_some_and(|&s| s <= k) {
                next_snap += 1;
            }
            let rec = match fresh.as_ref() {
                Some(r) => Some(r.clone()),
                None => ctrl
                    .estimator
                    .estimate_all()
                    .ok()
                    .and_then(|h| reconstruct(&h, config.n_probes, &mut probe_rng(config.seed, k)).ok()),
            };
            record.snapshots.push(reference.snapshot(sys, k, &ctrl, rec.as_ref()));
        }
        if k == total {
            break;
        }

        let decision = if k < warmup {
            warmup_input(k, p, rate, &mut explore)
        } else {
            match kind {
                PolicyKind::Safe => safe_decision(&x, ctrl.policy, k, &ctrl.gain, ctrl.gain_norm, rate, &mut explore),
                PolicyKind::CertaintyEquivalence => {
                    let zeta = draw_zeta(&mut explore, p);
                    let u_exploit = &ctrl.gain * &x;
                    let scale = ce_noise.scale(k);
                    PolicyDecision {
                        u: &u_exploit + &zeta * scale,
                        u_exploit,
                        zeta,
                        noise_scale: scale,
                        next: PolicyState::IDLE,
                        acted: true,
                    }
                }
            }
        };
        if k >= 1 {
            let cap = (k as f64).ln().powi(2);
            if decision.u_exploit.norm() > cap {
                violations += 1;
            }
        }
        if config.record_stride > 0 && k % config.record_stride == 0 {
            record.steps.push(StepRecord::new(k, &x, &decision, ctrl.policy, ctrl.gain_id));
        }
        ctrl.policy = decision.next;

        noise.sample_into(&mut process, &mut z, &mut w);
        sys.step_into(&x, &decision.u, &w, &mut next);
        std::mem::swap(&mut x, &mut next);
        prev = Some(decision);
        steps_run = k + 1;
        let norm = x.norm();
        max_norm = if norm.is_finite() { max_norm.max(norm) } else { f64::INFINITY };
        if first_large.is_none() && !(norm <= LARGE_STATE) {
            first_large = Some(k + 1);
        }
        if !norm.is_finite() || norm > DIVERGENCE_THRESHOLD {
            diverged_at = Some(k + 1);
            break;
        }
    }

    let last = record.snapshots.last();
    let final_snapshot = match last {
        Some(s) if s.k == steps_run => s.clone(),
        _ => reference.snapshot(sys, steps_run, &ctrl, ctrl.last.as_ref()),
    };
    let summary = RunSummary {
        kind,
        seed: config.seed,
        beta: rate.value(),
        total_steps: total,
        steps_run,
        diverged_at,
        first_large_state: first_large,
        max_state_norm: max_norm,
        exploit_bound_violations: violations,
        gain_updates: ctrl.gain_id,
        fallback_events: ctrl.fallbacks.clone(),
        optimal_cost: reference.j_star,
        final_gain: ctrl.gain.clone(),
        final_h_err: final_snapshot.h_err.clone(),
        final_a_err: final_snapshot.a_err,
        final_b_err: final_snapshot.b_err,
        final_k_err: final_snapshot.k_err,
        final_cost_gap: final_snapshot.cost_gap,
    };
    Ok(RunOutput { summary, record })
}

/// A gain `K = s·Bᵀ` with `ρ(A + B K) = target`, found by bisection on `s`.
pub fn destabilizing_gain(sys: &LinearSystem, target: f64) -> Result<Matrix> {
    let base = sys.open_loop_radius();
    if target <= base {
        return Err(invalid(format!("target radius {target} must exceed the open-loop radius {base}")));
    }
    let bt = sys.b.transpose();
    let radius = |s: f64| spectral_radius(&(&sys.a + &sys.b * (&bt * s)));
    let mut hi = 1.0;
    while radius(hi)? < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(invalid("no scaling of Bᵀ reaches the target radius"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if radius(mid)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(&bt * hi)
}

/// Frozen-gain config helper.
pub fn frozen(config: &DualControlConfig, gain: &Matrix) -> DualControlConfig {
    DualControlConfig {
        frozen_gain: Some(matrix_to_rows(gain)),
        ..config.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{markov_parameters, random_stable_system};

    fn desk_system(seed: u64, n: usize, p: usize) -> LinearSystem {
        random_stable_system(n, p, 0.9, &mut rng_from(seed)).unwrap()
    }

    #[test]
    fn half_decade_schedule() {
        assert_eq!(
            GainSchedule::HalfDecades.points(1000),
            vec![1, 3, 10, 31, 100, 316, 1000]
        );
        assert!(GainSchedule::Explicit(vec![5, 5]).validate().is_err());
    }

    #[test]
    fn log_spacing() {
        let pts = log_spaced(5, 1000, 4);
        assert_eq!(pts, vec![6, 10, 18, 32, 56, 100, 178, 316, 562, 1000]);
        assert!(log_spaced(5, 1_000_000, 16).contains(&1000));
    }

    #[test]
    fn exact_markov_data_gives_optimal_gain() {
        let sys = desk_system(1, 3, 2);
        let h = true_markov(&sys, 5);
        let up = update_gain(&h, &sys.q, &sys.r, 50, &mut probe_rng(0, 5));
        assert!(up.fallback.is_none());
        let k_star = solve_dare(&sys.a, &sys.b, &sys.q, &sys.r).unwrap().k;
        assert!((up.gain - k_star).amax() < 1e-8);
    }

    #[test]
    fn zero_markov_data_gives_zero_gain() {
        let h = vec![Matrix::zeros(2, 1); 3];
        let up = update_gain(&h, &Matrix::identity(2, 2), &Matrix::identity(1, 1), 50, &mut probe_rng(0, 3));
        assert_eq!(up.gain, Matrix::zeros(1, 2));
    }

    #[test]
    fn riccati_failure_falls_back_to_zero() {
        let a = Matrix::from_element(1, 1, 1e200);
        let b = Matrix::from_element(1, 1, 1.0);
        let h = markov_parameters(&a, &b, 2);
        let up = update_gain(&h, &Matrix::identity(1, 1), &Matrix::identity(1, 1), 50, &mut probe_rng(0, 2));
        let rec = up.reconstruction.as_ref().unwrap();
        assert!(rec.a[(0, 0)].abs() > 1.5);
        assert!(up.fallback.is_some());
        assert_eq!(up.gain, Matrix::zeros(1, 1));
    }

    #[test]
    fn smoke_run() {
        let sys = desk_system(2, 2, 1);
        let cfg = DualControlConfig {
            total_steps: 500,
            seed: 3,
            ..Default::default()
        };
        let out = run_safe(&sys, &cfg).unwrap();
        assert_eq!(out.summary.steps_run, 500);
        assert_eq!(out.summary.exploit_bound_violations, 0);
        assert_eq!(out.record.steps.len(), 500);
        for s in &out.record.steps {
            assert_eq!(s.u, &s.u_exploit + &s.zeta * s.noise_scale);
            if s.k < 3 {
                assert_eq!(s.u_exploit, Vector::zeros(1));
            }
        }
        assert!(out.summary.gain_updates >= 4);
        assert!(!out.record.snapshots.is_empty());

        let again = run_safe(&sys, &cfg).unwrap();
        assert_eq!(out.record.steps, again.record.steps);
        assert_eq!(
            serde_json::to_string(&out.summary).unwrap(),
            serde_json::to_string(&again.summary).unwrap()
        );
    }

    #[test]
    fn safe_and_ce_share_noise() {
        let sys = desk_system(4, 2, 1);
        let cfg = DualControlConfig {
            total_steps: 50,
            seed: 9,
            ..Default::default()
        };
        let safe = run_safe(&sys, &cfg).unwrap();
        let ce = run_certainty_equivalence(&sys, &cfg).unwrap();
        for (a, b) in safe.record.steps.iter().zip(&ce.record.steps) {
            assert_eq!(a.zeta, b.zeta);
        }
        assert_eq!(safe.record.steps[0].x, ce.record.steps[0].x);
    }

    #[test]
    fn destabilizing_gain_hits_target() {
        let sys = desk_system(5, 3, 2);
        let k = destabilizing_gain(&sys, 1.2).unwrap();
        let rho = spectral_radius(&sys.closed_loop(&k)).unwrap();
        assert!((rho - 1.2).abs() < 1e-9);
    }

    #[test]
    fn frozen_destabilizing_gain() {
        let sys = desk_system(6, 3, 2);
        let k = destabilizing_gain(&sys, 1.2).unwrap();
        let base = DualControlConfig {
            total_steps: 2000,
            seed: 1,
            record_stride: 0,
            ..Default::default()
        };
        let cfg = frozen(&base, &k);
        let ce = run_certainty_equivalence(&sys, &cfg).unwrap();
        assert!(ce.summary.diverged_at.is_some_and(|s| s <= 2000));
        assert!(ce.summary.first_large_state.is_some_and(|s| s <= 2000));

        let safe = run_safe(&sys, &cfg).unwrap();
        assert!(safe.summary.max_state_norm.is_finite());
        assert_eq!(safe.summary.gain_updates, 1);
    }

    #[test]
    #[ignore]
    fn timing_million_steps() {
        let sys = desk_system(8, 3, 2);
        let cfg = DualControlConfig {
            total_steps: 1_000_000,
            record_stride: 0,
            ..Default::default()
        };
        let t = std::time::Instant::now();
        let out = run_safe(&sys, &cfg).unwrap();
        eprintln!("{:?} {:?}", t.elapsed(), out.summary);
    }

    #[test]
    fn config_validation() {
        let sys = desk_system(7, 2, 1);
        for cfg in [
            DualControlConfig { beta: 0.0, ..Default::default() },
            DualControlConfig { total_steps: 2, ..Default::default() },
            DualControlConfig { warmup_steps: Some(1), ..Default::default() },
            DualControlConfig { n_probes: 0, ..Default::default() },
        ] {
            assert!(matches!(run_safe(&sys, &cfg), Err(Error::InvalidArgument(_))));
        }
        let sweep = DualControlConfig {
            beta: 0.0,
            sweep: true,
            total_steps: 100,
            ..Default::default()
        };
        assert!(run_safe(&sys, &sweep).is_ok());
    }
}
