//! Replicated dual-control experiments and their aggregate curves.
//!
//! Replicate `i` of exploration rate `j` runs on seed `mix(seed, i, j)`;
//! replicates are independent and run on the rayon pool, so results do not
//! depend on the thread count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::dual::{run_certainty_equivalence, run_safe, DualControlConfig, PolicyKind, RunOutput};
use crate::error::Result;
use crate::evaluation::rate::{fit_power_law, log_subsample, quantile, PowerLawFit};
use crate::rng::mix_seed;
use crate::system::LinearSystem;
use crate::trajectory::Snapshot;

#[derive(Debug, Clone)]
pub struct Replicate {
    pub beta_index: usize,
    pub replicate: usize,
    pub seed: u64,
    /// The run, or the error that ended it.
    pub outcome: std::result::Result<RunOutput, String>,
}

pub fn replicate_seed(seed: u64, replicate: usize, beta_index: usize) -> u64 {
    mix_seed(seed, replicate as u64, beta_index as u64)
}

/// Runs `replicates` copies of the loop for each β in `betas`.
pub fn run_replicates(
    sys: &LinearSystem,
    base: &DualControlConfig,
    betas: &[f64],
    replicates: usize,
    kind: PolicyKind,
) -> Vec<Replicate> {
    let jobs: Vec<(usize, usize)> = (0..betas.len())
        .flat_map(|j| (0..replicates).map(move |i| (j, i)))
        .collect();
    jobs.par_iter()
        .map(|&(j, i)| {
            let seed = replicate_seed(base.seed, i, j);
            let cfg = DualControlConfig {
                beta: betas[j],
                seed,
                ..base.clone()
            };
            let outcome = match kind {
                PolicyKind::Safe => run_safe(sys, &cfg),
                PolicyKind::CertaintyEquivalence => run_certainty_equivalence(sys, &cfg),
            }
            .map_err(|e| e.to_string());
            Replicate {
                beta_index: j,
                replicate: i,
                seed,
                outcome,
            }
        })
        .collect()
}

/// Per-step quartiles of a snapshot metric across replicates.
#[derive(Debug, Clone, Serialize)]
pub struct QuantilePoint {
    pub k: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    H0Err,
    AErr,
    BErr,
    KErr,
    CostGap,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::H0Err, Metric::AErr, Metric::BErr, Metric::KErr, Metric::CostGap];

    pub fn name(self) -> &'static str {
        match self {
            Metric::H0Err => "h0_err",
            Metric::AErr => "a_err",
            Metric::BErr => "b_err",
            Metric::KErr => "k_err",
            Metric::CostGap => "cost_gap",
        }
    }

    pub fn of(self, s: &Snapshot) -> Option<f64> {
        match self {
            Metric::H0Err => s.h_err.first().copied(),
            Metric::AErr => s.a_err,
            Metric::BErr => s.b_err,
            Metric::KErr => Some(s.k_err),
            Metric::CostGap => s.cost_gap,
        }
    }
}

/// Quartile curve of `metric` over the replicates that completed.
pub fn quantile_curve<'a>(runs: impl IntoIterator<Item = &'a RunOutput>, metric: Metric) -> Vec<QuantilePoint> {
    let mut by_k: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for s in &run.record.snapshots {
            if let Some(v) = metric.of(s).filter(|v| v.is_finite()) {
                by_k.entry(s.k).or_default().push(v);
            }
        }
    }
    by_k.into_iter()
        .map(|(k, v)| QuantilePoint {
            k,
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            count: v.len(),
        })
        .collect()
}

/// Median curve value at step `k`, if present.
pub fn median_at(curve: &[QuantilePoint], k: usize) -> Option<f64> {
    curve.iter().find(|p| p.k == k).map(|p| p.median)
}

/// Power-law fit to the median curve over `from ≤ k`, log-subsampled.
pub fn median_slope(curve: &[QuantilePoint], from: usize, per_decade: usize) -> Result<PowerLawFit> {
    let points: Vec<(f64, f64)> = curve
        .iter()
        .filter(|p| p.median > 0.0)
        .map(|p| (p.k as f64, p.median))
        .collect();
    fit_power_law(&log_subsample(&points, from as f64, per_decade))
}
