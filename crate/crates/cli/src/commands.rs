//! Subcommand bodies.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use safe_lqr_core::evaluation::oscillation::Mode;
use safe_lqr_core::evaluation::rate::log_subsample;
use safe_lqr_core::evaluation::validate::Status;
use safe_lqr_core::experiment::{median_slope, quantile_curve, run_replicates, Metric, QuantilePoint, Replicate};
use safe_lqr_core::system::SystemFile;
use safe_lqr_core::{
    fit_power_law, oscillation_demo, validate_bounds as check_bounds, Error, OscillationConfig, OscillationTrace, PolicyKind,
    PowerLawFit, RunOutput, RunSummary, Snapshot,
};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::report::{self, Envelope, LongCsv};
use crate::{RateFitArgs, UsageError};

/// Argument errors from the core surface as usage errors.
fn core_err(err: Error) -> anyhow::Error {
    match err {
        Error::InvalidArgument(_) | Error::Validity(_) => UsageError(err.to_string()).into(),
        other => other.into(),
    }
}

fn kind_name(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Safe => "safe",
        PolicyKind::CertaintyEquivalence => "ce",
    }
}

#[derive(Debug, Serialize)]
struct ReplicateReport<'a> {
    replicate: usize,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<&'a RunSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
    snapshots: &'a [Snapshot],
}

#[derive(Debug, Serialize)]
struct BetaReport<'a> {
    beta: f64,
    completed: usize,
    failed: usize,
    replicates: Vec<ReplicateReport<'a>>,
    curves: BTreeMap<&'static str, Vec<QuantilePoint>>,
    /// Power-law fit of each median curve; absent when too few points remain.
    slopes: BTreeMap<&'static str, Option<PowerLawFit>>,
}

fn beta_reports<'a>(cfg: &ExperimentConfig, reps: &'a [Replicate]) -> Vec<BetaReport<'a>> {
    cfg.betas
        .iter()
        .enumerate()
        .map(|(j, &beta)| {
            let group: Vec<&Replicate> = reps.iter().filter(|r| r.beta_index == j).collect();
            let runs: Vec<&RunOutput> = group.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
            let mut curves = BTreeMap::new();
            let mut slopes = BTreeMap::new();
            for metric in Metric::ALL {
                let curve = quantile_curve(runs.iter().copied(), metric);
                let fit = median_slope(&curve, cfg.fit_from, cfg.snapshots_per_decade.max(1)).ok();
                slopes.insert(metric.name(), fit);
                curves.insert(metric.name(), curve);
            }
            let replicates = group
                .iter()
                .map(|r| match &r.outcome {
                    Ok(run) => ReplicateReport {
                        replicate: r.replicate,
                        seed: r.seed,
                        summary: Some(&run.summary),
                        error: None,
                        snapshots: &run.record.snapshots,
                    },
                    Err(e) => ReplicateReport {
                        replicate: r.replicate,
                        seed: r.seed,
                        summary: None,
                        error: Some(e),
                        snapshots: &[],
                    },
                })
                .collect();
            BetaReport {
                beta,
                completed: runs.len(),
                failed: group.len() - runs.len(),
                replicates,
                curves,
                slopes,
            }
        })
        .collect()
}

fn write_curves(csv: &mut LongCsv, kind: PolicyKind, groups: &[BetaReport]) -> Result<()> {
    for group in groups {
        for (metric, curve) in &group.curves {
            let prefix = format!("{}/beta={}/{metric}", kind_name(kind), group.beta);
            for p in curve {
                csv.row(&format!("{prefix}/q1"), p.k, p.q1)?;
                csv.row(&format!("{prefix}/median"), p.k, p.median)?;
                csv.row(&format!("{prefix}/q3"), p.k, p.q3)?;
            }
        }
    }
    Ok(())
}

fn write_trajectories(cfg: &ExperimentConfig, kind: PolicyKind, reps: &[Replicate]) -> Result<()> {
    if cfg.record_stride == 0 {
        return Ok(());
    }
    let dir = cfg.out.join("trajectories");
    for r in reps {
        if let Ok(run) = &r.outcome {
            let name = format!("{}_beta{}_rep{}.csv", kind_name(kind), cfg.betas[r.beta_index], r.replicate);
            let out = report::create(&dir.join(name))?;
            run.record.write_csv(out, cfg.full_state)?;
        }
    }
    Ok(())
}

/// Safe-loop assertions: the run completed and the exploit guard held.
fn safe_held(reps: &[Replicate]) -> bool {
    reps.iter().all(|r| match &r.outcome {
        Ok(run) => run.summary.exploit_bound_violations == 0,
        Err(_) => false,
    })
}

fn simulate(cfg: &ExperimentConfig, kind: PolicyKind) -> Result<(SystemFile, Vec<Replicate>)> {
    let sys = cfg.load_system()?;
    cfg.validate_run(&sys)?;
    eprintln!(
        "{}: n={} p={} betas={:?} replicates={} steps={}",
        kind_name(kind),
        sys.n(),
        sys.p(),
        cfg.betas,
        cfg.replicates,
        cfg.steps
    );
    let reps = run_replicates(&sys, &cfg.dual_control(), &cfg.betas, cfg.replicates, kind);
    Ok((SystemFile::from(&sys), reps))
}

fn print_groups(kind: PolicyKind, groups: &[BetaReport]) {
    for g in groups {
        let slope = g.slopes.get(Metric::AErr.name()).and_then(|f| f.as_ref());
        println!(
            "{:<4} beta={:<6} completed={:<3} failed={:<3} a_err slope={}",
            kind_name(kind),
            g.beta,
            g.completed,
            g.failed,
            slope.map_or("n/a".to_string(), |f| format!("{:.3}", f.slope))
        );
    }
}

#[derive(Serialize)]
struct RunBody<'a> {
    system: &'a SystemFile,
    betas: Vec<BetaReport<'a>>,
}

pub fn run(cfg: &ExperimentConfig) -> Result<bool> {
    let start = Instant::now();
    let (system, reps) = simulate(cfg, PolicyKind::Safe)?;
    let groups = beta_reports(cfg, &reps);
    write_trajectories(cfg, PolicyKind::Safe, &reps)?;
    let mut csv = LongCsv::create(&cfg.out.join("curves.csv"))?;
    write_curves(&mut csv, PolicyKind::Safe, &groups)?;
    csv.finish()?;
    print_groups(PolicyKind::Safe, &groups);
    let body = RunBody {
        system: &system,
        betas: groups,
    };
    report::write_json(&cfg.out.join("run_report.json"), &Envelope::new("run", cfg, body, start))?;
    Ok(safe_held(&reps))
}

#[derive(Debug, Serialize)]
struct Outcome {
    completed: bool,
    diverged_at: Option<usize>,
    first_large_state: Option<usize>,
    max_state_norm: Option<f64>,
    final_k_err: Option<f64>,
    final_cost_gap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

impl Outcome {
    fn of(r: &Replicate) -> Self {
        match &r.outcome {
            Ok(run) => {
                let s = &run.summary;
                Self {
                    completed: s.diverged_at.is_none(),
                    diverged_at: s.diverged_at,
                    first_large_state: s.first_large_state,
                    max_state_norm: Some(s.max_state_norm),
                    final_k_err: Some(s.final_k_err),
                    final_cost_gap: s.final_cost_gap,
                    error: None,
                }
            }
            Err(e) => Self {
                completed: false,
                diverged_at: None,
                first_large_state: None,
                max_state_norm: None,
                final_k_err: None,
                final_cost_gap: None,
                error: Some(e.clone()),
            },
        }
    }
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    beta: f64,
    replicate: usize,
    seed: u64,
    safe: Outcome,
    ce: Outcome,
}

#[derive(Debug, Serialize)]
struct Counts {
    diverged: usize,
    large_state: usize,
    /// Final gain does not stabilize the true plant.
    unstable_final_gain: usize,
}

impl Counts {
    fn of<'a>(outcomes: impl Iterator<Item = &'a Outcome> + Clone) -> Self {
        Self {
            diverged: outcomes.clone().filter(|o| !o.completed).count(),
            large_state: outcomes.clone().filter(|o| o.first_large_state.is_some()).count(),
            unstable_final_gain: outcomes.filter(|o| o.final_cost_gap.is_none()).count(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ComparisonTotals {
    beta: f64,
    replicates: usize,
    safe: Counts,
    ce: Counts,
}

#[derive(Serialize)]
struct CompareBody<'a> {
    system: &'a SystemFile,
    totals: Vec<ComparisonTotals>,
    comparison: Vec<ComparisonRow>,
    safe: Vec<BetaReport<'a>>,
    ce: Vec<BetaReport<'a>>,
}

pub fn compare_ce(cfg: &ExperimentConfig) -> Result<bool> {
    let start = Instant::now();
    let (system, safe) = simulate(cfg, PolicyKind::Safe)?;
    let (_, ce) = simulate(cfg, PolicyKind::CertaintyEquivalence)?;
    let comparison: Vec<ComparisonRow> = safe
        .iter()
        .zip(&ce)
        .map(|(s, c)| ComparisonRow {
            beta: cfg.betas[s.beta_index],
            replicate: s.replicate,
            seed: s.seed,
            safe: Outcome::of(s),
            ce: Outcome::of(c),
        })
        .collect();
    let totals: Vec<ComparisonTotals> = cfg
        .betas
        .iter()
        .map(|&beta| {
            let rows: Vec<&ComparisonRow> = comparison.iter().filter(|r| r.beta == beta).collect();
            ComparisonTotals {
                beta,
                replicates: rows.len(),
                safe: Counts::of(rows.iter().map(|r| &r.safe)),
                ce: Counts::of(rows.iter().map(|r| &r.ce)),
            }
        })
        .collect();
    for t in &totals {
        for (name, c) in [("safe", &t.safe), ("ce", &t.ce)] {
            println!(
                "{name:<4} beta={:<6} replicates={:<3} diverged={:<3} large_state={:<3} unstable_final_gain={}",
                t.beta, t.replicates, c.diverged, c.large_state, c.unstable_final_gain
            );
        }
    }
    write_trajectories(cfg, PolicyKind::Safe, &safe)?;
    write_trajectories(cfg, PolicyKind::CertaintyEquivalence, &ce)?;
    let safe_groups = beta_reports(cfg, &safe);
    let ce_groups = beta_reports(cfg, &ce);
    let mut csv = LongCsv::create(&cfg.out.join("curves.csv"))?;
    write_curves(&mut csv, PolicyKind::Safe, &safe_groups)?;
    write_curves(&mut csv, PolicyKind::CertaintyEquivalence, &ce_groups)?;
    csv.finish()?;
    let body = CompareBody {
        system: &system,
        totals,
        comparison,
        safe: safe_groups,
        ce: ce_groups,
    };
    report::write_json(
        &cfg.out.join("compare_report.json"),
        &Envelope::new("compare-ce", cfg, body, start),
    )?;
    Ok(safe_held(&safe))
}

#[derive(Serialize)]
struct TraceReport {
    hold: usize,
    initial_norm: f64,
    sup_norm: f64,
    final_norm: f64,
    trace: OscillationTrace,
}

#[derive(Serialize)]
struct OscillationBody {
    traces: Vec<TraceReport>,
}

pub fn oscillation(cfg: &ExperimentConfig) -> Result<bool> {
    let start = Instant::now();
    let osc = &cfg.oscillation;
    if osc.holds.is_empty() {
        bail!(UsageError("at least one non-action duration is required".into()));
    }
    let base = OscillationConfig {
        threshold: osc.threshold,
        x0: osc.x0.clone(),
        steps: osc.steps,
        ..OscillationConfig::default()
    };
    let traces = osc
        .holds
        .iter()
        .map(|&hold| oscillation_demo(&base.with_hold(hold)).map_err(core_err))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = LongCsv::create(&cfg.out.join("oscillation.csv"))?;
    for trace in &traces {
        let prefix = format!("t={}", trace.hold);
        for (k, x) in trace.states.iter().enumerate() {
            csv.row(&format!("{prefix}/norm"), k, x.iter().map(|v| v * v).sum::<f64>().sqrt())?;
            for (i, v) in x.iter().enumerate() {
                csv.row(&format!("{prefix}/x{i}"), k, *v)?;
            }
        }
        for (k, mode) in trace.modes.iter().enumerate() {
            let v = match mode {
                Mode::A0 => 0.0,
                Mode::A1 => 1.0,
            };
            csv.row(&format!("{prefix}/mode"), k, v)?;
        }
    }
    csv.finish()?;
    let traces: Vec<TraceReport> = traces
        .into_iter()
        .map(|trace| TraceReport {
            hold: trace.hold,
            initial_norm: trace.initial_norm(),
            sup_norm: trace.sup_norm(),
            final_norm: trace.final_norm(),
            trace,
        })
        .collect();
    for t in &traces {
        println!(
            "t={} M={} initial={:.4} sup={:.4} final={:.4e}",
            t.hold, osc.threshold, t.initial_norm, t.sup_norm, t.final_norm
        );
    }
    report::write_json(
        &cfg.out.join("oscillation_report.json"),
        &Envelope::new("oscillation", cfg, OscillationBody { traces }, start),
    )?;
    Ok(true)
}

pub fn validate_bounds(cfg: &ExperimentConfig) -> Result<bool> {
    let start = Instant::now();
    let report = check_bounds(&cfg.validation()).map_err(core_err)?;
    for c in &report.checks {
        let status = match c.status {
            Status::Pass => "pass",
            Status::Fail => "FAIL",
            Status::Skipped => "skipped",
            Status::Invalid => "invalid",
        };
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
        println!(
            "{status:<8} {:<40} formula={:<11} empirical={:<11} {}",
            c.name,
            fmt(c.formula_value),
            fmt(c.empirical_value),
            c.message
        );
    }
    println!(
        "{} pass, {} fail, {} skipped, {} invalid",
        report.count(Status::Pass),
        report.count(Status::Fail),
        report.count(Status::Skipped),
        report.count(Status::Invalid)
    );
    let passed = report.passed();
    report::write_json(
        &cfg.out.join("validation_report.json"),
        &Envelope::new("validate-bounds", cfg, report, start),
    )?;
    Ok(passed)
}

/// Reads `(series, k, value)` triples; a missing series column maps to "".
fn read_curves(path: &Path) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let column = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(k_col), Some(v_col)) = (column("k"), column("value")) else {
        bail!(UsageError(format!("{} needs `k` and `value` columns", path.display())));
    };
    let s_col = column("series");
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(i).unwrap_or("").trim();
        let parse = |i: usize| {
            field(i)
                .parse::<f64>()
                .with_context(|| format!("row {}: `{}` is not a number", line + 2, field(i)))
        };
        let series = s_col.map_or("", field).to_string();
        let point = (parse(k_col)?, parse(v_col)?);
        match curves.iter_mut().find(|(name, _)| *name == series) {
            Some((_, points)) => points.push(point),
            None => curves.push((series, vec![point])),
        }
    }
    Ok(curves)
}

#[derive(Serialize)]
struct RateFitConfig<'a> {
    input: &'a Path,
    series: Option<&'a str>,
    from: f64,
    per_decade: usize,
}

#[derive(Serialize)]
struct SeriesFit {
    series: String,
    fit: PowerLawFit,
}

#[derive(Serialize)]
struct RateFitReport<'a> {
    command: &'a str,
    version: &'a str,
    config: RateFitConfig<'a>,
    fits: Vec<SeriesFit>,
}

pub fn rate_fit(args: &RateFitArgs) -> Result<bool> {
    let curves = read_curves(&args.input)?;
    let mut fits = Vec::new();
    for (series, mut points) in curves {
        if args.series.as_ref().is_some_and(|s| *s != series) {
            continue;
        }
        points.retain(|&(k, v)| k > 0.0 && v > 0.0 && v.is_finite());
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let points = if args.per_decade > 0 {
            log_subsample(&points, args.from, args.per_decade)
        } else {
            points.into_iter().filter(|p| p.0 >= args.from).collect()
        };
        let fit = fit_power_law(&points).map_err(|e| anyhow::anyhow!("series `{series}`: {e}"))?;
        fits.push(SeriesFit { series, fit });
    }
    if fits.is_empty() {
        bail!(UsageError(match &args.series {
            Some(s) => format!("series `{s}` not found in {}", args.input.display()),
            None => format!("{} has no data rows", args.input.display()),
        }));
    }
    let report = RateFitReport {
        command: "rate-fit",
        version: report::VERSION,
        config: RateFitConfig {
            input: &args.input,
            series: args.series.as_deref(),
            from: args.from,
            per_decade: args.per_decade,
        },
        fits,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &args.out {
        report::write_json(out, &report)?;
    }
    Ok(true)
}
