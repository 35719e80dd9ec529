//! `safe-lqr`: experiment harness for safe LQR dual control.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, SystemSource};

/// Invalid configuration or arguments; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "safe-lqr", version, about = "Safe LQR dual-control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the safe dual-control loop for every (beta, replicate) pair.
    Run(RunArgs),
    /// Run the safe and certainty-equivalence loops on identical seeds.
    CompareCe(RunArgs),
    /// Write the switched-system oscillation trajectories.
    Oscillation(OscillationArgs),
    /// Check the escape, moment, switching-gap and sensitivity bounds.
    ValidateBounds(ValidateArgs),
    /// Fit a power law to a CSV curve.
    RateFit(RateFitArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML config, or a JSON report whose embedded config is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, env = "SAFE_LQR_THREADS")]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct SystemArgs {
    #[arg(long, conflicts_with = "system")]
    n: Option<usize>,
    #[arg(long, conflicts_with = "system")]
    p: Option<usize>,
    /// Spectral radius of the random plant.
    #[arg(long, conflicts_with = "system")]
    rho: Option<f64>,
    /// JSON system file.
    #[arg(long)]
    system: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    system: SystemArgs,
    /// Exploration exponents, comma separated.
    #[arg(long = "beta", value_delimiter = ',')]
    betas: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Gain update steps, comma separated.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
    #[arg(long)]
    probes: Option<usize>,
    /// Trajectory CSV row stride; 0 disables trajectory files.
    #[arg(long)]
    record_stride: Option<usize>,
    #[arg(long)]
    snapshots_per_decade: Option<usize>,
    /// Add the state coordinates to trajectory files.
    #[arg(long)]
    full_state: bool,
    /// First step used by the slope fits.
    #[arg(long)]
    fit_from: Option<usize>,
}

#[derive(Args, Debug)]
struct OscillationArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Switching threshold M.
    #[arg(long = "m")]
    threshold: Option<f64>,
    /// Non-action durations t, comma separated.
    #[arg(long = "t", value_delimiter = ',')]
    holds: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Monte-Carlo sample count; below the defaults the comparisons are skipped.
    #[arg(long)]
    samples: Option<usize>,
    /// Escape-bound thresholds M, comma separated.
    #[arg(long = "escape-m", value_delimiter = ',')]
    escape_thresholds: Option<Vec<f64>>,
    #[arg(long = "moment-m")]
    moment_threshold: Option<f64>,
    #[arg(long = "gap-m")]
    gap_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct RateFitArgs {
    /// CSV with `k,value` or `series,k,value` columns.
    #[arg(long)]
    pub input: PathBuf,
    /// Fit only this series.
    #[arg(long)]
    pub series: Option<String>,
    /// Smallest k included.
    #[arg(long, default_value_t = 1.0)]
    pub from: f64,
    /// Keep at most this many points per decade; 0 keeps all.
    #[arg(long, default_value_t = 0)]
    pub per_decade: usize,
    /// Also write the fit to this JSON file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl CommonArgs {
    fn base(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

impl SystemArgs {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(file) = &self.system {
            cfg.system = SystemSource::File { file: file.clone() };
            return;
        }
        if self.n.is_none() && self.p.is_none() && self.rho.is_none() {
            return;
        }
        let (n0, p0, rho0) = match cfg.system {
            SystemSource::Random { n, p, rho } => (n, p, rho),
            SystemSource::File { .. } => SystemSource::DEFAULT_RANDOM,
        };
        cfg.system = SystemSource::Random {
            n: self.n.unwrap_or(n0),
            p: self.p.unwrap_or(p0),
            rho: self.rho.unwrap_or(rho0),
        };
    }
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = self.common.base()?;
        self.system.apply(&mut cfg);
        if let Some(v) = &self.betas {
            cfg.betas = v.clone();
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.replicates {
            cfg.replicates = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = Some(v);
        }
        if let Some(v) = &self.schedule {
            cfg.schedule = Some(v.clone());
        }
        if let Some(v) = self.probes {
            cfg.probes = v;
        }
        if let Some(v) = self.record_stride {
            cfg.record_stride = v;
        }
        if let Some(v) = self.snapshots_per_decade {
            cfg.snapshots_per_decade = v;
        }
        if self.full_state {
            cfg.full_state = true;
        }
        if let Some(v) = self.fit_from {
            cfg.fit_from = v;
        }
        Ok(cfg)
    }
}

impl OscillationArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = self.common.base()?;
        let osc = &mut cfg.oscillation;
        if let Some(v) = self.threshold {
            osc.threshold = v;
        }
        if let Some(v) = &self.holds {
            osc.holds = v.clone();
        }
        if let Some(v) = self.steps {
            osc.steps = v;
        }
        if let Some(v) = &self.x0 {
            osc.x0 = v.clone();
        }
        Ok(cfg)
    }
}

impl ValidateArgs {
    fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = self.common.base()?;
        let val = &mut cfg.validation;
        if let Some(v) = self.samples {
            val.samples = Some(v);
        }
        if let Some(v) = &self.escape_thresholds {
            val.escape_thresholds = v.clone();
        }
        if let Some(v) = self.moment_threshold {
            val.moment_threshold = v;
        }
        if let Some(v) = self.gap_threshold {
            val.gap_threshold = v;
        }
        Ok(cfg)
    }
}

fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    match threads {
        Some(0) => Err(UsageError("threads must be positive".into()).into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Into::into),
        None => Ok(()),
    }
}

/// Whether the command's assertions held.
fn dispatch(command: Command) -> anyhow::Result<bool> {
    match command {
        Command::Run(args) => {
            init_threads(args.common.threads)?;
            commands::run(&args.resolve()?)
        }
        Command::CompareCe(args) => {
            init_threads(args.common.threads)?;
            commands::compare_ce(&args.resolve()?)
        }
        Command::Oscillation(args) => commands::oscillation(&args.resolve()?),
        Command::ValidateBounds(args) => {
            init_threads(args.common.threads)?;
            commands::validate_bounds(&args.resolve()?)
        }
        Command::RateFit(args) => commands::rate_fit(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) if err.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
