//! Experiment configuration: defaults, file loading and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use safe_lqr_core::rng::rng_from;
use safe_lqr_core::system::SystemFile;
use safe_lqr_core::{random_stable_system, DualControlConfig, GainSchedule, LinearSystem, ValidationConfig};
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Where the plant comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum SystemSource {
    /// Random stable plant drawn from the experiment seed.
    Random { n: usize, p: usize, rho: f64 },
    /// JSON system file.
    File { file: PathBuf },
}

impl SystemSource {
    /// `(n, p, ρ)` of the default random plant.
    pub const DEFAULT_RANDOM: (usize, usize, f64) = (3, 2, 0.9);
}

impl Default for SystemSource {
    fn default() -> Self {
        let (n, p, rho) = Self::DEFAULT_RANDOM;
        SystemSource::Random { n, p, rho }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OscillationSection {
    pub threshold: f64,
    pub holds: Vec<usize>,
    pub steps: usize,
    pub x0: Vec<f64>,
}

impl Default for OscillationSection {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            holds: vec![1, 2],
            steps: 60,
            x0: vec![0.1, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub system: SystemSource,
    pub betas: Vec<f64>,
    pub steps: usize,
    pub replicates: usize,
    /// Pure-exploration steps; `n + p` when absent.
    pub warmup: Option<usize>,
    /// Gain update steps; half decades when absent.
    pub schedule: Option<Vec<usize>>,
    pub probes: usize,
    /// Trajectory CSV row stride; 0 writes no trajectories.
    pub record_stride: usize,
    pub snapshots_per_decade: usize,
    pub full_state: bool,
    /// First step included in the slope fits.
    pub fit_from: usize,
    pub oscillation: OscillationSection,
    /// Its `seed` field is replaced by the experiment seed.
    pub validation: ValidationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            system: SystemSource::default(),
            betas: vec![0.25],
            steps: 10_000,
            replicates: 10,
            warmup: None,
            schedule: None,
            probes: 50,
            record_stride: 100,
            snapshots_per_decade: 16,
            full_state: false,
            fit_from: 1000,
            oscillation: OscillationSection::default(),
            validation: ValidationConfig::default(),
        }
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

impl ExperimentConfig {
    /// Reads a TOML config, or the `config` object embedded in a JSON report.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| usage(e.to_string()))?;
            let inner = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(inner).map_err(|e| usage(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        };
        Ok(parsed)
    }

    pub fn load_system(&self) -> Result<LinearSystem> {
        match &self.system {
            SystemSource::Random { n, p, rho } => {
                random_stable_system(*n, *p, *rho, &mut rng_from(self.seed)).map_err(|e| usage(e.to_string()))
            }
            SystemSource::File { file } => {
                let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
                let parsed: SystemFile = serde_json::from_str(&text).map_err(|e| usage(e.to_string()))?;
                parsed.into_system().map_err(|e| usage(e.to_string()))
            }
        }
    }

    /// Per-replicate run settings; β and seed are filled in per replicate.
    pub fn dual_control(&self) -> DualControlConfig {
        DualControlConfig {
            beta: self.betas.first().copied().unwrap_or(0.25),
            sweep: true,
            total_steps: self.steps,
            schedule: self
                .schedule
                .clone()
                .map_or(GainSchedule::HalfDecades, GainSchedule::Explicit),
            n_probes: self.probes,
            seed: self.seed,
            record_stride: self.record_stride,
            warmup_steps: self.warmup,
            snapshots_per_decade: self.snapshots_per_decade,
            frozen_gain: None,
        }
    }

    /// Checks everything a simulation run needs before any work starts.
    pub fn validate_run(&self, sys: &LinearSystem) -> Result<()> {
        if self.replicates == 0 {
            return Err(usage("replicates must be positive"));
        }
        if self.betas.is_empty() {
            return Err(usage("at least one beta is required"));
        }
        for &beta in &self.betas {
            let cfg = DualControlConfig {
                beta,
                ..self.dual_control()
            };
            cfg.validate(sys.n(), sys.p()).map_err(|e| usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn validation(&self) -> ValidationConfig {
        ValidationConfig {
            seed: self.seed,
            ..self.validation.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_sections_parse() {
        let cfg: ExperimentConfig = toml::from_str(
            r#"
            seed = 3
            betas = [0.0, 0.25, 0.5]
            [system]
            n = 2
            p = 1
            rho = 0.5
            [oscillation]
            holds = [1]
            [validation]
            samples = 100
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.system, SystemSource::Random { n: 2, p: 1, rho: 0.5 });
        assert_eq!(cfg.oscillation.holds, vec![1]);
        assert_eq!(cfg.oscillation.threshold, 1.0);
        assert_eq!(cfg.validation.samples, Some(100));
        assert_eq!(cfg.steps, 10_000);
    }

    #[test]
    fn file_source_parses() {
        let cfg: ExperimentConfig = toml::from_str("[system]\nfile = \"sys.json\"\n").unwrap();
        assert_eq!(
            cfg.system,
            SystemSource::File {
                file: PathBuf::from("sys.json")
            }
        );
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("stpes = 10\n").is_err());
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig {
            schedule: Some(vec![5, 50]),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn zero_replicates_is_usage_error() {
        let cfg = ExperimentConfig {
            replicates: 0,
            ..Default::default()
        };
        let sys = cfg.load_system().unwrap();
        let err = cfg.validate_run(&sys).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
    }
}
