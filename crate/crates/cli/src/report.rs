//! Report files: JSON envelopes and long-format CSV curves.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Serialize)]
pub struct Timing {
    pub elapsed_seconds: f64,
}

impl Timing {
    pub fn since(start: Instant) -> Self {
        Self {
            elapsed_seconds: start.elapsed().as_secs_f64(),
        }
    }
}

/// Provenance wrapper shared by every report.
#[derive(Debug, Serialize)]
pub struct Envelope<'a, T: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: u64,
    pub config: &'a ExperimentConfig,
    #[serde(flatten)]
    pub body: T,
    pub timing: Timing,
}

impl<'a, T: Serialize> Envelope<'a, T> {
    pub fn new(command: &'a str, config: &'a ExperimentConfig, body: T, start: Instant) -> Self {
        Self {
            command,
            version: VERSION,
            seed: config.seed,
            config,
            body,
            timing: Timing::since(start),
        }
    }
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// `series,k,value` rows.
pub struct LongCsv {
    writer: csv::Writer<BufWriter<File>>,
}

impl LongCsv {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_writer(create(path)?);
        writer.write_record(["series", "k", "value"])?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, series: &str, k: usize, value: f64) -> Result<()> {
        self.writer
            .write_record([series, &k.to_string(), &value.to_string()])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}
