//! Experiment configuration: one JSON document with `data`, `federation`,
//! `output` and `sweep` sections. Missing keys take defaults, unknown keys are
//! rejected, and the resolved document is echoed into every run directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flis_core::{DataConfig, FederationConfig, FlisError, Mode};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub federation: FederationConfig,
    pub output: OutputConfig,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Modes run next to `federation.mode` on the same data and seeds.
    pub baselines: Vec<Mode>,
    /// Consecutive seeds starting at `federation.seed`; spreads in the summary
    /// are standard deviations over these runs.
    pub seeds: usize,
    /// Accuracy used for rounds-to-target in the summary.
    pub target: Option<f64>,
    /// Keep the full similarity matrix in `rounds.jsonl`.
    pub adjacency: bool,
    /// Fine-tuning epochs for withheld clients (`data.unseen_fraction > 0`).
    pub personalize_epochs: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
            baselines: vec![Mode::FedAvg, Mode::Solo],
            seeds: 3,
            target: None,
            adjacency: false,
            personalize_epochs: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub betas: Vec<f64>,
    pub epochs: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { betas: vec![0.0, 0.05, 0.10, 0.15], epochs: vec![1, 5] }
    }
}

fn named(section: &str, e: FlisError) -> anyhow::Error {
    match e {
        FlisError::InvalidArgument { name, reason } => anyhow::anyhow!("invalid value for `{section}.{name}`: {reason}"),
        other => anyhow::anyhow!("{section}: {other}"),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        // serde_json errors carry the line and column of the offending token
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let cfg = Self::parse(&text).with_context(|| format!("cannot parse {}", path.display()))?;
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| named("data", e))?;
        self.federation.validate().map_err(|e| named("federation", e))?;
        if self.output.seeds == 0 {
            bail!("invalid value for `output.seeds`: must be at least 1");
        }
        if let Some(t) = self.output.target {
            if !(0.0..=1.0).contains(&t) {
                bail!("invalid value for `output.target`: must lie in [0, 1]");
            }
        }
        if self.sweep.betas.iter().any(|b| !b.is_finite()) {
            bail!("invalid value for `sweep.betas`: entries must be finite");
        }
        if self.sweep.epochs.contains(&0) {
            bail!("invalid value for `sweep.epochs`: entries must be at least 1");
        }
        Ok(())
    }

    /// Primary mode first, then baselines without repeats.
    pub fn modes(&self) -> Vec<Mode> {
        let mut modes = vec![self.federation.mode];
        for &m in &self.output.baselines {
            if !modes.contains(&m) {
                modes.push(m);
            }
        }
        modes
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.output.seeds as u64).map(|k| self.federation.seed.wrapping_add(k)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
