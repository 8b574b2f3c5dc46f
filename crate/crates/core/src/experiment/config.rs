use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptation::{PlanKind, Strategy};
use crate::data::SynthSpec;
use crate::error::{Error, Result};
use crate::optim::AdamWConfig;
use crate::vit::ViTConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthSpec),
    File {
        path: PathBuf,
        /// Checkpoint holding the starting weights; fresh init when absent.
        #[serde(default)]
        init: Option<PathBuf>,
    },
}

fn default_batch() -> usize {
    32
}

fn default_probe() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Training samples used to score columns for non-random strategies.
    #[serde(default = "default_probe")]
    pub probe_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputSpec {
    pub warmup_iters: usize,
    pub timed_iters: usize,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ViTConfig,
    pub plan: PlanKind,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub data: DataSource,
    pub train: TrainSettings,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub throughput: Option<ThroughputSpec>,
}

fn default_strategy() -> Strategy {
    Strategy::Random
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.lora.is_some() || self.model.head_hidden_layers > 0 {
            return Err(Error::config(
                "model.lora and model.head_hidden_layers come from the plan; leave them unset",
            ));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !t.base_lr.is_finite() || t.base_lr < 0.0 {
            return Err(Error::config("train.base_lr must be a finite non-negative number"));
        }
        if t.epochs > 0 && t.warmup_epochs >= t.epochs {
            return Err(Error::config("train.warmup_epochs must be below train.epochs"));
        }
        if t.probe_size == 0 {
            return Err(Error::config("train.probe_size must be positive"));
        }
        if self.strategy != Strategy::Random && !matches!(self.plan, PlanKind::Apla { .. }) {
            return Err(Error::config("a selection strategy only applies to apla plans"));
        }
        if let Some(tp) = &self.throughput {
            if tp.timed_iters == 0 {
                return Err(Error::config("throughput.timed_iters must be at least 1"));
            }
        }
        crate::adaptation::build_plan(&self.plan, &self.model, self.seed)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}
