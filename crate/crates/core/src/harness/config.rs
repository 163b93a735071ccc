//! Run configuration shared by the CLI subcommands and the grid.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilm::{BiLmConfig, PretrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{CrossModalConfig, FusionConfig, Variant};
use crate::optim::AdamConfig;
use crate::synth::WorldConfig;
use crate::tasks::{FinetuneConfig, PromptOptions, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Every knob of a run. Missing keys take their defaults, unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub bilm: BiLmConfig,
    pub fusion: FusionConfig,
    pub adam: AdamConfig,
    pub pretrain: PretrainConfig,
    pub crossmodal: CrossModalConfig,
    pub finetune: FinetuneConfig,
    pub task: TaskKind,
    pub variant: Variant,
    pub prompt: PromptOptions,
    /// Share of the training split used for finetuning; 0 is zero-shot.
    pub fraction: f64,
    /// Open-ended answer vocabulary size (most frequent training answers).
    pub answer_vocab_size: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            bilm: BiLmConfig::default(),
            fusion: FusionConfig::default(),
            adam: AdamConfig::default(),
            pretrain: PretrainConfig::default(),
            crossmodal: CrossModalConfig::default(),
            finetune: FinetuneConfig::default(),
            task: TaskKind::OpenEnded,
            variant: Variant::Frozen,
            prompt: PromptOptions::default(),
            fraction: 1.0,
            answer_vocab_size: 100,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.bilm.validate()?;
        self.fusion.validate(&self.bilm)?;
        self.adam.validate()?;
        if self.fusion.feature_dim != self.world.feature_dim {
            return Err(Error::Config(format!(
                "fusion.feature_dim {} differs from world.feature_dim {}",
                self.fusion.feature_dim, self.world.feature_dim
            )));
        }
        if self.world.frames > self.bilm.prompt_len {
            return Err(Error::Config(format!(
                "{} frames do not fit a prompt of {}",
                self.world.frames, self.bilm.prompt_len
            )));
        }
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(Error::Config(format!("fraction {} outside [0, 1]", self.fraction)));
        }
        if self.answer_vocab_size == 0 {
            return Err(Error::Config("answer_vocab_size must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the compact JSON form. Field order is fixed by the
    /// struct and floats print in shortest round-trip form, so the hash
    /// does not depend on the platform.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
