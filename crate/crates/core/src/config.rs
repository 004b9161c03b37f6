//! JSON run configuration shared by the library drivers and the CLI.
//!
//! Desk-scale defaults: 64-dim states and slots, 32 slots per domain, batch
//! 32, Adam lr 3e-3. The reference scale is 300-dim states with 500 slots
//! per domain and lr 3e-4; the small synthetic runs need the larger step to
//! converge within ten epochs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::data::SynthSuite;
use crate::error::Result;
use crate::ida::{AdamConfig, ScheduleEntry, TrainConfig};
use crate::layers::CellKind;
use crate::membank::SlotInit;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub cell: CellKind,
    pub activation: Activation,
    /// Bank size for the first domain.
    pub memory_slots: usize,
    pub scale_attention: bool,
    pub slot_init: SlotInit,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed_dim: 32,
            hidden_dim: 64,
            cell: CellKind::Lstm,
            activation: Activation::Tanh,
            memory_slots: 32,
            scale_attention: false,
            slot_init: SlotInit::default(),
        }
    }
}

impl ModelDims {
    pub fn model_config(&self, vocab_size: usize, n_classes: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            n_classes,
            cell: self.cell,
            activation: self.activation,
            memory_slots: self.memory_slots,
            scale_attention: self.scale_attention,
            slot_init: self.slot_init,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EwcConfig {
    pub lambda: f64,
    /// Examples per domain used for the Fisher estimate (capped at the
    /// training-set size).
    pub fisher_samples: usize,
}

impl Default for EwcConfig {
    fn default() -> Self {
        EwcConfig {
            lambda: 1.0,
            fisher_samples: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub ewc: EwcConfig,
    /// Training-set tokens rarer than this map to `<unk>`.
    pub min_count: usize,
    /// Dataset directory; when absent the synthetic suite is generated in memory.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthSuite,
    /// Explicit schedule; overrides `method`/`slots`-style construction.
    pub schedule: Option<Vec<ScheduleEntry>>,
    pub method: Option<String>,
    /// Slots added per later domain.
    pub slots: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelDims::default(),
            train: TrainConfig {
                adam: AdamConfig {
                    lr: 3e-3,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
            ewc: EwcConfig::default(),
            min_count: 3,
            data_dir: None,
            synth: SynthSuite::default(),
            schedule: None,
            method: None,
            slots: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
