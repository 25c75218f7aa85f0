//! Run configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SynthSpec, Task};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::{AuxAggregation, LossWeights};
use crate::pretrain::PretrainConfig;
use crate::smop::{SmopConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    /// Drives projector/adapter init and batch order.
    pub seed: u64,
    /// Drives the frozen decoder weights.
    pub decoder_seed: u64,
    /// Drives dataset generation.
    pub data_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` picks 1e-3 for ASR/AVSR and 5e-4 for VSR.
    pub learning_rate: Option<f64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub alpha_b: f64,
    pub alpha_z: f64,
    pub aux_aggregation: AuxAggregation,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub max_decode_len: usize,
    pub smop: SmopConfig,
    pub decoder: DecoderConfig,
    /// Copy-task pretraining applied to the decoder base before freezing.
    pub pretrain: PretrainConfig,
    pub data: SynthSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::Avsr,
            seed: 17,
            decoder_seed: 1,
            data_seed: 2024,
            epochs: 10,
            batch_size: 16,
            learning_rate: None,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            alpha_b: 0.01,
            alpha_z: 0.001,
            aux_aggregation: AuxAggregation::Mean,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            max_decode_len: 16,
            smop: SmopConfig::default(),
            decoder: DecoderConfig::default(),
            pretrain: PretrainConfig::default(),
            data: SynthSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Audio-only recognition with a single router and pool of 4 experts.
    pub fn asr() -> Self {
        Self {
            task: Task::Asr,
            smop: SmopConfig::with_variant(Variant::Jejr),
            ..Self::default()
        }
    }

    pub fn lr(&self) -> f64 {
        self.learning_rate.unwrap_or(match self.task {
            Task::Vsr => 5e-4,
            Task::Asr | Task::Avsr => 1e-3,
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha_b: self.alpha_b,
            alpha_z: self.alpha_z,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.smop.validate()?;
        self.decoder.validate()?;
        self.data.validate()?;
        self.pretrain.validate(self.decoder.max_positions)?;
        self.loss_weights().validate()?;
        if self.smop.d_audio != self.data.d_audio || self.smop.d_video != self.data.d_video {
            return Err(Error::Config(format!(
                "projector dims ({}, {}) do not match data dims ({}, {})",
                self.smop.d_audio, self.smop.d_video, self.data.d_audio, self.data.d_video
            )));
        }
        if self.smop.d_llm != self.decoder.d_model {
            return Err(Error::Config(format!(
                "d_llm {} does not match decoder d_model {}",
                self.smop.d_llm, self.decoder.d_model
            )));
        }
        if self.decoder.n_symbols != self.data.n_symbols {
            return Err(Error::Config("decoder and data symbol counts differ".into()));
        }
        if self.batch_size == 0 || self.n_train == 0 || self.max_decode_len == 0 {
            return Err(Error::Config(
                "batch_size, n_train and max_decode_len must be positive".into(),
            ));
        }
        if [self.lr(), self.weight_decay].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::Config("learning rate and weight decay must be >= 0".into()));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
