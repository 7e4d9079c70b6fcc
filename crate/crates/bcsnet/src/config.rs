//! `TrainConfig`, read from a flat TOML file.

use std::path::{Path, PathBuf};

use bcsnet_core::decoder::{Ablation, DecoderConfig};
use bcsnet_core::encoder::EncoderConfig;
use bcsnet_core::model::ModelConfig;
use bcsnet_core::optim::AdamConfig;
use bcsnet_core::train::TrainHyper;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prefix of the `dataset` value selecting generated data.
pub const SYNTHETIC_PREFIX: &str = "synthetic:";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `[height, width]`, both multiples of 16.
    pub image_size: [usize; 2],
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub seed: u64,
    pub disable_aggc: bool,
    pub disable_sg: bool,
    pub encoder_channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub decoder_width: usize,
    pub boundary_width: usize,
    /// Dataset root directory, or `synthetic:<n>`.
    pub dataset: String,
    /// Where the final checkpoint goes.
    pub checkpoint: PathBuf,
    /// Also write a checkpoint every this many epochs; 0 disables.
    pub save_every: usize,
    /// Optional CSV with one row per epoch.
    pub loss_curve: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        let dec = DecoderConfig::default();
        let adam = AdamConfig::default();
        TrainConfig {
            image_size: [enc.input_size.0, enc.input_size.1],
            batch_size: 8,
            epochs: 200,
            learning_rate: adam.learning_rate,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            seed: 0,
            disable_aggc: false,
            disable_sg: false,
            encoder_channels: enc.channels,
            blocks_per_stage: enc.blocks_per_stage,
            decoder_width: dec.width,
            boundary_width: dec.boundary_width,
            dataset: "synthetic:20".into(),
            checkpoint: PathBuf::from("bcsnet.ckpt"),
            save_every: 0,
            loss_curve: None,
        }
    }
}

/// Where training records come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic(usize),
    Dir(PathBuf),
}

impl TrainConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> bcsnet_core::Result<()> {
        self.model_config().encoder.validate()?;
        self.hyper().validate()?;
        if self.decoder_width == 0 || self.boundary_width == 0 {
            return Err(bcsnet_core::Error::Validation("decoder widths must be positive".into()));
        }
        self.source()?;
        Ok(())
    }

    pub fn source(&self) -> bcsnet_core::Result<DatasetSource> {
        match self.dataset.strip_prefix(SYNTHETIC_PREFIX) {
            Some(n) => match n.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(DatasetSource::Synthetic(n)),
                _ => Err(bcsnet_core::Error::Validation(format!(
                    "dataset `{}`: expected {SYNTHETIC_PREFIX}<n> with n >= 1",
                    self.dataset
                ))),
            },
            None if self.dataset.is_empty() => Err(bcsnet_core::Error::Validation("dataset is empty".into())),
            None => Ok(DatasetSource::Dir(PathBuf::from(&self.dataset))),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                channels: self.encoder_channels,
                input_size: (self.image_size[0], self.image_size[1]),
                blocks_per_stage: self.blocks_per_stage,
            },
            decoder: DecoderConfig {
                width: self.decoder_width,
                boundary_width: self.boundary_width,
            },
            ablation: Ablation {
                disable_aggc: self.disable_aggc,
                disable_sg: self.disable_sg,
            },
        }
    }

    pub fn hyper(&self) -> TrainHyper {
        TrainHyper {
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                ..AdamConfig::default()
            },
            seed: self.seed,
            ..TrainHyper::default()
        }
    }
}
