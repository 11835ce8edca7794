//! JSON run configuration. Unknown keys are rejected; missing keys take
//! their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::akm::AkmConfig;
use crate::error::{Error, Result};
use crate::pipeline::encoder::EncoderConfig;
use crate::pipeline::model::{ModelConfig, DEFAULT_ATTENTION_KERNEL, DEFAULT_LAMBDA_M};
use crate::pipeline::synth::{Parallax, SynthConfig};
use crate::pipeline::train::{AdamConfig, TrainConfig, DEFAULT_LR};
use crate::wdaf::{DEFAULT_C_MID_FACTOR, MULTISCALE_KERNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub k_top: usize,
    pub attention_kernel: usize,
    pub multiscale_kernels: Vec<usize>,
    pub c_mid_factor: usize,
    pub lambda_m: f64,
    pub scales: usize,
    pub image_size: usize,
    pub parallax: Parallax,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k_top: crate::akm::DEFAULT_K_TOP,
            attention_kernel: DEFAULT_ATTENTION_KERNEL,
            multiscale_kernels: MULTISCALE_KERNELS.to_vec(),
            c_mid_factor: DEFAULT_C_MID_FACTOR,
            lambda_m: DEFAULT_LAMBDA_M,
            scales: 3,
            image_size: 64,
            parallax: Parallax::Large,
            lr: DEFAULT_LR,
            epochs: 10,
            batch: 1,
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.multiscale_kernels != MULTISCALE_KERNELS {
            return Err(Error::config(format!(
                "multiscale_kernels must be {MULTISCALE_KERNELS:?}, got {:?}",
                self.multiscale_kernels
            )));
        }
        if !(1..=3).contains(&self.scales) {
            return Err(Error::config(format!("scales must be 1-3, got {}", self.scales)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be positive"));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::with_scales(self.scales),
            akm: AkmConfig {
                k_top: self.k_top,
                ..AkmConfig::default()
            },
            attention_kernel: self.attention_kernel,
            c_mid_factor: self.c_mid_factor,
            lambda_m: self.lambda_m,
            image_size: self.image_size,
            ..ModelConfig::default()
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            parallax: self.parallax,
            ..SynthConfig::default()
        }
    }

    pub fn train_config(&self, train_samples: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            train_samples,
            synth: self.synth_config(),
            adam: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
        }
    }
}
