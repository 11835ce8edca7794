pub mod akm;
pub mod boxes;
pub mod error;
pub mod image;
pub mod io;
mod linalg;
pub mod metrics;
pub mod params;
pub mod selftest;
pub mod pipeline;
pub mod tensor;
pub mod wavelet;
pub mod wdaf;

pub use akm::{akm_forward, measurement_loss, AkmConfig, AlphaWeights, AttentionP, DistanceMode};
pub use boxes::{BBox, Detection, GroundTruthBox};
pub use error::{Error, Result};
pub use image::GrayImage;
pub use io::config::RunConfig;
pub use metrics::{average_precision, evaluate, iou, mean_ap, EvalResult};
pub use params::Parameterized;
pub use pipeline::model::{fusion_stack, Model, ModelConfig, ModelParams};
pub use pipeline::synth::{synth_pair, Parallax, SynthConfig, SynthSample};
pub use pipeline::train::{train, EpochRecord, TrainConfig};
pub use tensor::{Branch, FeatureMap, FlatFeature, KernelSet};
pub use wavelet::{dwt2_channelwise, idwt2_channelwise, WaveletFeature};
pub use wdaf::{wdaf_forward, WdafParams};
