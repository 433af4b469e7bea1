//! Speaker identification from looped, fixed-duration log-mel images.

pub mod audio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod identification;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use audio::AudioClip;
pub use config::RunConfig;
pub use dataset::{Manifest, Split, SynthSpec};
pub use error::{Error, Result};
pub use features::{FeatureTensor, Geometry};
pub use losses::{LossConfig, LossFamily};
pub use nn::{Checkpoint, HeadKind, Model, NetworkConfig, Tensor};
pub use training::{EpochRecord, Examples, TrainConfig};
