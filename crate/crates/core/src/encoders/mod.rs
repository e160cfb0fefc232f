//! Audio and text encoders and the joint embedding space.

mod config;
mod model;

pub use config::{AudioEncoderConfig, JointSpaceConfig, TextEncoderConfig};
pub use model::{mel_batch, Modality, MusCall, NORM_EPS};
