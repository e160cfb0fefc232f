//! Contrastive audio-language learning for music.
//!
//! A dual-encoder model maps log-mel spectrograms and caption tokens into a
//! shared L2-normalized embedding space. Training uses a symmetric InfoNCE
//! objective with optional caption-relevance weighting and an optional
//! SimCLR-style audio branch; the resulting space supports text-to-audio and
//! audio-to-text retrieval as well as zero-shot classification through
//! prompt-wrapped labels.
//!
//! Modules, bottom-up:
//!
//! - [`numcore`]: tensors and a reverse-mode computation graph.
//! - [`audio`]: WAV decoding, cropping, augmentation and mel spectrograms.
//! - [`text`]: byte-level BPE and caption similarity providers.
//! - [`encoders`]: the audio and text encoders and the joint projections.
//! - [`objectives`]: contrastive, weighted and self-supervised losses.
//! - [`trainer`]: batching, Adam with a cosine schedule, model selection and checkpoints.
//! - [`eval`]: retrieval ranking, retrieval and classification metrics, zero-shot transfer.

pub mod audio;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod numcore;
pub mod rng;
pub mod objectives;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
