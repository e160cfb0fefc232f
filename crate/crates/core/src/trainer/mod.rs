//! Batching, optimization, model selection and checkpoints.

mod checkpoint;
mod data;
mod fit;
mod optim;

pub use checkpoint::{build_model, Checkpoint, LoadMode, CHECKPOINT_VERSION};
pub use data::{assign_splits, build_batch, Batch, BatchOptions, Dataset, Pair, Preprocessor, Split};
pub use fit::{
    effective_config, embed_pairs, eval_mels, fit, mean_r10, similarity_provider, step_graph, validation_scores, EpochLog, FitOutcome,
    StepGraph, Trainer, MAX_BAD_BATCHES,
};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};

#[cfg(test)]
mod tests;
