//! Caption tokenization and caption-to-caption similarity.

mod bpe;
mod similarity;

pub use bpe::{
    detokenize, normalize_text, tokenize, train_bpe, BpeVocab, SpecialIds, TokenSequence, DEFAULT_MAX_LEN,
};
pub use similarity::{
    caption_similarity, Caption, CaptionSimilarity, EmbeddingTable, SimilarityProvider, SimilaritySign, TfIdf,
};

/// Default number of BPE merges learned on the training captions.
pub const DEFAULT_MERGES: usize = 2000;
