use serde::{Deserialize, Serialize};

use super::classify::argmax;
use super::retrieval::score_matrix;
use crate::encoders::MusCall;
use crate::error::{Error, Result};
use crate::numcore::Real;
use crate::text::{tokenize, BpeVocab};

pub const LABEL_PLACEHOLDER: &str = "{label}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotTask {
    pub labels: Vec<String>,
    /// For example `"a {label} track"`.
    pub prompt_template: Option<String>,
    pub multilabel: bool,
}

impl ZeroShotTask {
    pub fn new(labels: Vec<String>, prompt_template: Option<String>, multilabel: bool) -> Result<Self> {
        let t = Self {
            labels,
            prompt_template,
            multilabel,
        };
        t.prompts()?;
        Ok(t)
    }

    /// Label texts after template wrapping.
    pub fn prompts(&self) -> Result<Vec<String>> {
        if self.labels.is_empty() {
            return Err(Error::InvalidArgument("zero-shot task has no labels".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for l in &self.labels {
            if !seen.insert(l) {
                return Err(Error::InvalidArgument(format!("duplicate zero-shot label {l:?}")));
            }
        }
        match &self.prompt_template {
            None => Ok(self.labels.clone()),
            Some(t) if t.contains(LABEL_PLACEHOLDER) => {
                Ok(self.labels.iter().map(|l| t.replace(LABEL_PLACEHOLDER, l)).collect())
            }
            Some(t) => Err(Error::InvalidArgument(format!(
                "prompt template {t:?} lacks the {LABEL_PLACEHOLDER} placeholder"
            ))),
        }
    }
}

/// Cosine scores `[n_audio, n_labels]` between audio embeddings and the
/// embedded (optionally prompt-wrapped) labels.
pub fn zero_shot_classify<T: Real>(
    audio: &[Vec<f64>],
    task: &ZeroShotTask,
    model: &MusCall<T>,
    vocab: &BpeVocab,
) -> Result<Vec<Vec<f64>>> {
    let toks = task
        .prompts()?
        .iter()
        .map(|p| tokenize(p, vocab, model.text_cfg.max_len))
        .collect::<Result<Vec<_>>>()?;
    let classes = model.embed_text(&toks)?;
    let normed: Vec<Vec<f64>> = audio
        .iter()
        .map(|a| {
            let n = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            a.iter().map(|v| v / n).collect()
        })
        .collect();
    score_matrix(&normed, &classes)
}

/// Single-label predictions from a score matrix.
pub fn predict(scores: &[Vec<f64>]) -> Vec<usize> {
    scores.iter().map(|r| argmax(r).unwrap_or(0)).collect()
}
