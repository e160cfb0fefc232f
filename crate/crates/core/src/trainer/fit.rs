use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{build_model, Checkpoint};
use super::data::{build_batch, Batch, BatchOptions, Dataset, Pair, Preprocessor};
use super::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::config::{Config, SimilarityKind};
use crate::encoders::{mel_batch, Modality, MusCall};
use crate::error::{Error, Result};
use crate::eval::evaluate_retrieval;
use crate::numcore::{Graph, Real, Var};
use crate::objectives::{bidirectional_loss, multitask_loss, nt_xent, relevance_weights};
use crate::rng::{self, domain};
use crate::text::{CaptionSimilarity, EmbeddingTable, SimilarityProvider, TfIdf};

/// Consecutive non-finite batches tolerated before training aborts.
pub const MAX_BAD_BATCHES: usize = 3;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_r10: f64,
    pub val_map10: f64,
    pub lr: f64,
}

/// The graph pieces of one training step.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub loss: Var,
    pub cross: Var,
    pub za: Var,
    pub zt: Var,
    pub weights: Option<Vec<f64>>,
}

/// Applies the ablation flags and the vocabulary size to a config.
pub fn effective_config(cfg: &Config, vocab_len: usize) -> Config {
    let mut c = cfg.clone();
    c.audio_encoder.attn_pool_enabled = cfg.train.flags.attention_pool;
    c.text_encoder.vocab_size = vocab_len;
    c
}

/// Caption similarity provider for the relevance weights.
pub fn similarity_provider(cfg: &Config, train: &[Pair]) -> Result<SimilarityProvider> {
    match cfg.similarity.kind {
        SimilarityKind::Tfidf => {
            let corpus: Vec<&str> = train.iter().map(|p| p.caption.as_str()).collect();
            Ok(SimilarityProvider::TfIdf(TfIdf::fit(&corpus)?))
        }
        SimilarityKind::External => {
            let path = cfg
                .similarity
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("external similarity needs a path".into()))?;
            Ok(SimilarityProvider::External(EmbeddingTable::load_jsonl(path)?))
        }
    }
}

/// Builds the training objective for `batch` into `g`.
pub fn step_graph<T: Real>(
    g: &mut Graph<T>,
    model: &MusCall<T>,
    batch: &Batch<T>,
    cfg: &Config,
    provider: &dyn CaptionSimilarity,
) -> Result<StepGraph> {
    let flags = cfg.train.flags;
    let mels = g.constant(batch.mels.clone())?;
    let fa = model.encode_audio(g, mels)?;
    let za = model.project(g, fa, Modality::Audio)?;
    let ft = model.encode_text(g, &batch.tokens)?;
    let zt = model.project(g, ft, Modality::Text)?;
    let weights = if flags.loss_weighting {
        let s = &cfg.similarity;
        Some(relevance_weights(&batch.captions, provider, s.kappa, s.normalize, s.include_self, s.sign)?.w)
    } else {
        None
    };
    let inv_tau = model.inv_tau_var(g)?;
    let cross = bidirectional_loss(g, za, zt, inv_tau, weights.as_deref())?;
    let loss = if flags.ssl {
        let views = batch
            .views
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("self-supervised training needs a second view per clip".into()))?;
        let views = g.constant(views.clone())?;
        let fb = model.encode_audio(g, views)?;
        let s1 = model.ssl_project(g, fa)?;
        let s2 = model.ssl_project(g, fb)?;
        let l_ssl = nt_xent(g, s1, s2, cfg.train.ssl_temperature)?;
        multitask_loss(g, l_ssl, cross, cfg.train.lambda_ssl)?
    } else {
        cross
    };
    Ok(StepGraph {
        loss,
        cross,
        za,
        zt,
        weights,
    })
}

/// Joint-space embeddings of a split with center crops and no augmentation.
pub fn embed_pairs<T: Real>(
    model: &MusCall<T>,
    prep: &Preprocessor,
    pairs: &[Pair],
    chunk: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut audio = Vec::with_capacity(pairs.len());
    let mut text = Vec::with_capacity(pairs.len());
    for part in pairs.chunks(chunk.max(1)) {
        let mels = part.iter().map(|p| prep.eval_mel(&p.audio)).collect::<Result<Vec<_>>>()?;
        audio.extend(model.embed_audio(&mels.iter().collect::<Vec<_>>())?);
        let toks = part.iter().map(|p| prep.tokens(&p.caption)).collect::<Result<Vec<_>>>()?;
        text.extend(model.embed_text(&toks)?);
    }
    Ok((audio, text))
}

/// Mean of the text→audio and audio→text R@10.
pub fn mean_r10<T: Real>(model: &MusCall<T>, prep: &Preprocessor, pairs: &[Pair], chunk: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let (a, t) = embed_pairs(model, prep, pairs, chunk)?;
    let [t2a, a2t] = evaluate_retrieval(&a, &t)?;
    Ok(0.5 * (t2a.r_at_10 + a2t.r_at_10))
}

/// Mean over both directions of (R@10, mAP@10).
pub fn validation_scores<T: Real>(model: &MusCall<T>, prep: &Preprocessor, pairs: &[Pair], chunk: usize) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let (a, t) = embed_pairs(model, prep, pairs, chunk)?;
    let [t2a, a2t] = evaluate_retrieval(&a, &t)?;
    Ok((0.5 * (t2a.r_at_10 + a2t.r_at_10), 0.5 * (t2a.map10 + a2t.map10)))
}

/// Model, optimizer and data pipeline for one run.
pub struct Trainer<'a, T: Real> {
    pub cfg: Config,
    pub data: &'a Dataset,
    pub prep: Preprocessor,
    pub model: MusCall<T>,
    pub adam: AdamState,
    provider: SimilarityProvider,
    step: usize,
    bad_batches: usize,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(data: &'a Dataset, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        if data.train.len() < 2 {
            return Err(Error::Data(format!(
                "training split needs at least 2 pairs, got {}",
                data.train.len()
            )));
        }
        if data.valid.is_empty() {
            return Err(Error::Data("validation split is empty".into()));
        }
        let prep = Preprocessor::fit(&data.train, cfg)?;
        let cfg = effective_config(cfg, prep.vocab.len());
        let model = build_model::<T>(&cfg, cfg.train.flags.ssl)?;
        let provider = similarity_provider(&cfg, &data.train)?;
        log::info!(
            "model has {} parameters, vocabulary {} tokens, {} training pairs",
            model.params.num_values(),
            prep.vocab.len(),
            data.train.len()
        );
        Ok(Self {
            adam: AdamState::new(&model.params),
            cfg,
            data,
            prep,
            model,
            provider,
            step: 0,
            bad_batches: 0,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.train.batch_size.min(self.data.train.len())
    }

    /// Shuffled training order for `epoch`, cut into batches. A trailing
    /// batch with fewer than 2 items is dropped.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut rng::stream(self.cfg.train.seed, &[domain::SHUFFLE, epoch as u64]));
        order
            .chunks(self.batch_size())
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.train.max_epochs * self.epoch_batches(0).len()
    }

    pub fn batch(&self, epoch: usize, index: usize, indices: &[usize]) -> Result<Batch<T>> {
        let mut r = rng::stream(self.cfg.train.seed, &[domain::SAMPLE, epoch as u64, index as u64]);
        build_batch(&self.data.train, indices, &self.prep, BatchOptions::training(&self.cfg), &mut r)
    }

    pub fn step_graph(&self, g: &mut Graph<T>, batch: &Batch<T>) -> Result<StepGraph> {
        step_graph(g, &self.model, batch, &self.cfg, &self.provider)
    }

    /// One pass over the training split; `lr_at(step)` gives the step size.
    /// Returns the mean loss over the batches that produced a finite value.
    pub fn train_epoch_with(&mut self, epoch: usize, lr_at: impl Fn(usize) -> Result<f64>) -> Result<f64> {
        let adam_cfg = AdamConfig {
            beta1: self.cfg.train.beta1,
            beta2: self.cfg.train.beta2,
            eps: self.cfg.train.adam_eps,
        };
        let mut total = 0.0;
        let mut count = 0usize;
        for (b, indices) in self.epoch_batches(epoch).iter().enumerate() {
            let batch = self.batch(epoch, b, indices)?;
            let mut g = Graph::new();
            let outcome = self
                .step_graph(&mut g, &batch)
                .and_then(|s| g.backward(s.loss).map(|_| s))
                .and_then(|s| g.accumulate_into(&mut self.model.params).map(|_| s));
            let lr = lr_at(self.step)?;
            self.step += 1;
            let loss = match outcome {
                Ok(s) => g.value(s.loss).data()[0].f64(),
                Err(Error::NonFinite { op }) => {
                    self.model.params.zero_grad();
                    self.bad(epoch, b, format!("non-finite value in {op}"))?;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if !adam_step(&mut self.model.params, &mut self.adam, lr, self.cfg.train.weight_decay, &adam_cfg)? {
                self.bad(epoch, b, "non-finite gradient".into())?;
                continue;
            }
            self.model.clamp_logit_scale();
            self.bad_batches = 0;
            total += loss;
            count += 1;
            log::debug!("epoch {epoch} batch {b}: loss {loss:.5}, lr {lr:.3e}");
        }
        Ok(if count == 0 { f64::NAN } else { total / count as f64 })
    }

    fn bad(&mut self, epoch: usize, batch: usize, detail: String) -> Result<()> {
        self.bad_batches += 1;
        log::warn!("epoch {epoch} batch {batch}: {detail}");
        if self.bad_batches >= MAX_BAD_BATCHES {
            return Err(Error::Diverged {
                epoch,
                batch,
                count: self.bad_batches,
                detail,
            });
        }
        Ok(())
    }

    /// One epoch on the cosine schedule. Returns (mean loss, lr at the epoch's first step).
    pub fn train_epoch(&mut self, epoch: usize) -> Result<(f64, f64)> {
        let total = self.total_steps();
        let lr0 = self.cfg.train.lr;
        let first = cosine_lr(self.step.min(total), total, lr0)?;
        let loss = self.train_epoch_with(epoch, |s| cosine_lr(s.min(total), total, lr0))?;
        Ok((loss, first))
    }

    pub fn validate(&self) -> Result<f64> {
        mean_r10(&self.model, &self.prep, &self.data.valid, self.cfg.train.batch_size)
    }

    /// Validation (R@10, mAP@10), each averaged over both directions.
    pub fn validate_scores(&self) -> Result<(f64, f64)> {
        validation_scores(&self.model, &self.prep, &self.data.valid, self.cfg.train.batch_size)
    }

    pub fn checkpoint(&self, epoch: usize, best_val_r10: f64) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.clone(),
            model: self.model.clone(),
            mel_stats: self.prep.stats.clone(),
            vocab: self.prep.vocab.clone(),
            epoch,
            best_val_r10,
            adam: Some(self.adam.clone()),
        }
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome<T: Real> {
    /// Checkpoint with the highest validation R@10; ties go to the higher
    /// validation mAP@10, then to the earlier epoch.
    pub best: Checkpoint<T>,
    pub log: Vec<EpochLog>,
    pub skipped_steps: usize,
}

/// Trains for `max_epochs`, keeping the checkpoint with the best validation
/// R@10 (mAP@10 breaks ties). Each epoch's [`EpochLog`] is appended to `log_path` as JSONL.
pub fn fit<T: Real>(data: &Dataset, cfg: &Config, log_path: Option<&Path>) -> Result<FitOutcome<T>> {
    let mut trainer = Trainer::<T>::new(data, cfg)?;
    let mut log_file = match log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let mut best: Option<(Checkpoint<T>, f64)> = None;
    let mut history = Vec::new();
    for epoch in 0..trainer.cfg.train.max_epochs {
        let (train_loss, lr) = trainer.train_epoch(epoch)?;
        let (val_r10, val_map10) = trainer.validate_scores()?;
        let entry = EpochLog {
            epoch,
            train_loss,
            val_r10,
            val_map10,
            lr,
        };
        log::info!("epoch {epoch}: loss {train_loss:.4}, val R@10 {val_r10:.4}, mAP@10 {val_map10:.4}, lr {lr:.3e}");
        if let (Some(f), Some(p)) = (log_file.as_mut(), log_path) {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p, e))?;
        }
        history.push(entry);
        let better = best
            .as_ref()
            .map_or(true, |(b, map)| (val_r10, val_map10) > (b.best_val_r10, *map));
        if better {
            best = Some((trainer.checkpoint(epoch, val_r10), val_map10));
        }
    }
    let best = match best {
        Some((b, _)) => b,
        None => trainer.checkpoint(0, f64::NAN),
    };
    Ok(FitOutcome {
        best,
        log: history,
        skipped_steps: trainer.adam.skipped,
    })
}

/// Stacks center-cropped, normalized mels of `pairs` into one batch tensor.
pub fn eval_mels<T: Real>(prep: &Preprocessor, pairs: &[Pair]) -> Result<crate::numcore::Tensor<T>> {
    let mels = pairs.iter().map(|p| prep.eval_mel(&p.audio)).collect::<Result<Vec<_>>>()?;
    mel_batch(&mels.iter().collect::<Vec<_>>())
}
