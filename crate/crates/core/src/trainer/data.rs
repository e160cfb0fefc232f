use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{augment, crop, AudioClip, AugmentConfig, CropMode, MelExtractor, MelSpec, MelStats};
use crate::config::{Config, SplitConfig};
use crate::encoders::mel_batch;
use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};
use crate::rng::{self, domain};
use crate::text::{tokenize, train_bpe, BpeVocab, Caption, TokenSequence};

/// One audio clip with its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub audio: AudioClip,
    pub caption: String,
}

impl Pair {
    pub fn caption(&self) -> Caption {
        Caption::new(self.id.clone(), self.caption.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    /// Partitions `pairs` by an explicit id → split assignment.
    pub fn from_assignments(pairs: Vec<Pair>, splits: &HashMap<String, Split>) -> Result<Self> {
        check_unique(&pairs)?;
        let mut ds = Dataset::default();
        for p in pairs {
            let split = splits
                .get(&p.id)
                .ok_or_else(|| Error::Data(format!("pair {} has no split assignment", p.id)))?;
            ds.get_mut(*split).push(p);
        }
        Ok(ds)
    }

    /// Seeded random partition with the given fractions (see [`assign_splits`]).
    /// Pairs keep their input order within each split.
    pub fn random_split(pairs: Vec<Pair>, fractions: &SplitConfig, seed: u64) -> Result<Self> {
        check_unique(&pairs)?;
        let splits = assign_splits(pairs.len(), fractions, seed);
        let mut ds = Dataset::default();
        for (p, s) in pairs.into_iter().zip(splits) {
            ds.get_mut(s).push(p);
        }
        Ok(ds)
    }

    pub fn get(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<Pair> {
        match split {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    /// id → split for every pair.
    pub fn assignments(&self) -> Vec<(String, Split)> {
        [Split::Train, Split::Valid, Split::Test]
            .iter()
            .flat_map(|&s| self.get(s).iter().map(move |p| (p.id.clone(), s)))
            .collect()
    }
}

/// Split of each of `n` items: a seeded permutation whose first
/// `round(n·train)` entries train, the next `round(n·valid)` validate, and the
/// rest test.
pub fn assign_splits(n: usize, fractions: &SplitConfig, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[domain::SPLIT]));
    let n_train = (((n as f64) * fractions.train).round() as usize).min(n);
    let n_valid = (((n as f64) * fractions.valid).round() as usize).min(n - n_train);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            out[i] = Split::Train;
        } else if rank < n_train + n_valid {
            out[i] = Split::Valid;
        }
    }
    out
}

fn check_unique(pairs: &[Pair]) -> Result<()> {
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert(p.id.as_str()) {
            return Err(Error::Data(format!("duplicate pair id {}", p.id)));
        }
    }
    Ok(())
}

/// Cropping, mel extraction with normalization, and tokenization.
pub struct Preprocessor {
    pub mel: MelExtractor,
    pub stats: MelStats,
    pub vocab: BpeVocab,
    pub crop_seconds: f64,
    pub augment: AugmentConfig,
    pub max_len: usize,
}

impl Preprocessor {
    pub fn new(cfg: &Config, stats: MelStats, vocab: BpeVocab) -> Result<Self> {
        if stats.mean.len() != cfg.mel.n_mels {
            return Err(Error::shape("mel stats", &[cfg.mel.n_mels], &[stats.mean.len()]));
        }
        Ok(Self {
            mel: MelExtractor::new(&cfg.mel)?,
            stats,
            vocab,
            crop_seconds: cfg.train.crop_seconds,
            augment: cfg.augment.clone(),
            max_len: cfg.text_encoder.max_len,
        })
    }

    /// Learns the BPE vocabulary and mel statistics from the training pairs.
    pub fn fit(train: &[Pair], cfg: &Config) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let captions: Vec<&str> = train.iter().map(|p| p.caption.as_str()).collect();
        let vocab = train_bpe(&captions, 256 + cfg.tokenizer.merges)?;
        let mel = MelExtractor::new(&cfg.mel)?;
        let specs = train
            .iter()
            .map(|p| mel.melspectrogram(&center(&p.audio, cfg.train.crop_seconds)?))
            .collect::<Result<Vec<_>>>()?;
        let stats = MelStats::fit(&specs)?;
        Self::new(cfg, stats, vocab)
    }

    /// Normalized mel of an already cropped clip.
    pub fn mel_of(&self, clip: &AudioClip) -> Result<MelSpec> {
        let mut spec = self.mel.melspectrogram(clip)?;
        self.stats.normalize(&mut spec)?;
        Ok(spec)
    }

    /// Center crop, no augmentation.
    pub fn eval_mel(&self, clip: &AudioClip) -> Result<MelSpec> {
        self.mel_of(&center(clip, self.crop_seconds)?)
    }

    pub fn tokens(&self, text: &str) -> Result<TokenSequence> {
        tokenize(text, &self.vocab, self.max_len)
    }
}

fn center(clip: &AudioClip, seconds: f64) -> Result<AudioClip> {
    crop::<rand_chacha::ChaCha8Rng>(clip, seconds, CropMode::Center, None)
}

/// Per-batch switches taken from the ablation flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOptions {
    pub random_crop: bool,
    pub audio_aug: bool,
    /// Also produce a second view of each crop. Both views are then augmented
    /// whatever `audio_aug` says.
    pub ssl_views: bool,
}

impl BatchOptions {
    pub fn training(cfg: &Config) -> Self {
        let f = cfg.train.flags;
        Self {
            random_crop: f.random_crop,
            audio_aug: f.audio_aug,
            ssl_views: f.ssl,
        }
    }

    pub fn eval() -> Self {
        Self {
            random_crop: false,
            audio_aug: false,
            ssl_views: false,
        }
    }
}

/// In-batch instance discrimination: row i of `mels` and `tokens` form the
/// only positive pair for each other; every other row is a negative.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub mels: Tensor<T>,
    pub views: Option<Tensor<T>>,
    pub tokens: Vec<TokenSequence>,
    pub captions: Vec<Caption>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Builds one batch from `pairs[indices]`. Each item gets its own sub-stream
/// drawn from `rng`, so the result depends only on the rng state.
pub fn build_batch<T: Real, R: Rng + ?Sized>(
    pairs: &[Pair],
    indices: &[usize],
    prep: &Preprocessor,
    opts: BatchOptions,
    rng: &mut R,
) -> Result<Batch<T>> {
    let mut seen = HashSet::new();
    for &i in indices {
        if i >= pairs.len() {
            return Err(Error::IndexOutOfRange {
                what: "dataset",
                index: i,
                size: pairs.len(),
            });
        }
        if !seen.insert(i) {
            return Err(Error::InvalidArgument(format!("index {i} appears twice in one batch")));
        }
    }
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut mels = Vec::with_capacity(indices.len());
    let mut views = Vec::new();
    let mut tokens = Vec::with_capacity(indices.len());
    let mut captions = Vec::with_capacity(indices.len());
    for &i in indices {
        let pair = &pairs[i];
        let mut item = rng::stream(rng.gen(), &[]);
        let cropped = if opts.random_crop {
            crop(&pair.audio, prep.crop_seconds, CropMode::Random, Some(&mut item))?
        } else {
            center(&pair.audio, prep.crop_seconds)?
        };
        let view = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<MelSpec> {
            if opts.audio_aug || opts.ssl_views {
                prep.mel_of(&augment(&cropped, &prep.augment, rng)?)
            } else {
                prep.mel_of(&cropped)
            }
        };
        mels.push(view(&mut item)?);
        if opts.ssl_views {
            views.push(view(&mut item)?);
        }
        tokens.push(prep.tokens(&pair.caption)?);
        captions.push(pair.caption());
    }
    let mels_t = mel_batch(&mels.iter().collect::<Vec<_>>())?;
    let views = if opts.ssl_views {
        Some(mel_batch(&views.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    Ok(Batch {
        indices: indices.to_vec(),
        mels: mels_t,
        views,
        tokens,
        captions,
    })
}
