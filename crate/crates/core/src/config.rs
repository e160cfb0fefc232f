//! Run configuration: one JSON document with named presets.
//!
//! A config file maps preset names to partial documents. Each entry may name a
//! `base` preset (built-in `"desk"` or `"paper"`, or another entry in the
//! file); its fields are deep-merged over the base. Unknown fields are
//! rejected.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{AugmentConfig, MelConfig};
use crate::encoders::{AudioEncoderConfig, JointSpaceConfig, TextEncoderConfig};
use crate::error::{Error, Result};
use crate::numcore::Precision;
use crate::objectives::{DEFAULT_KAPPA, DEFAULT_LAMBDA, SSL_TEMPERATURE};
use crate::text::{SimilaritySign, DEFAULT_MERGES};

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub loss_weighting: bool,
    pub random_crop: bool,
    pub audio_aug: bool,
    pub attention_pool: bool,
    pub ssl: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            loss_weighting: true,
            random_crop: true,
            audio_aug: true,
            attention_pool: true,
            ssl: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub lambda_ssl: f64,
    pub ssl_temperature: f64,
    pub flags: Flags,
    pub seed: u64,
    pub crop_seconds: f64,
    pub precision: Precision,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 5e-5,
            weight_decay: 0.2,
            max_epochs: 150,
            lambda_ssl: DEFAULT_LAMBDA,
            ssl_temperature: SSL_TEMPERATURE,
            flags: Flags::default(),
            seed: 0,
            crop_seconds: 4.0,
            precision: Precision::F32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive and weight_decay non-negative, got {} and {}",
                self.lr, self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda_ssl) {
            return Err(Error::Config(format!("lambda_ssl must lie in [0, 1], got {}", self.lambda_ssl)));
        }
        if !(self.crop_seconds > 0.0) || !(self.ssl_temperature > 0.0) {
            return Err(Error::Config("crop_seconds and ssl_temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Tfidf,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub kind: SimilarityKind,
    /// JSONL embedding file for the external provider.
    pub path: Option<String>,
    pub sign: SimilaritySign,
    pub kappa: f64,
    pub normalize: bool,
    pub include_self: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::Tfidf,
            path: None,
            sign: SimilaritySign::Similarity,
            kappa: DEFAULT_KAPPA,
            normalize: true,
            include_self: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub merges: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            merges: DEFAULT_MERGES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            valid: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub mel: MelConfig,
    pub augment: AugmentConfig,
    pub tokenizer: TokenizerConfig,
    pub audio_encoder: AudioEncoderConfig,
    pub text_encoder: TextEncoderConfig,
    pub joint: JointSpaceConfig,
    pub train: TrainConfig,
    pub similarity: SimilarityConfig,
    pub split: SplitConfig,
}

impl Config {
    /// Laptop-scale preset.
    pub fn desk() -> Self {
        Self {
            mel: MelConfig {
                hop: 512,
                n_mels: 64,
                ..Default::default()
            },
            audio_encoder: AudioEncoderConfig {
                stem_channels: [8, 8, 16],
                stage_widths: vec![16, 32, 64, 128],
                ..Default::default()
            },
            text_encoder: TextEncoderConfig {
                width: 128,
                ..Default::default()
            },
            joint: JointSpaceConfig {
                embed_dim: 128,
                ssl_hidden: 128,
                ..Default::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                max_epochs: 50,
                ..Default::default()
            },
            similarity: SimilarityConfig {
                kappa: 0.2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    /// Published-scale settings.
    pub fn paper() -> Self {
        Self {
            audio_encoder: AudioEncoderConfig {
                stem_channels: [32, 32, 64],
                stage_widths: vec![64, 128, 256, 512],
                attn_heads: 8,
                ..Default::default()
            },
            text_encoder: TextEncoderConfig {
                width: 512,
                heads: 8,
                ..Default::default()
            },
            joint: JointSpaceConfig::default(),
            train: TrainConfig {
                batch_size: 256,
                crop_seconds: 20.0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.augment.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.audio_encoder.validate()?;
        self.text_encoder.validate()?;
        self.joint.validate()?;
        self.train.validate()?;
        if !(self.similarity.kappa > 0.0) {
            return Err(Error::Config(format!("similarity.kappa must be positive, got {}", self.similarity.kappa)));
        }
        if self.similarity.kind == SimilarityKind::External && self.similarity.path.is_none() {
            return Err(Error::Config("similarity.kind = external needs similarity.path".into()));
        }
        if self.tokenizer.merges == 0 {
            return Err(Error::Config("tokenizer.merges must be positive".into()));
        }
        let s = &self.split;
        if [s.train, s.valid, s.test].iter().any(|v| !(*v >= 0.0)) || (s.train + s.valid + s.test - 1.0).abs() > 1e-9 || s.train == 0.0 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative, sum to 1 and include training data: {s:?}"
            )));
        }
        let min = self.audio_encoder.min_input_hw();
        let frames = self.mel.n_frames(crate::audio::crop_len(self.train.crop_seconds, self.mel.sample_rate));
        if self.mel.n_mels < min.0 || frames.map_or(true, |f| f < min.1) {
            return Err(Error::Config(format!(
                "a {}s crop gives a {}x{:?} mel, below the encoder minimum {}x{}",
                self.train.crop_seconds, self.mel.n_mels, frames, min.0, min.1
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// A config file: preset name → partial config (with optional `base`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub default_preset: Option<String>,
    #[serde(default)]
    pub presets: BTreeMap<String, Value>,
}

impl ConfigFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Resolves `name` (or the file's default, or `"desk"`) to a validated config.
    pub fn resolve(&self, name: Option<&str>) -> Result<Config> {
        let name = name.or(self.default_preset.as_deref()).unwrap_or("desk");
        let value = self.resolve_value(name, 0)?;
        let cfg: Config = serde_json::from_value(value).map_err(|e| Error::Config(format!("preset {name}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_value(&self, name: &str, depth: usize) -> Result<Value> {
        if depth > 16 {
            return Err(Error::Config(format!("preset {name}: base chain too deep or cyclic")));
        }
        let Some(entry) = self.presets.get(name) else {
            return Config::builtin(name)
                .map(|c| serde_json::to_value(c).expect("config serializes"))
                .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")));
        };
        let mut patch = entry.clone();
        let base_name = match patch.as_object_mut().and_then(|o| o.remove("base")) {
            Some(Value::String(b)) => b,
            Some(other) => return Err(Error::Config(format!("preset {name}: base must be a string, got {other}"))),
            None => "desk".to_string(),
        };
        let mut base = if base_name == name {
            Config::builtin(name)
                .map(|c| serde_json::to_value(c).expect("config serializes"))
                .ok_or_else(|| Error::Config(format!("preset {name} cannot be its own base")))?
        } else {
            self.resolve_value(&base_name, depth + 1)?
        };
        merge(&mut base, &patch);
        Ok(base)
    }
}

/// Resolves a preset from an optional config file.
pub fn resolve_config(path: Option<&Path>, preset: Option<&str>) -> Result<Config> {
    match path {
        Some(p) => ConfigFile::load(p)?.resolve(preset),
        None => ConfigFile::default().resolve(preset),
    }
}
