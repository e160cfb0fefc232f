use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::Preprocessor;
use super::optim::AdamState;
use crate::audio::MelStats;
use crate::config::Config;
use crate::encoders::MusCall;
use crate::error::{Error, Result};
use crate::numcore::{flat_size, read_flat, write_flat, Precision, Real, Tensor};
use crate::rng::{self, domain};
use crate::text::BpeVocab;

const MAGIC: &[u8; 4] = b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const SSL_PREFIX: &str = "ssl_head.";

/// A trained model with everything needed to preprocess inputs for it.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Real> {
    /// Effective configuration (vocabulary size and pooling already resolved).
    pub config: Config,
    pub model: MusCall<T>,
    pub mel_stats: MelStats,
    pub vocab: BpeVocab,
    pub epoch: usize,
    pub best_val_r10: f64,
    pub adam: Option<AdamState>,
}

/// How much of a checkpoint to restore.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Everything, including the self-supervised head and optimizer moments.
    Full,
    /// Encoders and projections only; a stored self-supervised head is ignored.
    EvalOnly,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    precision: Precision,
    config: Config,
    epoch: usize,
    best_val_r10: f64,
    mel_stats: MelStats,
    vocab: serde_json::Value,
    adam_t: Option<u64>,
    adam_skipped: usize,
    tensors: Vec<TensorEntry>,
}

/// Builds an untrained model for `cfg`, initialized from the run seed.
pub fn build_model<T: Real>(cfg: &Config, with_ssl_head: bool) -> Result<MusCall<T>> {
    MusCall::new(
        cfg.audio_encoder.clone(),
        cfg.text_encoder.clone(),
        cfg.joint.clone(),
        with_ssl_head,
        &mut rng::stream(cfg.train.seed, &[domain::INIT]),
    )
}

impl<T: Real> Checkpoint<T> {
    pub fn preprocessor(&self) -> Result<Preprocessor> {
        Preprocessor::new(&self.config, self.mel_stats.clone(), self.vocab.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        let mut push = |name: &str, role: Role, shape: &[usize], precision: Precision| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                role,
                shape: shape.to_vec(),
                offset,
            });
            offset += flat_size(shape, precision) as u64;
        };
        for (_, p) in self.model.params.iter() {
            push(&p.name, Role::Param, p.tensor.shape(), T::PRECISION);
        }
        if let Some(adam) = &self.adam {
            for (role, moments) in [(Role::AdamM, &adam.m), (Role::AdamV, &adam.v)] {
                for ((_, p), m) in self.model.params.iter().zip(moments) {
                    push(&p.name, role, &[m.len()], Precision::F64);
                }
            }
        }
        let manifest = Manifest {
            precision: T::PRECISION,
            config: self.config.clone(),
            epoch: self.epoch,
            best_val_r10: self.best_val_r10,
            mel_stats: self.mel_stats.clone(),
            vocab: serde_json::from_str(&self.vocab.to_json()?)?,
            adam_t: self.adam.as_ref().map(|a| a.t),
            adam_skipped: self.adam.as_ref().map_or(0, |a| a.skipped),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for (_, p) in self.model.params.iter() {
            write_flat(&mut buf, &p.tensor)?;
        }
        if let Some(adam) = &self.adam {
            for moments in [&adam.m, &adam.v] {
                for m in moments {
                    write_flat(&mut buf, &Tensor::<f64>::new(vec![m.len()], m.clone())?)?;
                }
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, mode: LoadMode) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, mode)
    }

    pub fn from_bytes(bytes: &[u8], mode: LoadMode) -> Result<Self> {
        let header = |range: std::ops::Range<usize>, what: &str| {
            bytes.get(range.clone()).ok_or_else(|| Error::Format {
                expected: format!("{} bytes of {what}", range.len()),
                found: format!("file of {} bytes", bytes.len()),
            })
        };
        let magic = header(0..4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                expected: format!("checkpoint magic {MAGIC:?}"),
                found: format!("{magic:?}"),
            });
        }
        let version = u32::from_le_bytes(header(4..8, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                expected: format!("checkpoint version {CHECKPOINT_VERSION}"),
                found: format!("version {version}"),
            });
        }
        let mlen = u64::from_le_bytes(header(8..16, "manifest length")?.try_into().unwrap()) as usize;
        let json = header(16..16usize.saturating_add(mlen), "manifest")?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::Format {
            expected: "checkpoint manifest JSON".into(),
            found: e.to_string(),
        })?;
        if manifest.precision != T::PRECISION {
            return Err(Error::Format {
                expected: format!("precision {:?}", T::PRECISION),
                found: format!("precision {:?}", manifest.precision),
            });
        }
        let payload = &bytes[16 + mlen..];
        let stored_ssl = manifest.tensors.iter().any(|t| t.name.starts_with(SSL_PREFIX));
        let with_ssl = stored_ssl && mode == LoadMode::Full;
        let mut model = build_model::<T>(&manifest.config, with_ssl)?;

        let entry_bytes = |e: &TensorEntry, precision: Precision| -> Result<&[u8]> {
            let start = e.offset as usize;
            let end = start.saturating_add(flat_size(&e.shape, precision));
            payload.get(start..end).ok_or_else(|| Error::Format {
                expected: format!("tensor {} at payload bytes {start}..{end}", e.name),
                found: format!("payload of {} bytes", payload.len()),
            })
        };
        let mut loaded = vec![false; model.params.len()];
        let mut adam = manifest.adam_t.map(|t| {
            let mut a = AdamState::new(&model.params);
            a.t = t;
            a.skipped = manifest.adam_skipped;
            a
        });
        for e in &manifest.tensors {
            let id = match model.params.id(&e.name) {
                Some(id) => id,
                None if e.name.starts_with(SSL_PREFIX) && !with_ssl => continue,
                None => {
                    return Err(Error::Format {
                        expected: "parameter names of the configured model".into(),
                        found: format!("unexpected tensor {}", e.name),
                    })
                }
            };
            match e.role {
                Role::Param => {
                    let t: Tensor<T> = read_flat(&mut entry_bytes(e, T::PRECISION)?)?;
                    let p = model.params.get_mut(id);
                    if t.shape() != p.tensor.shape() {
                        return Err(Error::shape("checkpoint tensor", p.tensor.shape(), t.shape()));
                    }
                    p.tensor.data_mut().copy_from_slice(t.data());
                    loaded[id.index()] = true;
                }
                Role::AdamM | Role::AdamV => {
                    let t: Tensor<f64> = read_flat(&mut entry_bytes(e, Precision::F64)?)?;
                    if let Some(a) = adam.as_mut() {
                        let slot = if e.role == Role::AdamM { &mut a.m } else { &mut a.v };
                        if slot[id.index()].len() != t.len() {
                            return Err(Error::shape("checkpoint moments", &[slot[id.index()].len()], t.shape()));
                        }
                        slot[id.index()] = t.into_data();
                    }
                }
            }
        }
        if let Some(i) = loaded.iter().position(|l| !l) {
            let name = model.params.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
            return Err(Error::Format {
                expected: format!("tensor {name}"),
                found: "no such entry in checkpoint".into(),
            });
        }
        if mode == LoadMode::EvalOnly {
            adam = None;
        }
        Ok(Self {
            vocab: BpeVocab::from_json(&manifest.vocab.to_string())?,
            config: manifest.config,
            model,
            mel_stats: manifest.mel_stats,
            epoch: manifest.epoch,
            best_val_r10: manifest.best_val_r10,
            adam,
        })
    }
}
