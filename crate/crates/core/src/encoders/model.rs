use rand::Rng;

use super::config::{AudioEncoderConfig, JointSpaceConfig, TextEncoderConfig};
use crate::audio::MelSpec;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::text::TokenSequence;

/// Added to the norm before dividing during L2 normalization.
pub const NORM_EPS: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Audio,
    Text,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        (fan_in, fan_out): (usize, usize),
        std: f64,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), Tensor::randn([fan_in, fan_out], std, rng), true)?;
        let b = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([fan_out]), false)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// Applies to the last axis of a tensor of any rank.
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let fan_in = *shape.last().ok_or_else(|| Error::NotScalar(shape.clone()))?;
        let rows = shape.iter().product::<usize>() / fan_in.max(1);
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, fan_in])? };
        let w = g.param(store, self.w)?;
        let mut y = g.matmul(flat, w)?;
        if let Some(b) = self.b {
            let b = g.param(store, b)?;
            y = g.add(y, b)?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = g.shape(y)[1];
            g.reshape(y, &out)
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full([width], T::one()), false)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([width]), false)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain)?, g.param(store, self.bias)?);
        g.layer_norm(x, gain, bias, T::of(LN_EPS))
    }
}

fn conv<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, co: usize, ci: usize, k: usize, gain: f64, rng: &mut R) -> Result<ParamId> {
    let std = gain * (2.0 / (ci * k * k) as f64).sqrt();
    store.add(format!("{name}.weight"), Tensor::randn([co, ci, k, k], std, rng), true)
}

#[derive(Debug, Clone)]
struct ResidualStage {
    conv1: ParamId,
    conv2: ParamId,
    shortcut: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct AttentionPool {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct TextBlock {
    ln1: Norm,
    qkv: Linear,
    attn_out: Linear,
    ln2: Norm,
    fc: Linear,
    proj: Linear,
}

#[derive(Debug, Clone)]
struct SslHead {
    hidden: Linear,
    out: Linear,
}

/// Both encoders, the joint projections, the learnable temperature and the
/// optional self-supervised head, with all parameters in one store.
#[derive(Debug, Clone)]
pub struct MusCall<T: Real> {
    pub audio_cfg: AudioEncoderConfig,
    pub text_cfg: TextEncoderConfig,
    pub joint_cfg: JointSpaceConfig,
    pub params: ParamStore<T>,
    stem: [ParamId; 3],
    stages: Vec<ResidualStage>,
    pool: AttentionPool,
    token_embedding: ParamId,
    positional: ParamId,
    blocks: Vec<TextBlock>,
    ln_final: Norm,
    audio_proj: Linear,
    text_proj: Linear,
    logit_scale: ParamId,
    ssl_head: Option<SslHead>,
}

impl<T: Real> MusCall<T> {
    pub fn new<R: Rng>(
        audio_cfg: AudioEncoderConfig,
        text_cfg: TextEncoderConfig,
        joint_cfg: JointSpaceConfig,
        with_ssl_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        audio_cfg.validate()?;
        text_cfg.validate()?;
        joint_cfg.validate()?;
        let mut p = ParamStore::new();
        let s = audio_cfg.stem_channels;
        let stem = [
            conv(&mut p, "audio.stem.0", s[0], 1, 3, 1.0, rng)?,
            conv(&mut p, "audio.stem.1", s[1], s[0], 3, 1.0, rng)?,
            conv(&mut p, "audio.stem.2", s[2], s[1], 3, 1.0, rng)?,
        ];
        let mut stages = Vec::new();
        let mut ci = s[2];
        for (i, &co) in audio_cfg.stage_widths.iter().enumerate() {
            let name = format!("audio.stage.{i}");
            stages.push(ResidualStage {
                conv1: conv(&mut p, &format!("{name}.conv1"), co, ci, 3, 1.0, rng)?,
                // small residual branch at init keeps the stack close to its shortcut path
                conv2: conv(&mut p, &format!("{name}.conv2"), co, co, 3, 0.25, rng)?,
                shortcut: if ci != co {
                    Some(conv(&mut p, &format!("{name}.shortcut"), co, ci, 1, 0.7, rng)?)
                } else {
                    None
                },
            });
            ci = co;
        }
        let fd = audio_cfg.feature_dim();
        let astd = (fd as f64).powf(-0.5);
        let pool = AttentionPool {
            q: Linear::new(&mut p, "audio.pool.q", (fd, fd), astd, true, rng)?,
            k: Linear::new(&mut p, "audio.pool.k", (fd, fd), astd, true, rng)?,
            v: Linear::new(&mut p, "audio.pool.v", (fd, fd), astd, true, rng)?,
            out: Linear::new(&mut p, "audio.pool.out", (fd, fd), astd, true, rng)?,
        };

        let w = text_cfg.width;
        let token_embedding = p.add("text.token_embedding", Tensor::randn([text_cfg.vocab_size, w], 0.02, rng), true)?;
        let positional = p.add("text.positional", Tensor::randn([text_cfg.max_len, w], 0.01, rng), true)?;
        let wstd = (w as f64).powf(-0.5);
        let proj_std = wstd * (2.0 * text_cfg.depth as f64).powf(-0.5);
        let mut blocks = Vec::new();
        for i in 0..text_cfg.depth {
            let name = format!("text.block.{i}");
            blocks.push(TextBlock {
                ln1: Norm::new(&mut p, &format!("{name}.ln1"), w)?,
                qkv: Linear::new(&mut p, &format!("{name}.qkv"), (w, 3 * w), wstd, true, rng)?,
                attn_out: Linear::new(&mut p, &format!("{name}.attn_out"), (w, w), proj_std, true, rng)?,
                ln2: Norm::new(&mut p, &format!("{name}.ln2"), w)?,
                fc: Linear::new(&mut p, &format!("{name}.fc"), (w, 4 * w), (2.0 * w as f64).powf(-0.5), true, rng)?,
                proj: Linear::new(&mut p, &format!("{name}.proj"), (4 * w, w), proj_std, true, rng)?,
            });
        }
        let ln_final = Norm::new(&mut p, "text.ln_final", w)?;
        let e = joint_cfg.embed_dim;
        let audio_proj = Linear::new(&mut p, "audio_proj", (fd, e), astd, false, rng)?;
        let text_proj = Linear::new(&mut p, "text_proj", (w, e), wstd, false, rng)?;
        let logit_scale = p.add("logit_scale", Tensor::scalar(T::of(joint_cfg.logit_scale_init.ln())), false)?;
        let ssl_head = if with_ssl_head {
            Some(SslHead {
                hidden: Linear::new(&mut p, "ssl_head.hidden", (fd, joint_cfg.ssl_hidden), astd, true, rng)?,
                out: Linear::new(
                    &mut p,
                    "ssl_head.out",
                    (joint_cfg.ssl_hidden, joint_cfg.ssl_dim),
                    (joint_cfg.ssl_hidden as f64).powf(-0.5),
                    true,
                    rng,
                )?,
            })
        } else {
            None
        };
        Ok(Self {
            audio_cfg,
            text_cfg,
            joint_cfg,
            params: p,
            stem,
            stages,
            pool,
            token_embedding,
            positional,
            blocks,
            ln_final,
            audio_proj,
            text_proj,
            logit_scale,
            ssl_head,
        })
    }

    pub fn has_ssl_head(&self) -> bool {
        self.ssl_head.is_some()
    }

    pub fn logit_scale_id(&self) -> ParamId {
        self.logit_scale
    }

    /// Current 1/τ.
    pub fn inv_tau(&self) -> f64 {
        self.params.get(self.logit_scale).tensor.data()[0].f64().exp()
    }

    /// Pulls 1/τ back under the configured ceiling.
    pub fn clamp_logit_scale(&mut self) {
        let max = T::of(self.joint_cfg.logit_scale_max.ln());
        let v = &mut self.params.get_mut(self.logit_scale).tensor.data_mut()[0];
        if *v > max {
            *v = max;
        }
    }

    // ----- audio -----

    fn residual(&self, g: &mut Graph<T>, stage: &ResidualStage, x: Var) -> Result<Var> {
        let w1 = g.param(&self.params, stage.conv1)?;
        let h = g.conv2d(x, w1, 1, 1)?;
        let h = g.relu(h)?;
        let w2 = g.param(&self.params, stage.conv2)?;
        let h = g.conv2d(h, w2, 1, 1)?;
        let short = match stage.shortcut {
            Some(id) => {
                let ws = g.param(&self.params, id)?;
                g.conv2d(x, ws, 1, 0)?
            }
            None => x,
        };
        let y = g.add(h, short)?;
        g.relu(y)
    }

    /// Final feature map `[B, C, H', W']` for a mel batch `[B, 1, n_mels, n_frames]`.
    pub fn audio_feature_map(&self, g: &mut Graph<T>, mel: Var) -> Result<Var> {
        let s = g.shape(mel).to_vec();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("encode_audio", &s, &[0, 1, 0, 0]));
        }
        self.audio_cfg.output_hw(s[2], s[3])?;
        let mut x = mel;
        for (i, &id) in self.stem.iter().enumerate() {
            let w = g.param(&self.params, id)?;
            x = g.conv2d(x, w, if i == 0 { 2 } else { 1 }, 1)?;
            x = g.relu(x)?;
        }
        x = g.avg_pool2d(x, 2)?;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                x = if self.audio_cfg.blur_pool_enabled {
                    g.tag("blur_pool");
                    g.blur_pool(x)?
                } else {
                    g.avg_pool2d(x, 2)?
                };
            }
            x = self.residual(g, stage, x)?;
        }
        Ok(x)
    }

    /// Pools `[B, n, d]` tokens: their mean is appended as an extra token
    /// and the attention output at that position is returned as `[B, d]`.
    pub fn attention_pool(&self, g: &mut Graph<T>, tokens: Var) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        let (b, n, d) = (s[0], s[1], s[2]);
        if n == 0 {
            return Err(Error::InvalidArgument("attention pool over zero tokens".into()));
        }
        g.tag("attention_pool");
        let mean = g.mean_axis(tokens, 1)?;
        let mean = g.reshape(mean, &[b, 1, d])?;
        let all = g.concat(&[tokens, mean], 1)?;
        let q = self.pool.q.forward(g, &self.params, mean)?;
        let k = self.pool.k.forward(g, &self.params, all)?;
        let v = self.pool.v.forward(g, &self.params, all)?;
        let a = g.attention(q, k, v, self.audio_cfg.attn_heads, false)?;
        let a = g.reshape(a, &[b, d])?;
        self.pool.out.forward(g, &self.params, a)
    }

    /// Audio features `[B, feature_dim]`.
    pub fn encode_audio(&self, g: &mut Graph<T>, mel: Var) -> Result<Var> {
        let x = self.audio_feature_map(g, mel)?;
        let s = g.shape(x).to_vec();
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.audio_cfg.attn_pool_enabled {
            let t = g.reshape(x, &[b, c, hw])?;
            let t = g.permute(t, &[0, 2, 1])?;
            self.attention_pool(g, t)
        } else {
            g.tag("spatial_mean");
            let t = g.reshape(x, &[b, c, hw])?;
            g.mean_axis(t, 2)
        }
    }

    // ----- text -----

    fn text_block(&self, g: &mut Graph<T>, blk: &TextBlock, x: Var) -> Result<Var> {
        let len = g.shape(x)[1];
        let w = self.text_cfg.width;
        let h = blk.ln1.forward(g, &self.params, x)?;
        let qkv = blk.qkv.forward(g, &self.params, h)?;
        let q = g.slice(qkv, 2, 0, w)?;
        let k = g.slice(qkv, 2, w, 2 * w)?;
        let v = g.slice(qkv, 2, 2 * w, 3 * w)?;
        let a = g.attention(q, k, v, self.text_cfg.heads, true)?;
        let a = blk.attn_out.forward(g, &self.params, a)?;
        let x = g.add(x, a)?;
        let h = blk.ln2.forward(g, &self.params, x)?;
        let h = blk.fc.forward(g, &self.params, h)?;
        let h = g.gelu(h)?;
        let h = blk.proj.forward(g, &self.params, h)?;
        debug_assert_eq!(g.shape(h), [1, len, w]);
        g.add(x, h)
    }

    /// Feature `[1, width]` taken at the end-of-text position. Only tokens up
    /// to that position are read, so the padding never influences the result.
    pub fn encode_text_one(&self, g: &mut Graph<T>, tokens: &TokenSequence) -> Result<Var> {
        if tokens.max_len() > self.text_cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "token sequence of length {} exceeds the encoder's max_len {}",
                tokens.max_len(),
                self.text_cfg.max_len
            )));
        }
        let ids: Vec<usize> = tokens.active().iter().map(|&i| i as usize).collect();
        let len = ids.len();
        let w = self.text_cfg.width;
        let table = g.param(&self.params, self.token_embedding)?;
        let emb = g.embedding(table, &ids)?;
        let pos = g.param(&self.params, self.positional)?;
        let pos = g.slice(pos, 0, 0, len)?;
        let x = g.add(emb, pos)?;
        let mut x = g.reshape(x, &[1, len, w])?;
        for blk in &self.blocks {
            x = self.text_block(g, blk, x)?;
        }
        let last = g.slice(x, 1, len - 1, len)?;
        let last = g.reshape(last, &[1, w])?;
        self.ln_final.forward(g, &self.params, last)
    }

    /// Text features `[B, width]`.
    pub fn encode_text(&self, g: &mut Graph<T>, batch: &[TokenSequence]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty text batch".into()));
        }
        let rows = batch
            .iter()
            .map(|t| self.encode_text_one(g, t))
            .collect::<Result<Vec<_>>>()?;
        if rows.len() == 1 {
            Ok(rows[0])
        } else {
            g.concat(&rows, 0)
        }
    }

    // ----- joint space -----

    /// Linear map (no bias) into the joint space followed by L2 normalization.
    pub fn project(&self, g: &mut Graph<T>, feature: Var, modality: Modality) -> Result<Var> {
        let lin = match modality {
            Modality::Audio => &self.audio_proj,
            Modality::Text => &self.text_proj,
        };
        let z = lin.forward(g, &self.params, feature)?;
        g.l2_normalize(z, T::of(NORM_EPS))
    }

    /// exp of the stored log(1/τ), as a graph scalar.
    pub fn inv_tau_var(&self, g: &mut Graph<T>) -> Result<Var> {
        if self.joint_cfg.learnable_logit_scale {
            let s = g.param(&self.params, self.logit_scale)?;
            g.exp(s)
        } else {
            g.constant(Tensor::scalar(T::of(self.inv_tau())))
        }
    }

    /// Non-linear head for the self-supervised audio branch, L2-normalized.
    pub fn ssl_project(&self, g: &mut Graph<T>, feature: Var) -> Result<Var> {
        let head = self
            .ssl_head
            .as_ref()
            .ok_or_else(|| Error::Config("model was built without the self-supervised head".into()))?;
        let h = head.hidden.forward(g, &self.params, feature)?;
        let h = g.relu(h)?;
        let z = head.out.forward(g, &self.params, h)?;
        g.l2_normalize(z, T::of(NORM_EPS))
    }

    // ----- inference helpers -----

    /// Joint-space audio embeddings for a batch of equally sized mels.
    pub fn embed_audio(&self, mels: &[&MelSpec]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(mel_batch(mels)?)?;
        let f = self.encode_audio(&mut g, x)?;
        let z = self.project(&mut g, f, Modality::Audio)?;
        Ok(rows_f64(g.value(z)))
    }

    /// Joint-space text embeddings.
    pub fn embed_text(&self, batch: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let f = self.encode_text(&mut g, batch)?;
        let z = self.project(&mut g, f, Modality::Text)?;
        Ok(rows_f64(g.value(z)))
    }
}

fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let cols = *t.shape().last().unwrap_or(&1);
    t.data().chunks(cols.max(1)).map(|r| r.iter().map(|v| v.f64()).collect()).collect()
}

/// Stacks equally sized mels into `[B, 1, n_mels, n_frames]`.
pub fn mel_batch<T: Real>(mels: &[&MelSpec]) -> Result<Tensor<T>> {
    let first = mels.first().ok_or_else(|| Error::InvalidArgument("empty mel batch".into()))?;
    let (m, f) = (first.n_mels, first.n_frames);
    let mut data = Vec::with_capacity(mels.len() * m * f);
    for mel in mels {
        if (mel.n_mels, mel.n_frames) != (m, f) {
            return Err(Error::shape("mel_batch", &[m, f], &[mel.n_mels, mel.n_frames]));
        }
        data.extend(mel.bins.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(vec![mels.len(), 1, m, f], data)
}
