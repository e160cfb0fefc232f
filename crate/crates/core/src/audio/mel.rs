use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};
use crate::numcore::{read_flat, write_flat, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    pub log_offset: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            window: 1024,
            hop: 256,
            n_mels: 128,
            f_min: 0.0,
            f_max: None,
            log_offset: 1e-5,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.window < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::Config(format!("invalid mel configuration {self:?}")));
        }
        if self.f_max() <= self.f_min || self.log_offset <= 0.0 {
            return Err(Error::Config(format!("invalid mel band edges or log offset in {self:?}")));
        }
        Ok(())
    }

    pub fn f_max(&self) -> f64 {
        self.f_max.unwrap_or(self.sample_rate as f64 / 2.0)
    }

    /// Frames produced for a clip of `len` samples (no centering or padding).
    pub fn n_frames(&self, len: usize) -> Option<usize> {
        len.checked_sub(self.window).map(|r| 1 + r / self.hop)
    }

    /// Samples needed for `frames` frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        self.window + (frames.max(1) - 1) * self.hop
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Log-mel time-frequency matrix, stored mel-major (`bins[m * n_frames + t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub bins: Vec<f32>,
    pub n_mels: usize,
    pub n_frames: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MelSpec {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.bins[mel * self.n_frames + frame]
    }

    /// Mean over frames of each mel bin.
    pub fn frame_mean(&self) -> Vec<f64> {
        (0..self.n_mels)
            .map(|m| {
                self.bins[m * self.n_frames..(m + 1) * self.n_frames]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / self.n_frames as f64
            })
            .collect()
    }
}

struct Triangle {
    start: usize,
    weights: Vec<f64>,
}

/// Triangular filters with unit peak, spanning `n_mels + 2` mel-spaced edges.
pub struct MelFilterbank {
    filters: Vec<Triangle>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.window / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max()));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bin_hz = cfg.sample_rate as f64 / cfg.window as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut start = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > left && f <= center {
                        (f - left) / (center - left)
                    } else if f > center && f < right {
                        (right - f) / (right - center)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        start.get_or_insert(k);
                        weights.push(w);
                    } else if start.is_some() {
                        break;
                    }
                }
                Triangle {
                    start: start.unwrap_or(0),
                    weights,
                }
            })
            .collect();
        Self {
            filters,
            centers_hz: edges[1..cfg.n_mels + 1].to_vec(),
        }
    }

    /// Peak frequency of each filter.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, tri) in out.iter_mut().zip(&self.filters) {
            *o = tri
                .weights
                .iter()
                .zip(&power[tri.start..])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Reusable STFT and filterbank state for one [`MelConfig`].
pub struct MelExtractor {
    cfg: MelConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    bank: MelFilterbank,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.window;
        // periodic Hann
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n);
        Ok(Self {
            cfg: cfg.clone(),
            window,
            fft,
            bank: MelFilterbank::new(cfg),
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Mel-filtered power spectrum before log compression, frame-major.
    pub fn mel_power(&self, clip: &AudioClip) -> Result<(Vec<f64>, usize)> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "clip {} has sample rate {} but the mel configuration expects {}",
                clip.source_id, clip.sample_rate, self.cfg.sample_rate
            )));
        }
        let n_frames = self.cfg.n_frames(clip.samples.len()).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "clip {} has {} samples, shorter than one {}-sample window",
                clip.source_id,
                clip.samples.len(),
                self.cfg.window
            ))
        })?;
        let n = self.cfg.window;
        let n_mels = self.cfg.n_mels;
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n / 2 + 1];
        let mut out = vec![0.0; n_frames * n_mels];
        for t in 0..n_frames {
            let frame = &clip.samples[t * self.cfg.hop..t * self.cfg.hop + n];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = Complex::new(s as f64 * w, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            self.bank.apply(&power, &mut out[t * n_mels..(t + 1) * n_mels]);
        }
        Ok((out, n_frames))
    }

    /// Power STFT (periodic Hann) → mel filterbank → `ln(x + log_offset)`.
    pub fn melspectrogram(&self, clip: &AudioClip) -> Result<MelSpec> {
        let (power, n_frames) = self.mel_power(clip)?;
        let n_mels = self.cfg.n_mels;
        let mut bins = vec![0.0f32; n_mels * n_frames];
        for t in 0..n_frames {
            for m in 0..n_mels {
                bins[m * n_frames + t] = (power[t * n_mels + m] + self.cfg.log_offset).ln() as f32;
            }
        }
        Ok(MelSpec {
            bins,
            n_mels,
            n_frames,
            hop: self.cfg.hop,
            sample_rate: self.cfg.sample_rate,
        })
    }
}

/// One-shot convenience wrapper around [`MelExtractor`].
pub fn melspectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpec> {
    MelExtractor::new(cfg)?.melspectrogram(clip)
}

/// Per-mel-bin mean and standard deviation over a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelStats {
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a MelSpec>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for s in specs {
            if sum.is_empty() {
                sum = vec![0.0; s.n_mels];
                sq = vec![0.0; s.n_mels];
            } else if sum.len() != s.n_mels {
                return Err(Error::shape("mel stats", &[sum.len()], &[s.n_mels]));
            }
            for m in 0..s.n_mels {
                for &v in &s.bins[m * s.n_frames..(m + 1) * s.n_frames] {
                    sum[m] += v as f64;
                    sq[m] += (v as f64) * (v as f64);
                }
            }
            count += s.n_frames;
        }
        if count == 0 {
            return Err(Error::Data("cannot fit mel statistics on an empty split".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-5))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, spec: &mut MelSpec) -> Result<()> {
        if spec.n_mels != self.mean.len() {
            return Err(Error::shape("mel normalize", &[self.mean.len()], &[spec.n_mels]));
        }
        for m in 0..spec.n_mels {
            let (mu, sd) = (self.mean[m], self.std[m]);
            for v in &mut spec.bins[m * spec.n_frames..(m + 1) * spec.n_frames] {
                *v = ((*v as f64 - mu) / sd) as f32;
            }
        }
        Ok(())
    }
}

/// Writes a mel spectrogram as a flat array plus a `.json` sidecar with its configuration.
pub fn save_mel_cache(path: impl AsRef<Path>, spec: &MelSpec, cfg: &MelConfig) -> Result<()> {
    let path = path.as_ref();
    let t = Tensor::<f32>::new(vec![spec.n_mels, spec.n_frames], spec.bins.clone())?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_flat(&mut f, &t)?;
    let sidecar = path.with_extension("json");
    std::fs::write(&sidecar, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&sidecar, e))
}

/// Loads a cached spectrogram, refusing it if the sidecar configuration differs from `cfg`.
pub fn load_mel_cache(path: impl AsRef<Path>, cfg: &MelConfig) -> Result<MelSpec> {
    let path = path.as_ref();
    let sidecar = path.with_extension("json");
    let stored: MelConfig =
        serde_json::from_slice(&std::fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?)?;
    if &stored != cfg {
        return Err(Error::Format {
            expected: format!("{cfg:?}"),
            found: format!("{stored:?}"),
        });
    }
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let t: Tensor<f32> = read_flat(&mut f)?;
    let (n_mels, n_frames) = (t.shape()[0], t.shape()[1]);
    Ok(MelSpec {
        bins: t.into_data(),
        n_mels,
        n_frames,
        hop: cfg.hop,
        sample_rate: cfg.sample_rate,
    })
}
