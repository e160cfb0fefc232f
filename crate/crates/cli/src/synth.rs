//! Seeded synthetic caption/audio corpus with controllable attributes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use muscall_core::audio::{write_wav_pcm16, AudioClip};
use muscall_core::config::SplitConfig;
use muscall_core::rng::{self, domain};
use muscall_core::trainer::{assign_splits, Split};
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::manifest::{write_manifest, write_splits, ManifestRow};
use crate::{CliError, CliResult};

/// Pitch class: caption word plus fundamental band in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitchClass {
    pub word: String,
    pub band_hz: (f64, f64),
}

/// Tempo bucket: caption words plus note rate in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tempo {
    pub word: String,
    pub rate_hz: f64,
}

/// Timbre: caption word plus harmonic roll-off exponent (weight `n^-rolloff`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timbre {
    pub word: String,
    pub rolloff: f64,
}

/// Dynamics: caption word plus peak gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub word: String,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpace {
    pub pitch: Vec<PitchClass>,
    pub tempo: Vec<Tempo>,
    pub timbre: Vec<Timbre>,
    pub dynamics: Vec<Dynamics>,
}

impl Default for AttributeSpace {
    fn default() -> Self {
        let p = |w: &str, lo, hi| PitchClass {
            word: w.into(),
            band_hz: (lo, hi),
        };
        let t = |w: &str, r| Tempo {
            word: w.into(),
            rate_hz: r,
        };
        let b = |w: &str, r| Timbre {
            word: w.into(),
            rolloff: r,
        };
        let d = |w: &str, g| Dynamics {
            word: w.into(),
            gain: g,
        };
        Self {
            pitch: vec![p("low", 110.0, 220.0), p("high", 660.0, 1320.0)],
            tempo: vec![t("slow", 1.25), t("mid tempo", 2.5), t("up tempo", 5.0)],
            timbre: vec![b("dark", 3.0), b("warm", 1.5), b("bright", 0.3)],
            dynamics: vec![d("quiet", 0.06), d("moderate", 0.25), d("loud", 0.9)],
        }
    }
}

impl AttributeSpace {
    pub fn capacity(&self) -> usize {
        self.pitch.len() * self.tempo.len() * self.timbre.len() * self.dynamics.len()
    }
}

/// A caption template with placeholders `{pitch}`, `{tempo}`, `{timbre}` and
/// `{dynamics}`. In a spec file it is either a plain string (weight 1) or
/// `{"text": ..., "weight": ...}`. A template may leave attributes out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TemplateRepr")]
pub struct CaptionTemplate {
    pub text: String,
    pub weight: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TemplateRepr {
    Plain(String),
    Weighted { text: String, weight: f64 },
}

impl From<TemplateRepr> for CaptionTemplate {
    fn from(r: TemplateRepr) -> Self {
        match r {
            TemplateRepr::Plain(text) => Self { text, weight: 1.0 },
            TemplateRepr::Weighted { text, weight } => Self { text, weight },
        }
    }
}

/// Full captions for 70% of pairs; the rest leave one attribute unmentioned.
pub fn default_templates() -> Vec<CaptionTemplate> {
    let full = [
        "a {tempo} {timbre} track with {pitch} pitch and {dynamics} dynamics",
        "{dynamics} {timbre} music at a {tempo} pace with a {pitch} pitch melody",
        "this {tempo} piece has a {timbre} sound with {pitch} pitch, played with {dynamics} dynamics",
    ];
    let partial = [
        "a {tempo} track with {pitch} pitch and {dynamics} dynamics",
        "{timbre} music with a {pitch} pitch melody at a {tempo} pace",
        "a {timbre} track with {dynamics} dynamics at a {tempo} pace",
        "a {pitch} pitch {timbre} piece with {dynamics} dynamics",
    ];
    let t = |s: &str, w: f64| CaptionTemplate {
        text: s.to_string(),
        weight: w,
    };
    full.iter()
        .map(|s| t(s, 0.7 / full.len() as f64))
        .chain(partial.iter().map(|s| t(s, 0.3 / partial.len() as f64)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_pairs: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Standard deviation of additive white noise, relative to full scale.
    pub noise_level: f64,
    pub seed: u64,
    pub attributes: AttributeSpace,
    pub templates: Vec<CaptionTemplate>,
    pub split: SplitConfig,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_pairs: 1000,
            duration_s: 5.0,
            sample_rate: 16000,
            noise_level: 0.005,
            seed: 0,
            attributes: AttributeSpace::default(),
            templates: default_templates(),
            split: SplitConfig::default(),
        }
    }
}

/// Attribute values of one generated pair, as indices into the space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Attributes {
    pub pitch: usize,
    pub tempo: usize,
    pub timbre: usize,
    pub dynamics: usize,
}

impl SyntheticSpec {
    pub fn validate(&self) -> CliResult<()> {
        let a = &self.attributes;
        if self.n_pairs == 0 || self.templates.is_empty() || a.capacity() == 0 {
            return Err(CliError::Config(
                "synthetic spec needs pairs, templates and at least one value per attribute".into(),
            ));
        }
        if self.templates.iter().any(|t| !(t.weight >= 0.0 && t.weight.is_finite()))
            || !(self.templates.iter().map(|t| t.weight).sum::<f64>() > 0.0)
        {
            return Err(CliError::Config("template weights must be finite, non-negative and not all zero".into()));
        }
        if !(self.duration_s > 0.0) || self.sample_rate == 0 || !(self.noise_level >= 0.0) {
            return Err(CliError::Config("synthetic duration, sample rate and noise must be valid".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if a.pitch.iter().any(|p| !(p.band_hz.0 > 0.0 && p.band_hz.1 >= p.band_hz.0 && p.band_hz.1 < nyquist)) {
            return Err(CliError::Config(format!("pitch bands must lie in (0, {nyquist}) Hz")));
        }
        if a.tempo.iter().any(|t| !(t.rate_hz > 0.0)) || a.dynamics.iter().any(|d| !(d.gain > 0.0 && d.gain <= 1.0)) {
            return Err(CliError::Config("tempo rates must be positive and gains lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn tags(&self, at: Attributes) -> BTreeMap<String, String> {
        let a = &self.attributes;
        BTreeMap::from([
            ("pitch".to_string(), a.pitch[at.pitch].word.clone()),
            ("tempo".to_string(), a.tempo[at.tempo].word.clone()),
            ("timbre".to_string(), a.timbre[at.timbre].word.clone()),
            ("dynamics".to_string(), a.dynamics[at.dynamics].word.clone()),
        ])
    }

    pub fn caption(&self, template: &str, at: Attributes) -> String {
        let mut s = template.to_string();
        for (k, v) in self.tags(at) {
            s = s.replace(&format!("{{{k}}}"), &v);
        }
        s
    }

    /// Renders one clip.
    pub fn render<R: Rng>(&self, at: Attributes, rng: &mut R) -> Vec<f32> {
        let a = &self.attributes;
        let sr = self.sample_rate as f64;
        let n = (self.duration_s * sr).round() as usize;
        let (lo, hi) = a.pitch[at.pitch].band_hz;
        let f0 = lo * (hi / lo).powf(rng.gen::<f64>());
        let rolloff = a.timbre[at.timbre].rolloff;
        let partials: Vec<(f64, f64, f64)> = (1..=16)
            .map(|k| k as f64)
            .filter(|k| k * f0 < 0.45 * sr)
            .map(|k| (k * f0, k.powf(-rolloff), rng.gen::<f64>() * 2.0 * PI))
            .collect();
        let rate = a.tempo[at.tempo].rate_hz;
        let beat_phase = rng.gen::<f64>() / rate;
        let decay = 5.0 * rate;
        let mut out: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let since = (t + beat_phase) % (1.0 / rate);
                let env = (-decay * since).exp() * (1.0 - (-since * 400.0).exp());
                let tone: f64 = partials.iter().map(|(f, w, ph)| w * (2.0 * PI * f * t + ph).sin()).sum();
                env * tone
            })
            .collect();
        let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let gain = a.dynamics[at.dynamics].gain / peak;
        for v in &mut out {
            *v = *v * gain + self.noise_level * Distribution::<f64>::sample(&StandardNormal, rng);
        }
        out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
    }
}

/// What [`generate_synthetic`] wrote.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: PathBuf,
    pub splits: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub attributes: Vec<Attributes>,
    pub assignment: Vec<(String, Split)>,
}

/// Writes `wav/*.wav`, `manifest.jsonl` and `splits.json` under `out`.
/// Attribute combinations are dealt out in shuffled rounds so every
/// combination appears equally often.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> CliResult<SyntheticCorpus> {
    spec.validate()?;
    let a = &spec.attributes;
    if spec.n_pairs > a.capacity() {
        log::warn!(
            "{} pairs over {} attribute combinations: captions repeat, so retrieval cannot tell some pairs apart",
            spec.n_pairs,
            a.capacity()
        );
    }
    let wav_dir = out.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| CliError::io(&wav_dir, e))?;
    let mut combos = Vec::with_capacity(a.capacity());
    for pitch in 0..a.pitch.len() {
        for tempo in 0..a.tempo.len() {
            for timbre in 0..a.timbre.len() {
                for dynamics in 0..a.dynamics.len() {
                    combos.push(Attributes {
                        pitch,
                        tempo,
                        timbre,
                        dynamics,
                    });
                }
            }
        }
    }
    let pick = WeightedIndex::new(spec.templates.iter().map(|t| t.weight))
        .map_err(|e| CliError::Config(format!("template weights: {e}")))?;
    let mut deal = rng::stream(spec.seed, &[domain::SYNTH, 0]);
    let mut order = Vec::new();
    let mut rows = Vec::with_capacity(spec.n_pairs);
    let mut attributes = Vec::with_capacity(spec.n_pairs);
    for i in 0..spec.n_pairs {
        if order.is_empty() {
            order = combos.clone();
            order.shuffle(&mut deal);
        }
        let at = order.pop().expect("refilled above");
        let mut r = rng::stream(spec.seed, &[domain::SYNTH, 1, i as u64]);
        let template = &spec.templates[pick.sample(&mut r)].text;
        let id = format!("syn{i:05}");
        let clip = AudioClip::new(spec.render(at, &mut r), spec.sample_rate, id.clone())?;
        let rel = format!("wav/{id}.wav");
        write_wav_pcm16(out.join(&rel), &clip)?;
        rows.push(ManifestRow {
            id,
            audio_path: rel,
            caption: spec.caption(template, at),
            tags: spec.tags(at),
        });
        attributes.push(at);
    }
    let assignment: Vec<(String, Split)> = rows
        .iter()
        .map(|r| r.id.clone())
        .zip(assign_splits(spec.n_pairs, &spec.split, spec.seed))
        .collect();
    let manifest = out.join("manifest.jsonl");
    write_manifest(&manifest, &rows)?;
    let splits = out.join("splits.json");
    write_splits(&splits, &assignment)?;
    Ok(SyntheticCorpus {
        manifest,
        splits,
        rows,
        attributes,
        assignment,
    })
}
