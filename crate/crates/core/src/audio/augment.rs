use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};

/// Output samples are clipped to this magnitude after augmentation.
pub const AUGMENT_CLIP: f32 = 1.5;

/// Stochastic waveform augmentation. Each enabled transform fires
/// independently with probability `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p: f64,
    pub gain_db_range: (f64, f64),
    pub snr_db_range: (f64, f64),
    pub pitch_semitone_range: (f64, f64),
    pub gain: bool,
    pub noise: bool,
    pub pitch_shift: bool,
    pub polarity: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p: 0.3,
            gain_db_range: (-3.0, 3.0),
            snr_db_range: (15.0, 40.0),
            pitch_semitone_range: (-1.0, 1.0),
            gain: true,
            noise: true,
            pitch_shift: true,
            polarity: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!("augment p must lie in [0, 1], got {}", self.p)));
        }
        for (name, (lo, hi)) in [
            ("gain_db_range", self.gain_db_range),
            ("snr_db_range", self.snr_db_range),
            ("pitch_semitone_range", self.pitch_semitone_range),
        ] {
            if !(lo <= hi) {
                return Err(Error::Config(format!("{name} is not ordered: ({lo}, {hi})")));
            }
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

pub fn apply_gain(samples: &mut [f32], db: f64) {
    let g = 10f64.powf(db / 20.0);
    samples.iter_mut().for_each(|s| *s = (*s as f64 * g) as f32);
}

/// Adds white Gaussian noise at the given signal-to-noise ratio. Silent input is left untouched.
pub fn add_noise<R: Rng + ?Sized>(samples: &mut [f32], snr_db: f64, rng: &mut R) {
    let power = samples.iter().map(|&s| (s as f64).powi(2)).sum::<f64>() / samples.len().max(1) as f64;
    if power <= 0.0 {
        return;
    }
    let std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    for s in samples.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *s = (*s as f64 + std * z) as f32;
    }
}

/// Pitch shift by resampling with linear interpolation, then cropping or
/// zero-padding back to the original length. Tempo changes along with pitch.
pub fn pitch_shift(samples: &[f32], semitones: f64) -> Vec<f32> {
    let ratio = 2f64.powf(semitones / 12.0);
    let n = samples.len();
    (0..n)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            if j + 1 < n {
                let frac = pos - j as f64;
                ((1.0 - frac) * samples[j] as f64 + frac * samples[j + 1] as f64) as f32
            } else if j < n {
                samples[j]
            } else {
                0.0
            }
        })
        .collect()
}

/// Applies the enabled transforms in the order gain, noise, pitch shift,
/// polarity. Output has the input's length and is clipped to ±[`AUGMENT_CLIP`].
pub fn augment<R: Rng + ?Sized>(clip: &AudioClip, cfg: &AugmentConfig, rng: &mut R) -> Result<AudioClip> {
    cfg.validate()?;
    let mut out = clip.clone();
    if cfg.p == 0.0 {
        return Ok(out);
    }
    let fires = |enabled: bool, rng: &mut R| enabled && rng.gen_bool(cfg.p);
    if fires(cfg.gain, rng) {
        let db = draw(rng, cfg.gain_db_range);
        apply_gain(&mut out.samples, db);
    }
    if fires(cfg.noise, rng) {
        let snr = draw(rng, cfg.snr_db_range);
        add_noise(&mut out.samples, snr, rng);
    }
    if fires(cfg.pitch_shift, rng) {
        let st = draw(rng, cfg.pitch_semitone_range);
        out.samples = pitch_shift(&out.samples, st);
    }
    if fires(cfg.polarity, rng) {
        out.samples.iter_mut().for_each(|s| *s = -*s);
    }
    for s in &mut out.samples {
        *s = s.clamp(-AUGMENT_CLIP, AUGMENT_CLIP);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn only(f: impl FnOnce(&mut AugmentConfig)) -> AugmentConfig {
        let mut c = AugmentConfig {
            p: 1.0,
            gain: false,
            noise: false,
            pitch_shift: false,
            polarity: false,
            ..Default::default()
        };
        f(&mut c);
        c
    }

    fn sine(n: usize, amp: f32) -> AudioClip {
        let s = (0..n)
            .map(|i| amp * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16000.0).sin())
            .collect();
        AudioClip::new(s, 16000, "s").unwrap()
    }

    #[test]
    fn zero_probability_is_identity() {
        let clip = sine(1000, 0.5);
        let cfg = AugmentConfig {
            p: 0.0,
            ..Default::default()
        };
        let out = augment(&clip, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, clip);
    }

    #[test]
    fn six_db_gain_on_constant() {
        let clip = AudioClip::new(vec![0.1; 100], 16000, "c").unwrap();
        let cfg = only(|c| {
            c.gain = true;
            c.gain_db_range = (6.0, 6.0);
        });
        let out = augment(&clip, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let expected = 0.1 * 10f64.powf(6.0 / 20.0);
        assert!((expected - 0.19953).abs() < 1e-5);
        assert!(out.samples.iter().all(|&s| (s as f64 - expected).abs() < 1e-6));
    }

    #[test]
    fn noise_at_twenty_db_on_unit_power() {
        // constant ±1 square wave has unit power
        let s: Vec<f32> = (0..16000).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let clip = AudioClip::new(s.clone(), 16000, "u").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = only(|c| {
            c.noise = true;
            c.snr_db_range = (20.0, 20.0);
        });
        let out = augment(&clip, &cfg, &mut rng).unwrap();
        let noise_power: f64 = out
            .samples
            .iter()
            .zip(&s)
            .map(|(&o, &i)| ((o.clamp(-1.5, 1.5) - i) as f64).powi(2))
            .sum::<f64>()
            / 16000.0;
        assert!((noise_power - 0.01).abs() <= 0.001, "{noise_power}");
    }

    #[test]
    fn pitch_shift_up_an_octave_doubles_frequency() {
        let clip = sine(1600, 0.5);
        let out = pitch_shift(&clip.samples, 12.0);
        // sample i of the output equals sample 2i of the input
        for i in 0..700 {
            assert!((out[i] - clip.samples[2 * i]).abs() < 1e-6);
        }
        assert!(out[900..].iter().all(|&v| v == 0.0));
        assert_eq!(out.len(), clip.samples.len());
    }

    #[test]
    fn polarity_flips_sign() {
        let clip = sine(64, 0.3);
        let out = augment(&clip, &only(|c| c.polarity = true), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in clip.samples.iter().zip(&out.samples) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = AugmentConfig::default();
        c.p = 1.5;
        assert!(c.validate().is_err());
        let mut c = AugmentConfig::default();
        c.snr_db_range = (30.0, 10.0);
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn seeded_augmentation_is_reproducible_and_bounded(seed in any::<u64>(), amp in 0.0f32..1.0) {
            let clip = sine(2048, amp);
            let cfg = AugmentConfig { p: 0.7, gain_db_range: (-12.0, 12.0), snr_db_range: (0.0, 30.0), pitch_semitone_range: (-4.0, 4.0), ..Default::default() };
            let a = augment(&clip, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = augment(&clip, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(&a.samples, &b.samples);
            prop_assert_eq!(a.samples.len(), clip.samples.len());
            prop_assert!(a.samples.iter().all(|s| s.is_finite() && s.abs() <= AUGMENT_CLIP));
        }
    }
}
