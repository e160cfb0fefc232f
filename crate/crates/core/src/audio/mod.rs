//! Audio decoding, cropping, augmentation and log-mel features.

mod augment;
mod mel;
mod wav;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use augment::{add_noise, apply_gain, augment, pitch_shift, AugmentConfig, AUGMENT_CLIP};
pub use mel::{
    hz_to_mel, load_mel_cache, mel_to_hz, melspectrogram, save_mel_cache, MelConfig, MelExtractor,
    MelFilterbank, MelSpec, MelStats,
};
pub use wav::{decode_wav, decode_wav_bytes, encode_wav_pcm16, write_wav_pcm16};

use crate::error::{Error, Result};

/// Decoded mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(format!("clip {source_id} has a zero sample rate")));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument(format!("clip {source_id} has no samples")));
        }
        Ok(Self {
            samples,
            sample_rate,
            source_id,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Random,
    Center,
}

/// Target length in samples for a crop of `duration_s` seconds.
pub fn crop_len(duration_s: f64, sample_rate: u32) -> usize {
    (duration_s * sample_rate as f64).round() as usize
}

/// Cuts a `duration_s` window out of the clip: centered on the midpoint, or
/// at a uniformly random valid offset. Shorter clips are zero-padded
/// symmetrically (any odd remainder goes to the end).
pub fn crop<R: Rng + ?Sized>(clip: &AudioClip, duration_s: f64, mode: CropMode, rng: Option<&mut R>) -> Result<AudioClip> {
    if !(duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!("crop duration must be positive, got {duration_s}")));
    }
    let target = crop_len(duration_s, clip.sample_rate).max(1);
    let len = clip.samples.len();
    let samples = if len >= target {
        let offset = match mode {
            CropMode::Center => (len - target) / 2,
            CropMode::Random => {
                let rng = rng.ok_or_else(|| Error::InvalidArgument("random crop requires an rng".into()))?;
                rng.gen_range(0..=len - target)
            }
        };
        clip.samples[offset..offset + target].to_vec()
    } else {
        let left = (target - len) / 2;
        let mut out = vec![0.0; target];
        out[left..left + len].copy_from_slice(&clip.samples);
        out
    };
    Ok(AudioClip {
        samples,
        sample_rate: clip.sample_rate,
        source_id: clip.source_id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(secs: usize, sr: u32) -> AudioClip {
        let n = secs * sr as usize;
        AudioClip::new((0..n).map(|i| i as f32 / n as f32).collect(), sr, "ramp").unwrap()
    }

    #[test]
    fn center_crop_takes_the_middle() {
        let clip = ramp(30, 100);
        let out = crop::<ChaCha8Rng>(&clip, 20.0, CropMode::Center, None).unwrap();
        assert_eq!(out.samples.len(), 2000);
        assert_eq!(out.samples[..], clip.samples[500..2500]);
    }

    #[test]
    fn exact_length_is_identity_in_both_modes() {
        let clip = ramp(20, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(crop::<ChaCha8Rng>(&clip, 20.0, CropMode::Center, None).unwrap(), clip);
        assert_eq!(crop(&clip, 20.0, CropMode::Random, Some(&mut rng)).unwrap(), clip);
    }

    #[test]
    fn short_clip_is_padded_symmetrically() {
        let clip = ramp(10, 100);
        let out = crop::<ChaCha8Rng>(&clip, 20.0, CropMode::Center, None).unwrap();
        assert_eq!(out.samples.len(), 2000);
        assert!(out.samples[..500].iter().all(|&v| v == 0.0));
        assert!(out.samples[1500..].iter().all(|&v| v == 0.0));
        assert_eq!(out.samples[500..1500], clip.samples[..]);
    }

    #[test]
    fn random_crop_stays_in_bounds_and_needs_rng() {
        let clip = ramp(5, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let out = crop(&clip, 2.0, CropMode::Random, Some(&mut rng)).unwrap();
            let start = clip.samples.iter().position(|&v| v == out.samples[0]).unwrap();
            assert_eq!(out.samples[..], clip.samples[start..start + 200]);
        }
        assert!(crop::<ChaCha8Rng>(&clip, 2.0, CropMode::Random, None).is_err());
        assert!(crop::<ChaCha8Rng>(&clip, 0.0, CropMode::Center, None).is_err());
    }

    #[test]
    fn crop_is_idempotent() {
        let clip = ramp(7, 100);
        let once = crop::<ChaCha8Rng>(&clip, 3.0, CropMode::Center, None).unwrap();
        let twice = crop::<ChaCha8Rng>(&once, 3.0, CropMode::Center, None).unwrap();
        assert_eq!(once, twice);
    }
}
