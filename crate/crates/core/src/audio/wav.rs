use std::io::{Cursor, Read, Seek};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{Error, Result};

fn chunk_for(msg: &str) -> &'static str {
    if msg.contains("RIFF") {
        "RIFF"
    } else if msg.contains("WAVE") {
        "WAVE"
    } else if msg.contains("data") {
        "data"
    } else {
        "fmt"
    }
}

fn map_err(e: hound::Error, stage: &'static str) -> Error {
    let (chunk, message) = match e {
        hound::Error::FormatError(msg) => (chunk_for(msg), msg.to_string()),
        hound::Error::Unsupported => ("fmt", "unsupported codec or sample layout".to_string()),
        hound::Error::TooWide => ("fmt", "sample width exceeds 32 bits".to_string()),
        hound::Error::InvalidSampleFormat => ("fmt", "sample format does not match bit depth".to_string()),
        hound::Error::UnfinishedSample => ("data", "sample count is not a multiple of the channel count".to_string()),
        hound::Error::IoError(io) => (stage, io.to_string()),
    };
    Error::AudioFormat {
        chunk: chunk.to_string(),
        message,
    }
}

fn decode<R: Read + Seek>(reader: R, source_id: &str) -> Result<AudioClip> {
    let mut wav = WavReader::new(reader).map_err(|e| map_err(e, "RIFF"))?;
    let spec = wav.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            wav.samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| map_err(e, "data"))?
        }
        (SampleFormat::Float, 32) => wav
            .samples::<f32>()
            .map(|s| s.map(|v| v.clamp(-1.0, 1.0)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_err(e, "data"))?,
        (fmt, bits) => {
            return Err(Error::AudioFormat {
                chunk: "fmt".into(),
                message: format!("unsupported encoding {fmt:?} with {bits} bits per sample"),
            })
        }
    };
    let samples: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| (frame.iter().map(|&v| v as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    AudioClip::new(samples, spec.sample_rate, source_id)
}

/// Decodes a PCM WAV file (8/16/24/32-bit integer or 32-bit float) to a mono clip.
/// Multichannel frames are averaged.
pub fn decode_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip");
    decode(Cursor::new(bytes), id)
}

/// Decodes WAV bytes held in memory.
pub fn decode_wav_bytes(bytes: &[u8], source_id: &str) -> Result<AudioClip> {
    decode(Cursor::new(bytes), source_id)
}

/// Encodes a clip as 16-bit mono PCM. Samples are clamped to [-1, 1].
pub fn encode_wav_pcm16(clip: &AudioClip) -> Result<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut buf = Cursor::new(Vec::new());
    {
        let mut w = WavWriter::new(&mut buf, spec).map_err(|e| map_err(e, "RIFF"))?;
        for &s in &clip.samples {
            let v = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| map_err(e, "data"))?;
        }
        w.finalize().map_err(|e| map_err(e, "data"))?;
    }
    Ok(buf.into_inner())
}

pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_wav_pcm16(clip)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wav_bytes<S: hound::Sample + Copy>(spec: WavSpec, samples: &[S]) -> Vec<u8> {
        let mut buf = Cursor::new(Vec::new());
        let mut w = WavWriter::new(&mut buf, spec).unwrap();
        for &s in samples {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        buf.into_inner()
    }

    fn spec(channels: u16, bits: u16, fmt: SampleFormat) -> WavSpec {
        WavSpec {
            channels,
            sample_rate: 16000,
            bits_per_sample: bits,
            sample_format: fmt,
        }
    }

    #[test]
    fn pcm16_scales_to_unit_range() {
        let bytes = wav_bytes(spec(1, 16, SampleFormat::Int), &[16384i16, -32768, 0]);
        let clip = decode_wav_bytes(&bytes, "x").unwrap();
        assert_eq!(clip.samples, vec![0.5, -1.0, 0.0]);
    }

    #[test]
    fn stereo_frames_are_averaged() {
        let bytes = wav_bytes(spec(2, 32, SampleFormat::Float), &[0.2f32, 0.4, -1.0, 1.0]);
        let clip = decode_wav_bytes(&bytes, "x").unwrap();
        assert!((clip.samples[0] - 0.3).abs() < 1e-7);
        assert_eq!(clip.samples[1], 0.0);
    }

    #[test]
    fn eight_and_twenty_four_bit() {
        let b8 = wav_bytes(spec(1, 8, SampleFormat::Int), &[64i8, -128]);
        assert_eq!(decode_wav_bytes(&b8, "x").unwrap().samples, vec![0.5, -1.0]);
        let b24 = wav_bytes(spec(1, 24, SampleFormat::Int), &[1i32 << 22]);
        assert_eq!(decode_wav_bytes(&b24, "x").unwrap().samples, vec![0.5]);
    }

    #[test]
    fn one_second_of_silence() {
        let bytes = wav_bytes(spec(1, 16, SampleFormat::Int), &vec![0i16; 16000]);
        let clip = decode_wav_bytes(&bytes, "x").unwrap();
        assert_eq!(clip.samples.len(), 16000);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn malformed_header_names_the_chunk() {
        let mut bytes = wav_bytes(spec(1, 16, SampleFormat::Int), &[1i16, 2]);
        bytes[0] = b'X';
        match decode_wav_bytes(&bytes, "x") {
            Err(Error::AudioFormat { chunk, .. }) => assert_eq!(chunk, "RIFF"),
            other => panic!("{other:?}"),
        }
        let bytes = wav_bytes(spec(1, 16, SampleFormat::Int), &[1i16, 2]);
        match decode_wav_bytes(&bytes[..30], "x") {
            Err(Error::AudioFormat { chunk, .. }) => assert!(!chunk.is_empty()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pcm16_encode_round_trip() {
        let clip = AudioClip::new(vec![0.5, -0.25, 0.0, 1.0], 8000, "r").unwrap();
        let back = decode_wav_bytes(&encode_wav_pcm16(&clip).unwrap(), "r").unwrap();
        assert_eq!(back.sample_rate, 8000);
        for (a, b) in clip.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
