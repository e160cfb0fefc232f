//! End-to-end checks through the public API: WAV files in, embeddings and
//! retrieval metrics out.

use muscall_core::audio::{decode_wav, melspectrogram, write_wav_pcm16, AudioClip, MelConfig};
use muscall_core::config::Config;
use muscall_core::eval::{evaluate_retrieval, Direction};
use muscall_core::trainer::{embed_pairs, fit, Checkpoint, Dataset, LoadMode, Pair, Trainer};

fn tone(freq: f32, secs: f32, sr: u32, amp: f32) -> Vec<f32> {
    (0..(secs * sr as f32) as usize)
        .map(|t| amp * (2.0 * std::f32::consts::PI * freq * t as f32 / sr as f32).sin())
        .collect()
}

fn small_config() -> Config {
    let mut c = Config::desk();
    c.mel.sample_rate = 8000;
    c.mel.window = 256;
    c.mel.hop = 128;
    c.mel.n_mels = 16;
    c.audio_encoder.stem_channels = [4, 4, 8];
    c.audio_encoder.stage_widths = vec![8, 16];
    c.audio_encoder.attn_heads = 2;
    c.text_encoder.width = 16;
    c.text_encoder.depth = 1;
    c.text_encoder.heads = 2;
    c.text_encoder.max_len = 24;
    c.joint.embed_dim = 16;
    c.tokenizer.merges = 60;
    c.train.batch_size = 8;
    c.train.crop_seconds = 1.0;
    c.train.max_epochs = 20;
    c.train.lr = 1e-3;
    c.train.seed = 3;
    c.train.flags.loss_weighting = false;
    c
}

const PITCH: [(&str, f32); 4] = [("deep", 150.0), ("low", 300.0), ("bright", 900.0), ("shrill", 1800.0)];

fn pairs(n: usize) -> Vec<Pair> {
    (0..n)
        .map(|i| {
            let (word, f) = PITCH[i % 4];
            let id = format!("c{i:03}");
            Pair {
                audio: AudioClip::new(tone(f * (1.0 + 0.01 * (i / 4) as f32), 1.5, 8000, 0.4), 8000, id.clone()).unwrap(),
                caption: format!("a {word} tone"),
                id,
            }
        })
        .collect()
}

#[test]
fn wav_files_round_trip_into_mel_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    let clip = AudioClip::new(tone(1000.0, 1.0, 16000, 0.5), 16000, "a").unwrap();
    write_wav_pcm16(&path, &clip).unwrap();
    let back = decode_wav(&path).unwrap();
    assert_eq!(back.sample_rate, 16000);
    assert_eq!(back.samples.len(), clip.samples.len());
    let worst = back.samples.iter().zip(&clip.samples).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst <= 1.0 / 32767.0 + 1e-6);

    let cfg = MelConfig { sample_rate: 16000, ..Default::default() };
    let mel = melspectrogram(&back, &cfg).unwrap();
    let mean = mel.frame_mean();
    let peak = (0..mean.len()).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
    let hz = muscall_core::audio::MelFilterbank::new(&cfg).centers_hz()[peak];
    assert!((hz - 1000.0).abs() < 150.0, "peak at {hz} Hz");
}

#[test]
fn short_training_run_learns_pitch_words_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::random_split(pairs(48), &Default::default(), 0).unwrap();
    let cfg = small_config();
    let untrained = {
        let t = Trainer::<f32>::new(&ds, &cfg).unwrap();
        let (a, t2) = embed_pairs(&t.model, &t.prep, &ds.train, 16).unwrap();
        evaluate_retrieval(&a, &t2).unwrap()[0].r_at_10
    };
    let log = dir.path().join("log.jsonl");
    let out = fit::<f32>(&ds, &cfg, Some(&log)).unwrap();
    assert_eq!(out.log.len(), cfg.train.max_epochs);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), cfg.train.max_epochs);
    assert!(out.log.last().unwrap().train_loss < out.log[0].train_loss);

    let path = dir.path().join("model.msck");
    out.best.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path, LoadMode::EvalOnly).unwrap();
    let prep = back.preprocessor().unwrap();
    let (a, t) = embed_pairs(&back.model, &prep, &ds.train, 16).unwrap();
    let [t2a, a2t] = evaluate_retrieval(&a, &t).unwrap();
    assert_eq!((t2a.direction, a2t.direction), (Direction::TextToAudio, Direction::AudioToText));
    assert!(t2a.r_at_10 >= untrained + 20.0, "R@10 {} vs {untrained} untrained", t2a.r_at_10);
    for row in a.iter().chain(&t) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-4);
    }
}
