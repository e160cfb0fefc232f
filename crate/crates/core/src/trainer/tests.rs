use super::*;
use crate::audio::AudioClip;
use crate::config::Config;
use crate::encoders::{MusCall, NORM_EPS};
use crate::error::Error;
use crate::numcore::{Graph, ParamStore, Tensor};
use crate::objectives::bidirectional_loss;
use crate::rng;

fn tiny_config() -> Config {
    let mut c = Config::desk();
    c.mel.sample_rate = 8000;
    c.mel.window = 256;
    c.mel.hop = 128;
    c.mel.n_mels = 16;
    c.audio_encoder.stem_channels = [4, 4, 4];
    c.audio_encoder.stage_widths = vec![8, 8];
    c.audio_encoder.attn_heads = 2;
    c.text_encoder.width = 16;
    c.text_encoder.depth = 1;
    c.text_encoder.heads = 2;
    c.text_encoder.max_len = 24;
    c.joint.embed_dim = 8;
    c.joint.ssl_hidden = 8;
    c.joint.ssl_dim = 4;
    c.tokenizer.merges = 40;
    c.train.batch_size = 4;
    c.train.crop_seconds = 1.0;
    c.train.max_epochs = 2;
    c.train.lr = 1e-3;
    c.train.seed = 5;
    c
}

const WORDS: [&str; 4] = ["low", "high", "soft", "loud"];

fn tiny_pairs(n: usize) -> Vec<Pair> {
    (0..n)
        .map(|i| {
            let f = 200.0 + 150.0 * (i % 4) as f32;
            let samples = (0..12000)
                .map(|t| 0.3 * (2.0 * std::f32::consts::PI * f * t as f32 / 8000.0).sin() * (1.0 + (i % 3) as f32) / 3.0)
                .collect();
            Pair {
                id: format!("p{i:03}"),
                audio: AudioClip::new(samples, 8000, format!("p{i:03}")).unwrap(),
                caption: format!("a {} track with {} dynamics", WORDS[i % 4], WORDS[2 + i % 2]),
            }
        })
        .collect()
}

fn tiny_dataset(n: usize) -> Dataset {
    Dataset::random_split(tiny_pairs(n), &Default::default(), 1).unwrap()
}

#[test]
fn cosine_schedule_boundaries() {
    assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
    assert!(cosine_lr(10, 10, 0.1).unwrap().abs() < 1e-18);
    assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
    assert!(cosine_lr(0, 0, 0.1).is_err());
    assert!(cosine_lr(11, 10, 0.1).is_err());
}

fn store(values: &[f64], decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_f64(vec![values.len()], values).unwrap(), decay).unwrap();
    s
}

#[test]
fn adam_fixed_point_and_decay() {
    let mut s = store(&[0.5, -1.0, 2.0], true);
    let mut st = AdamState::new(&s);
    let id = s.id("w").unwrap();
    s.get_mut(id).tensor.accumulate_grad(&[0.0; 3]).unwrap();
    assert!(adam_step(&mut s, &mut st, 0.1, 0.0, &AdamConfig::default()).unwrap());
    assert_eq!(s.get(id).tensor.data(), &[0.5, -1.0, 2.0]);

    s.get_mut(id).tensor.accumulate_grad(&[0.0; 3]).unwrap();
    adam_step(&mut s, &mut st, 0.1, 0.2, &AdamConfig::default()).unwrap();
    for (v, want) in s.get(id).tensor.data().iter().zip([0.5 * 0.98, -0.98, 2.0 * 0.98]) {
        assert!((v - want).abs() < 1e-15);
    }
}

#[test]
fn adam_first_step_is_signed_lr() {
    for (b1, b2) in [(0.9, 0.999), (0.5, 0.9), (0.0, 0.99)] {
        let cfg = AdamConfig {
            beta1: b1,
            beta2: b2,
            eps: 1e-8,
        };
        let mut s = store(&[1.0, 1.0, 1.0], false);
        let mut st = AdamState::new(&s);
        let id = s.id("w").unwrap();
        let g = [3.0, -0.01, 1e-3];
        s.get_mut(id).tensor.accumulate_grad(&g).unwrap();
        adam_step(&mut s, &mut st, 0.01, 0.2, &cfg).unwrap();
        for (v, gi) in s.get(id).tensor.data().iter().zip(g) {
            // hand step: m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
            let want = 1.0 - 0.01 * gi / (gi.abs() + 1e-8);
            assert!((v - want).abs() < 1e-14, "{v} vs {want}");
        }
        assert!(s.get(id).tensor.grad().is_none());
    }
}

#[test]
fn adam_skips_non_finite_gradients() {
    let mut s = store(&[1.0, 2.0], true);
    let mut st = AdamState::new(&s);
    let id = s.id("w").unwrap();
    s.get_mut(id).tensor.accumulate_grad(&[f64::NAN, 1.0]).unwrap();
    assert!(!adam_step(&mut s, &mut st, 0.1, 0.2, &AdamConfig::default()).unwrap());
    assert_eq!(s.get(id).tensor.data(), &[1.0, 2.0]);
    assert_eq!((st.skipped, st.t), (1, 0));
}

#[test]
fn adam_rejects_mismatched_state() {
    let mut s = store(&[1.0, 2.0], true);
    let mut st = AdamState::new(&store(&[1.0], true));
    assert!(adam_step(&mut s, &mut st, 0.1, 0.0, &AdamConfig::default()).is_err());
}

#[test]
fn random_split_partitions_every_pair() {
    let ds = Dataset::random_split(tiny_pairs(50), &Default::default(), 3).unwrap();
    assert_eq!((ds.train.len(), ds.valid.len(), ds.test.len()), (40, 5, 5));
    let again = Dataset::random_split(tiny_pairs(50), &Default::default(), 3).unwrap();
    assert_eq!(ds, again);
    let mut ids: Vec<String> = ds.assignments().into_iter().map(|(id, _)| id).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 50);
    let mut dup = tiny_pairs(3);
    dup[2].id = dup[0].id.clone();
    assert!(matches!(Dataset::random_split(dup, &Default::default(), 0), Err(Error::Data(_))));
}

fn prep_for(ds: &Dataset) -> Preprocessor {
    Preprocessor::fit(&ds.train, &tiny_config()).unwrap()
}

#[test]
fn batches_follow_the_rng_and_reject_duplicates() {
    let ds = tiny_dataset(20);
    let prep = prep_for(&ds);
    let opts = BatchOptions {
        random_crop: true,
        audio_aug: true,
        ssl_views: true,
    };
    let a: Batch<f32> = build_batch(&ds.train, &[0, 3, 5], &prep, opts, &mut rng::stream(1, &[9])).unwrap();
    let b: Batch<f32> = build_batch(&ds.train, &[0, 3, 5], &prep, opts, &mut rng::stream(1, &[9])).unwrap();
    assert_eq!(a.mels, b.mels);
    assert_eq!(a.views, b.views);
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.mels.shape()[0], 3);
    assert_ne!(a.mels, a.views.clone().unwrap());

    let err = build_batch::<f32, _>(&ds.train, &[1, 2, 1], &prep, opts, &mut rng::stream(1, &[9]));
    assert!(matches!(err, Err(Error::InvalidArgument(_))));
    let err = build_batch::<f32, _>(&ds.train, &[99], &prep, opts, &mut rng::stream(1, &[9]));
    assert!(matches!(err, Err(Error::IndexOutOfRange { .. })));

    let fixed = BatchOptions::eval();
    let c: Batch<f32> = build_batch(&ds.train, &[2, 4], &prep, fixed, &mut rng::stream(1, &[1])).unwrap();
    let d: Batch<f32> = build_batch(&ds.train, &[2, 4], &prep, fixed, &mut rng::stream(2, &[2])).unwrap();
    assert_eq!(c.mels, d.mels);
    assert!(c.views.is_none());
}

#[test]
fn frozen_epoch_leaves_parameters_bitwise_unchanged() {
    let ds = tiny_dataset(20);
    let mut t = Trainer::<f32>::new(&ds, &tiny_config()).unwrap();
    let before = t.model.params.clone();
    let loss = t.train_epoch_with(0, |_| Ok(0.0)).unwrap();
    assert!(loss.is_finite());
    for ((_, a), (_, b)) in before.iter().zip(t.model.params.iter()) {
        let bits = |p: &crate::numcore::Parameter<f32>| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{}", a.name);
    }
}

#[test]
fn pipeline_loss_equals_standalone_composition() {
    let ds = tiny_dataset(20);
    let cfg = tiny_config();
    assert!(cfg.train.flags.loss_weighting);
    let t = Trainer::<f64>::new(&ds, &cfg).unwrap();
    let idx = &t.epoch_batches(0)[0];
    let batch = t.batch(0, 0, idx).unwrap();
    let mut g = Graph::new();
    let s = t.step_graph(&mut g, &batch).unwrap();
    let w = s.weights.clone().unwrap();

    let za = g.value(s.za).clone();
    let zt = g.value(s.zt).clone();
    let mut h = Graph::new();
    let (a, b) = (h.constant(za).unwrap(), h.constant(zt).unwrap());
    let tau = h.constant(Tensor::scalar(t.model.inv_tau())).unwrap();
    let l = bidirectional_loss(&mut h, a, b, tau, Some(&w)).unwrap();
    assert_eq!(g.value(s.loss).data()[0].to_bits(), h.value(l).data()[0].to_bits());
}

#[test]
fn ssl_flag_controls_the_nt_xent_path() {
    let ds = tiny_dataset(20);
    let mut cfg = tiny_config();
    for ssl in [false, true] {
        cfg.train.flags.ssl = ssl;
        let t = Trainer::<f32>::new(&ds, &cfg).unwrap();
        assert_eq!(t.model.has_ssl_head(), ssl);
        let batch = t.batch(0, 0, &t.epoch_batches(0)[0]).unwrap();
        let mut g = Graph::new();
        let s = t.step_graph(&mut g, &batch).unwrap();
        assert_eq!(g.has_tag("nt_xent"), ssl);
        assert_eq!(s.loss == s.cross, !ssl);
    }
}

#[test]
fn attention_pool_flag_switches_to_spatial_mean() {
    let ds = tiny_dataset(20);
    let mut cfg = tiny_config();
    cfg.train.flags.attention_pool = false;
    let t = Trainer::<f32>::new(&ds, &cfg).unwrap();
    let batch = t.batch(0, 0, &t.epoch_batches(0)[0]).unwrap();
    let mut g = Graph::new();
    t.step_graph(&mut g, &batch).unwrap();
    assert!(g.has_tag("spatial_mean") && !g.has_tag("attention_pool"));
}

#[test]
fn same_seed_gives_identical_first_epoch_loss() {
    let ds = tiny_dataset(20);
    let run = || Trainer::<f32>::new(&ds, &tiny_config()).unwrap().train_epoch(0).unwrap().0;
    assert_eq!(run().to_bits(), run().to_bits());
}

fn forward_bits(model: &MusCall<f32>, prep: &Preprocessor, pairs: &[Pair]) -> Vec<u64> {
    let (a, t) = embed_pairs(model, prep, pairs, 3).unwrap();
    a.iter().chain(&t).flatten().map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(20);
    let mut cfg = tiny_config();
    cfg.train.flags.ssl = true;
    let mut t = Trainer::<f32>::new(&ds, &cfg).unwrap();
    t.train_epoch(0).unwrap();
    let ck = t.checkpoint(0, 0.5);
    let path = dir.path().join("model.ck");
    ck.save(&path).unwrap();

    let back = Checkpoint::<f32>::load(&path, LoadMode::Full).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(back.mel_stats, ck.mel_stats);
    assert_eq!(back.adam, ck.adam);
    assert_eq!((back.epoch, back.best_val_r10), (0, 0.5));
    for ((_, a), (_, b)) in ck.model.params.iter().zip(back.model.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    let prep = back.preprocessor().unwrap();
    assert_eq!(forward_bits(&ck.model, &t.prep, &ds.test), forward_bits(&back.model, &prep, &ds.test));

    let eval = Checkpoint::<f32>::load(&path, LoadMode::EvalOnly).unwrap();
    assert!(!eval.model.has_ssl_head() && eval.adam.is_none());
    assert_eq!(forward_bits(&ck.model, &t.prep, &ds.test), forward_bits(&eval.model, &prep, &ds.test));
    assert!(matches!(Checkpoint::<f64>::load(&path, LoadMode::Full), Err(Error::Format { .. })));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(20);
    let t = Trainer::<f32>::new(&ds, &tiny_config()).unwrap();
    let path = dir.path().join("model.ck");
    t.checkpoint(0, 0.0).save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let err = Checkpoint::<f32>::from_bytes(&bad, LoadMode::Full).unwrap_err();
    assert!(matches!(&err, Error::Format { expected, .. } if expected.contains("magic")), "{err}");

    let mut bad = bytes.clone();
    bad[4] = 9;
    let err = Checkpoint::<f32>::from_bytes(&bad, LoadMode::Full).unwrap_err();
    assert!(matches!(&err, Error::Format { found, .. } if found.contains("version 9")), "{err}");

    for cut in [3, 12, 40, bytes.len() - 5] {
        let err = Checkpoint::<f32>::from_bytes(&bytes[..cut], LoadMode::Full).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
    }
}

#[test]
fn missing_parameters_are_a_key_set_error() {
    let ds = tiny_dataset(20);
    let t = Trainer::<f32>::new(&ds, &tiny_config()).unwrap();
    let bytes = {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ck");
        t.checkpoint(0, 0.0).save(&p).unwrap();
        std::fs::read(p).unwrap()
    };
    // ask for an SSL head the checkpoint does not contain
    let mut with_ssl = t.cfg.clone();
    with_ssl.train.flags.ssl = true;
    let mut ck = t.checkpoint(0, 0.0);
    ck.model = build_model(&with_ssl, true).unwrap();
    ck.config = with_ssl;
    ck.adam = None;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ssl.ck");
    ck.save(&p).unwrap();
    assert!(Checkpoint::<f32>::load(&p, LoadMode::Full).unwrap().model.has_ssl_head());
    assert!(Checkpoint::<f32>::from_bytes(&bytes, LoadMode::Full).is_ok());
}

#[test]
fn fit_logs_every_epoch_and_keeps_the_best() {
    let dir = tempfile::tempdir().unwrap();
    let ds = tiny_dataset(24);
    let log = dir.path().join("train.jsonl");
    let out = fit::<f32>(&ds, &tiny_config(), Some(&log)).unwrap();
    assert_eq!(out.log.len(), 2);
    let lines: Vec<EpochLog> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, out.log);
    let best = out.log.iter().map(|e| e.val_r10).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.best_val_r10, best);
    assert_eq!(out.log[0].lr, tiny_config().train.lr);
}

#[test]
fn empty_splits_are_errors() {
    let mut ds = tiny_dataset(20);
    ds.valid.clear();
    assert!(matches!(Trainer::<f32>::new(&ds, &tiny_config()), Err(Error::Data(_))));
    let ds = Dataset::default();
    assert!(matches!(fit::<f32>(&ds, &tiny_config(), None), Err(Error::Data(_))));
}

#[test]
fn projections_stay_normalized_after_training() {
    let ds = tiny_dataset(20);
    let mut t = Trainer::<f64>::new(&ds, &tiny_config()).unwrap();
    t.train_epoch(0).unwrap();
    let (a, txt) = embed_pairs(&t.model, &t.prep, &ds.valid, 4).unwrap();
    for v in a.iter().chain(&txt) {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9 + NORM_EPS);
    }
    assert!(t.model.inv_tau() <= t.cfg.joint.logit_scale_max * (1.0 + 1e-12));
}
