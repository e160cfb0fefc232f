//! Retrieval ranking and metrics, classification metrics and zero-shot transfer.

mod classify;
mod histogram;
mod retrieval;
mod zeroshot;

pub use classify::{accuracy, argmax, macro_pr_auc, macro_roc_auc, one_hot, pr_auc, roc_auc, MacroMetric};
pub use histogram::{similarity_histograms, HistogramSummary, SimilarityHistogram};
pub use retrieval::{
    average_precision_at_k, evaluate_retrieval, map_at_10, median_rank, rank, ranks_from_scores, recall_at_k,
    sample_subset, score_matrix, Direction, EvalReport, ScoreMatrix,
};
pub use zeroshot::{predict, zero_shot_classify, ZeroShotTask, LABEL_PLACEHOLDER};

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::{AudioEncoderConfig, JointSpaceConfig, MusCall, TextEncoderConfig};
    use crate::text::train_bpe;

    fn tiny() -> (MusCall<f64>, crate::text::BpeVocab) {
        let v = train_bpe(&["high pitch", "low pitch"], 270).unwrap();
        let m = MusCall::new(
            AudioEncoderConfig { stem_channels: [2, 2, 4], stage_widths: vec![4, 8], attn_heads: 2, ..Default::default() },
            TextEncoderConfig { depth: 1, width: 8, heads: 2, max_len: 16, vocab_size: v.len() },
            JointSpaceConfig { embed_dim: 6, ..Default::default() },
            false,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        (m, v)
    }

    #[test]
    fn templates_need_the_placeholder() {
        let t = ZeroShotTask { labels: vec!["rock".into()], prompt_template: Some("a track".into()), multilabel: false };
        assert!(t.prompts().is_err());
        let t = ZeroShotTask { labels: vec!["rock".into(), "jazz".into()], prompt_template: Some("a {label} track".into()), multilabel: false };
        assert_eq!(t.prompts().unwrap(), vec!["a rock track", "a jazz track"]);
        assert!(ZeroShotTask::new(vec![], None, false).is_err());
        assert!(ZeroShotTask::new(vec!["a".into(), "a".into()], None, false).is_err());
    }

    #[test]
    fn zero_shot_scores_behave() {
        let (m, v) = tiny();
        let audio = vec![vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.0, 2.0, 1.0, 0.0, 0.0, -1.0]];
        let plain = ZeroShotTask { labels: vec!["high pitch".into(), "low pitch".into()], prompt_template: None, multilabel: false };
        let s = zero_shot_classify(&audio, &plain, &m, &v).unwrap();
        assert_eq!((s.len(), s[0].len()), (2, 2));
        let wrapped = ZeroShotTask { prompt_template: Some("a track with {label}".into()), ..plain.clone() };
        assert_ne!(s, zero_shot_classify(&audio, &wrapped, &m, &v).unwrap());
        // identical label texts give identical columns
        let dup = ZeroShotTask { labels: vec!["high pitch".into(), "HIGH  pitch".into()], prompt_template: None, multilabel: false };
        let d = zero_shot_classify(&audio, &dup, &m, &v).unwrap();
        assert!(d.iter().all(|r| r[0] == r[1]));
        // positive rescaling of the audio side keeps the argmax
        let scaled: Vec<Vec<f64>> = audio.iter().map(|r| r.iter().map(|x| 7.0 * x).collect()).collect();
        assert_eq!(predict(&s), predict(&zero_shot_classify(&scaled, &plain, &m, &v).unwrap()));
    }
}
