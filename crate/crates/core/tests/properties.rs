//! Property tests across module boundaries.

use muscall_core::eval::{map_at_10, median_rank, ranks_from_scores, recall_at_k};
use muscall_core::objectives::relevance_weights_from_matrix;
use muscall_core::text::{detokenize, normalize_text, tokenize, train_bpe, DEFAULT_MAX_LEN};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..12, 2usize..12).prop_flat_map(|(q, c)| {
        (
            prop::collection::vec(prop::collection::vec(-4i32..4, c), q),
            prop::collection::vec(0..c, q),
        )
            .prop_map(|(s, g)| (s.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect(), g))
    })
}

proptest! {
    #[test]
    fn retrieval_metrics_are_consistent((scores, gt) in matrix()) {
        let ranks = ranks_from_scores(&scores, &gt).unwrap();
        let nc = scores[0].len();
        prop_assert!(ranks.iter().all(|&r| (1..=nc).contains(&r)));
        let mut last = 0.0;
        for k in 1..=nc {
            let r = recall_at_k(&ranks, k).unwrap();
            prop_assert!(r >= last);
            last = r;
        }
        prop_assert_eq!(last, 100.0);
        let medr = median_rank(&ranks).unwrap();
        prop_assert!(medr >= 1.0 && medr <= nc as f64);
        let map = map_at_10(&ranks);
        prop_assert!((0.0..=1.0).contains(&map));
        prop_assert!(map * 100.0 >= recall_at_k(&ranks, 1).unwrap() - 1e-9);
    }

    #[test]
    fn normalized_weights_average_one(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 6), 6),
        kappa in 0.001f64..2.0,
    ) {
        let w = relevance_weights_from_matrix(&rows, kappa, true, true).unwrap().w;
        prop_assert!(w.iter().all(|v| v.is_finite() && *v > 0.0));
        prop_assert!((w.iter().sum::<f64>() / 6.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tokenizer_round_trips_normalized_text(text in "[a-z ]{0,40}") {
        let vocab = train_bpe(&["a slow track with low pitch", "a fast bright track"], 300).unwrap();
        let seq = tokenize(&text, &vocab, DEFAULT_MAX_LEN).unwrap();
        prop_assert_eq!(detokenize(&seq, &vocab), normalize_text(&text));
    }
}
