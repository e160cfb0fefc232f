use std::cmp::Ordering;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    TextToAudio,
    AudioToText,
}

/// Query × candidate cosine scores with the aligned candidate per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub scores: Vec<Vec<f64>>,
    pub query_ids: Vec<String>,
    pub candidate_ids: Vec<String>,
    pub ground_truth: Vec<usize>,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dot products of every query with every candidate.
pub fn score_matrix(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = queries.first().or(candidates.first()).map_or(0, Vec::len);
    for v in queries.iter().chain(candidates) {
        if v.len() != d {
            return Err(Error::shape("score_matrix", &[d], &[v.len()]));
        }
    }
    Ok(queries.iter().map(|q| candidates.iter().map(|c| dot(q, c)).collect()).collect())
}

/// Rank of each query's ground truth: the number of candidates scoring at
/// least as high as it, so ties place the ground truth last.
pub fn ranks_from_scores(scores: &[Vec<f64>], ground_truth: &[usize]) -> Result<Vec<usize>> {
    if scores.len() != ground_truth.len() {
        return Err(Error::shape("rank", &[scores.len()], &[ground_truth.len()]));
    }
    scores
        .iter()
        .zip(ground_truth)
        .map(|(row, &gt)| {
            let s = *row.get(gt).ok_or(Error::IndexOutOfRange {
                what: "ground truth candidate",
                index: gt,
                size: row.len(),
            })?;
            if !s.is_finite() {
                return Err(Error::NonFinite { op: "rank" });
            }
            Ok(row.iter().filter(|&&c| c >= s).count())
        })
        .collect()
}

/// Scores and ground-truth ranks for L2-normalized embeddings.
pub fn rank(queries: &[Vec<f64>], candidates: &[Vec<f64>], ground_truth: &[usize]) -> Result<(ScoreMatrix, Vec<usize>)> {
    let scores = score_matrix(queries, candidates)?;
    let ranks = ranks_from_scores(&scores, ground_truth)?;
    Ok((
        ScoreMatrix {
            scores,
            query_ids: (0..queries.len()).map(|i| i.to_string()).collect(),
            candidate_ids: (0..candidates.len()).map(|i| i.to_string()).collect(),
            ground_truth: ground_truth.to_vec(),
        },
        ranks,
    ))
}

/// Percentage of queries whose ground truth ranks within the top `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("recall over zero queries".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("recall at K needs K >= 1".into()));
    }
    Ok(100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// mAP@10 with a single relevant item per query.
pub fn map_at_10(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().map(|&r| if r >= 1 && r <= 10 { 1.0 / r as f64 } else { 0.0 }).sum::<f64>() / ranks.len() as f64
}

/// Average precision within the top `k` for one query with any number of
/// relevant candidates, normalized by `min(k, #relevant)`. Ties are ordered
/// pessimistically (irrelevant before relevant).
pub fn average_precision_at_k(scores: &[f64], relevant: &[bool], k: usize) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::shape("average_precision", &[scores.len()], &[relevant.len()]));
    }
    let n_rel = relevant.iter().filter(|&&r| r).count();
    if n_rel == 0 || k == 0 {
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(relevant[a].cmp(&relevant[b]))
    });
    let mut hits = 0;
    let mut total = 0.0;
    for (pos, &i) in order.iter().take(k).enumerate() {
        if relevant[i] {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    Ok(total / n_rel.min(k) as f64)
}

/// Median of the ranks; the two middle values are averaged for even counts.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("median of zero ranks".into()));
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    let n = r.len();
    Ok(if n % 2 == 1 {
        r[n / 2] as f64
    } else {
        (r[n / 2 - 1] + r[n / 2]) as f64 / 2.0
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub direction: Direction,
    pub n_queries: usize,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
    pub map10: f64,
    pub medr: f64,
}

impl EvalReport {
    pub fn from_ranks(direction: Direction, ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            direction,
            n_queries: ranks.len(),
            r_at_1: recall_at_k(ranks, 1)?,
            r_at_5: recall_at_k(ranks, 5)?,
            r_at_10: recall_at_k(ranks, 10)?,
            map10: map_at_10(ranks),
            medr: median_rank(ranks)?,
        })
    }
}

/// Both retrieval directions for aligned audio/text embedding rows.
pub fn evaluate_retrieval(audio: &[Vec<f64>], text: &[Vec<f64>]) -> Result<[EvalReport; 2]> {
    if audio.len() != text.len() {
        return Err(Error::shape("evaluate_retrieval", &[audio.len()], &[text.len()]));
    }
    let gt: Vec<usize> = (0..audio.len()).collect();
    let (_, t2a) = rank(text, audio, &gt)?;
    let (_, a2t) = rank(audio, text, &gt)?;
    Ok([
        EvalReport::from_ranks(Direction::TextToAudio, &t2a)?,
        EvalReport::from_ranks(Direction::AudioToText, &a2t)?,
    ])
}

/// Seeded subset of `size` distinct indices out of `n`, in ascending order.
pub fn sample_subset(n: usize, size: usize, seed: u64) -> Vec<usize> {
    if size >= n {
        return (0..n).collect();
    }
    let mut r = rng::stream(seed, &[rng::domain::SUBSET]);
    let mut idx = sample(&mut r, n, size).into_vec();
    idx.sort_unstable();
    idx
}
