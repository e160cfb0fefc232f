use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of rows whose argmax equals the label. Ties go to the lowest index.
pub fn accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::shape("accuracy", &[scores.len()], &[labels.len()]));
    }
    let hits = scores.iter().zip(labels).filter(|(row, &l)| argmax(row) == Some(l)).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f64]) -> Option<usize> {
    row.iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if v <= b => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("binary metric", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { op: "binary metric" });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Probability that a positive outscores a negative, ties counting one half.
/// `None` when either class is empty.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    // midranks over ascending scores
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (pf, nf) = (p as f64, n as f64);
    Ok(Some((rank_sum - pf * (pf + 1.0) / 2.0) / (pf * nf)))
}

/// Average precision: the mean over positives of the precision among all
/// items scoring at least as high. `None` without positives or negatives.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut total = 0.0;
    let (mut seen, mut seen_pos) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        seen_pos += group_pos;
        total += group_pos as f64 * seen_pos as f64 / seen as f64;
        i = j + 1;
    }
    Ok(Some(total / p as f64))
}

/// Macro average over classes (columns) with the classes that were skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetric {
    pub value: f64,
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

fn macro_average(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    f: fn(&[f64], &[bool]) -> Result<Option<f64>>,
    name: &str,
) -> Result<MacroMetric> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::shape("macro metric", &[scores.len()], &[labels.len()]));
    }
    let c = scores[0].len();
    if scores.iter().any(|r| r.len() != c) || labels.iter().any(|r| r.len() != c) {
        return Err(Error::InvalidArgument("ragged score or label matrix".into()));
    }
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        per_class.push(f(&s, &l)?);
    }
    let excluded: Vec<usize> = per_class.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect();
    if !excluded.is_empty() {
        log::warn!("{name}: classes {excluded:?} lack positives or negatives and are excluded from the macro average");
    }
    let kept: Vec<f64> = per_class.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Data(format!("{name}: no class has both positives and negatives")));
    }
    Ok(MacroMetric {
        value: kept.iter().sum::<f64>() / kept.len() as f64,
        per_class,
        excluded,
    })
}

pub fn macro_roc_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroMetric> {
    macro_average(scores, labels, roc_auc, "roc_auc")
}

pub fn macro_pr_auc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroMetric> {
    macro_average(scores, labels, pr_auc, "pr_auc")
}

/// One-hot label matrix for single-label targets.
pub fn one_hot(labels: &[usize], n_classes: usize) -> Vec<Vec<bool>> {
    labels.iter().map(|&l| (0..n_classes).map(|k| k == l).collect()).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn roc_oracle(s: &[f64], l: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    fn pr_oracle(s: &[f64], l: &[bool]) -> f64 {
        let p = l.iter().filter(|&&x| x).count() as f64;
        let mut total = 0.0;
        for i in 0..s.len() {
            if l[i] {
                let above = (0..s.len()).filter(|&j| s[j] >= s[i]).count() as f64;
                let pos_above = (0..s.len()).filter(|&j| s[j] >= s[i] && l[j]).count() as f64;
                total += pos_above / above;
            }
        }
        total / p
    }

    #[test]
    fn hand_values() {
        let s = [0.9, 0.8, 0.3, 0.2];
        let l = [true, false, true, false];
        assert!((roc_auc(&s, &l).unwrap().unwrap() - 0.75).abs() < 1e-12);
        assert!((pr_auc(&s, &l).unwrap().unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let sep = [true, true, false, false];
        assert_eq!(roc_auc(&s, &sep).unwrap(), Some(1.0));
        assert_eq!(pr_auc(&s, &sep).unwrap(), Some(1.0));
        assert_eq!(roc_auc(&s, &[true; 4]).unwrap(), None);
    }

    #[test]
    fn accuracy_and_argmax() {
        let scores = vec![vec![0.1, 0.9], vec![0.8, 0.2], vec![0.5, 0.5]];
        assert!((accuracy(&scores, &[1, 1, 0]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn macro_excludes_degenerate_classes() {
        let scores = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.8, 0.3]];
        let labels = vec![vec![true, false, true], vec![false, true, true]];
        let m = macro_roc_auc(&scores, &labels).unwrap();
        assert_eq!(m.excluded, vec![2]);
        assert_eq!(m.value, 1.0);
        assert_eq!(one_hot(&[1, 0], 2), vec![vec![false, true], vec![true, false]]);
    }

    proptest! {
        #[test]
        fn binary_metrics_match_oracles(seed in any::<u64>(), n in 2usize..20) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<f64> = (0..n).map(|_| r.gen_range(0..6) as f64 / 5.0).collect();
            let mut l: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
            l[0] = true;
            l[1] = false;
            let roc = roc_auc(&s, &l).unwrap().unwrap();
            prop_assert!((roc - roc_oracle(&s, &l)).abs() <= 1e-12);
            let pr = pr_auc(&s, &l).unwrap().unwrap();
            prop_assert!((pr - pr_oracle(&s, &l)).abs() <= 1e-12);
            // strictly monotone transform leaves roc unchanged
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert!((roc_auc(&t, &l).unwrap().unwrap() - roc).abs() <= 1e-12);
        }
    }
}
