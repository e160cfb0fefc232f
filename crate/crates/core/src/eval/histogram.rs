use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::retrieval::dot;
use crate::error::{Error, Result};

/// Positive (aligned) and negative (misaligned) audio-text similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub positive_mean: f64,
    pub positive_var: f64,
    pub negative_mean: f64,
    pub negative_var: f64,
    /// Standard error of the difference of the two means.
    pub diff_std_error: f64,
}

impl SimilarityHistogram {
    pub fn summary(&self) -> HistogramSummary {
        let (pm, pv) = mean_var(&self.positives);
        let (nm, nv) = mean_var(&self.negatives);
        let se = (pv / self.positives.len() as f64 + nv / self.negatives.len().max(1) as f64).sqrt();
        HistogramSummary {
            positive_mean: pm,
            positive_var: pv,
            negative_mean: nm,
            negative_var: nv,
            diff_std_error: se,
        }
    }

    /// CSV with columns `score,is_positive`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        let mut body = String::from("score,is_positive\n");
        for (vals, flag) in [(&self.positives, 1), (&self.negatives, 0)] {
            for v in vals.iter() {
                body.push_str(&format!("{v},{flag}\n"));
            }
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// Splits all audio-text scores of aligned test pairs into positives and negatives.
pub fn similarity_histograms(audio: &[Vec<f64>], text: &[Vec<f64>]) -> Result<SimilarityHistogram> {
    if audio.len() != text.len() || audio.is_empty() {
        return Err(Error::shape("similarity_histograms", &[audio.len()], &[text.len()]));
    }
    let mut h = SimilarityHistogram {
        positives: Vec::with_capacity(audio.len()),
        negatives: Vec::with_capacity(audio.len() * (audio.len() - 1)),
    };
    for (i, a) in audio.iter().enumerate() {
        for (j, t) in text.iter().enumerate() {
            if a.len() != t.len() {
                return Err(Error::shape("similarity_histograms", &[a.len()], &[t.len()]));
            }
            let s = dot(a, t);
            if i == j {
                h.positives.push(s);
            } else {
                h.negatives.push(s);
            }
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_has_no_negatives() {
        let h = similarity_histograms(&[vec![1.0, 0.0]], &[vec![0.6, 0.8]]).unwrap();
        assert_eq!(h.positives, vec![0.6]);
        assert!(h.negatives.is_empty());
    }

    #[test]
    fn summary_and_csv() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let h = similarity_histograms(&a, &a).unwrap();
        let s = h.summary();
        assert_eq!((s.positive_mean, s.negative_mean), (1.0, 0.0));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        h.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("score,is_positive\n1,1\n"));
    }
}
