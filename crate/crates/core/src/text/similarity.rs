use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::normalize_text;
use crate::error::{Error, Result};

/// A caption with a stable identifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub id: String,
    pub text: String,
}

impl Caption {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
        }
    }
}

/// How provider scores are read before they reach the loss weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilaritySign {
    /// Cosine similarity, higher means more alike.
    #[default]
    Similarity,
    /// One minus cosine similarity.
    Distance,
}

impl SimilaritySign {
    pub fn apply(self, cos: f64) -> f64 {
        match self {
            SimilaritySign::Similarity => cos,
            SimilaritySign::Distance => 1.0 - cos,
        }
    }
}

/// Symmetric caption-to-caption similarity in [-1, 1].
pub trait CaptionSimilarity {
    fn similarity(&self, a: &Caption, b: &Caption) -> Result<f64>;

    fn similarity_matrix(&self, captions: &[Caption]) -> Result<Vec<Vec<f64>>> {
        let n = captions.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in i..n {
                let s = self.similarity(&captions[i], &captions[j])?;
                m[i][j] = s;
                m[j][i] = s;
            }
        }
        Ok(m)
    }
}

fn terms(text: &str) -> Vec<String> {
    let norm = normalize_text(text);
    let words: Vec<&str> = norm
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    out.extend(words.windows(2).map(|w| format!("{} {}", w[0], w[1])));
    out
}

fn dot_sparse(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

/// Tf-idf over word unigrams and bigrams with smoothed idf
/// `ln((1 + N) / (1 + df)) + 1`. Terms never seen during fitting are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TfIdf {
    index: HashMap<String, usize>,
    idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("tf-idf corpus is empty".into()));
        }
        let mut df: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            let mut seen = terms(text.as_ref());
            seen.sort();
            seen.dedup();
            for t in seen {
                *df.entry(t).or_default() += 1;
            }
        }
        let mut vocab: Vec<(String, usize)> = df.into_iter().collect();
        vocab.sort();
        let n = corpus.len() as f64;
        let idf = vocab
            .iter()
            .map(|(_, d)| ((1.0 + n) / (1.0 + *d as f64)).ln() + 1.0)
            .collect();
        let index = vocab.into_iter().enumerate().map(|(i, (t, _))| (t, i)).collect();
        Ok(Self { index, idf })
    }

    pub fn n_terms(&self) -> usize {
        self.idf.len()
    }

    /// L2-normalized sparse vector sorted by term index. Empty when no known term occurs.
    pub fn vectorize(&self, text: &str) -> Vec<(usize, f64)> {
        let mut tf: HashMap<usize, f64> = HashMap::new();
        for t in terms(text) {
            if let Some(&i) = self.index.get(&t) {
                *tf.entry(i).or_default() += 1.0;
            }
        }
        let mut v: Vec<(usize, f64)> = tf.into_iter().map(|(i, c)| (i, c * self.idf[i])).collect();
        v.sort_by_key(|&(i, _)| i);
        let norm = v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|(_, x)| *x /= norm);
        }
        v
    }

    fn cosine(&self, a: &str, b: &str, va: &[(usize, f64)], vb: &[(usize, f64)]) -> f64 {
        if va.is_empty() || vb.is_empty() {
            // no known terms on one side: only identical text counts as similar
            return if normalize_text(a) == normalize_text(b) { 1.0 } else { 0.0 };
        }
        dot_sparse(va, vb).clamp(-1.0, 1.0)
    }
}

impl CaptionSimilarity for TfIdf {
    fn similarity(&self, a: &Caption, b: &Caption) -> Result<f64> {
        let (va, vb) = (self.vectorize(&a.text), self.vectorize(&b.text));
        Ok(self.cosine(&a.text, &b.text, &va, &vb))
    }

    fn similarity_matrix(&self, captions: &[Caption]) -> Result<Vec<Vec<f64>>> {
        let vecs: Vec<_> = captions.iter().map(|c| self.vectorize(&c.text)).collect();
        let n = captions.len();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            m[i][i] = 1.0;
            for j in i + 1..n {
                let s = self.cosine(&captions[i].text, &captions[j].text, &vecs[i], &vecs[j]);
                m[i][j] = s;
                m[j][i] = s;
            }
        }
        Ok(m)
    }
}

#[derive(Deserialize)]
struct EmbeddingRow {
    caption_id: String,
    vector: Vec<f64>,
}

/// Precomputed per-caption embeddings, L2-normalized at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn from_rows(rows: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut dim = None;
        let mut map = HashMap::new();
        for (id, mut v) in rows {
            let d = *dim.get_or_insert(v.len());
            if v.len() != d || d == 0 {
                return Err(Error::Data(format!(
                    "embedding for {id} has dimension {}, expected {d}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("embedding for {id} is not finite")));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
            if map.insert(id.clone(), v).is_some() {
                return Err(Error::Data(format!("duplicate embedding for caption {id}")));
            }
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            rows: map,
        })
    }

    /// Reads JSONL lines of `{"caption_id": ..., "vector": [...]}`.
    pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: EmbeddingRow = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
            rows.push((row.caption_id, row.vector));
        }
        Self::from_rows(rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn row(&self, id: &str) -> Result<&[f64]> {
        self.rows
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("no external embedding for caption {id}")))
    }
}

impl CaptionSimilarity for EmbeddingTable {
    fn similarity(&self, a: &Caption, b: &Caption) -> Result<f64> {
        let (x, y) = (self.row(&a.id)?, self.row(&b.id)?);
        Ok(x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().clamp(-1.0, 1.0))
    }
}

/// The two built-in providers.
#[derive(Debug, Clone, PartialEq)]
pub enum SimilarityProvider {
    TfIdf(TfIdf),
    External(EmbeddingTable),
}

impl CaptionSimilarity for SimilarityProvider {
    fn similarity(&self, a: &Caption, b: &Caption) -> Result<f64> {
        match self {
            SimilarityProvider::TfIdf(p) => p.similarity(a, b),
            SimilarityProvider::External(p) => p.similarity(a, b),
        }
    }

    fn similarity_matrix(&self, captions: &[Caption]) -> Result<Vec<Vec<f64>>> {
        match self {
            SimilarityProvider::TfIdf(p) => p.similarity_matrix(captions),
            SimilarityProvider::External(p) => p.similarity_matrix(captions),
        }
    }
}

/// Free-function form of [`CaptionSimilarity::similarity`].
pub fn caption_similarity(provider: &dyn CaptionSimilarity, a: &Caption, b: &Caption) -> Result<f64> {
    provider.similarity(a, b)
}
