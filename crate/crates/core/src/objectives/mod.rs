//! Contrastive, relevance-weighted and self-supervised training losses.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Real, Tensor, Var};
use crate::text::{Caption, CaptionSimilarity, SimilaritySign};

/// Default relevance-weight temperature.
pub const DEFAULT_KAPPA: f64 = 0.005;
/// Default NT-Xent temperature.
pub const SSL_TEMPERATURE: f64 = 0.5;
/// Default weight of the self-supervised term.
pub const DEFAULT_LAMBDA: f64 = 0.3;
/// Allowed deviation of embedding row norms from 1.
pub const NORM_TOLERANCE: f64 = 1e-3;
const MASK: f64 = -1e9;

/// Per-pair loss weights derived from caption relevance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w: Vec<f64>,
    pub kappa: f64,
    pub normalized: bool,
}

impl LossWeights {
    pub fn ones(n: usize) -> Self {
        Self {
            w: vec![1.0; n],
            kappa: DEFAULT_KAPPA,
            normalized: true,
        }
    }
}

fn check_rows<T: Real>(g: &Graph<T>, z: Var, what: &'static str) -> Result<(usize, usize)> {
    let s = g.shape(z);
    if s.len() != 2 {
        return Err(Error::shape(what, s, &[0, 0]));
    }
    let (n, d) = (s[0], s[1]);
    if n < 2 {
        return Err(Error::InvalidArgument(format!("{what} needs at least 2 rows, got {n}")));
    }
    for (i, row) in g.value(z).data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "{what}: row {i} has norm {norm}, expected unit length"
            )));
        }
    }
    Ok((n, d))
}

/// Cross-entropy of each query row against its aligned key, with logits
/// `inv_tau · Zq Zkᵀ`, averaged as `(1/N) Σ w_i ce_i`.
pub fn info_nce_direction<T: Real>(
    g: &mut Graph<T>,
    zq: Var,
    zk: Var,
    inv_tau: Var,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let (n, d) = check_rows(g, zq, "info_nce query")?;
    let (nk, dk) = check_rows(g, zk, "info_nce key")?;
    if (n, d) != (nk, dk) {
        return Err(Error::shape("info_nce", &[n, d], &[nk, dk]));
    }
    if g.value(inv_tau).len() != 1 || !(g.value(inv_tau).data()[0] > T::zero()) {
        return Err(Error::InvalidArgument("inv_tau must be a positive scalar".into()));
    }
    let kt = g.transpose(zk)?;
    let sim = g.matmul(zq, kt)?;
    let logits = g.mul(sim, inv_tau)?;
    let lse = g.logsumexp(logits)?;
    let pos = g.diag(logits)?;
    let mut ce = g.sub(lse, pos)?;
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::shape("info_nce weights", &[n], &[w.len()]));
        }
        let w = g.constant(Tensor::new(vec![n], w.iter().map(|&v| T::of(v)).collect())?)?;
        ce = g.mul(ce, w)?;
    }
    g.mean(ce)
}

/// Sum of both retrieval directions; the same weights apply to each.
pub fn bidirectional_loss<T: Real>(
    g: &mut Graph<T>,
    za: Var,
    zt: Var,
    inv_tau: Var,
    weights: Option<&[f64]>,
) -> Result<Var> {
    let a2t = info_nce_direction(g, za, zt, inv_tau, weights)?;
    let t2a = info_nce_direction(g, zt, za, inv_tau, weights)?;
    g.add(a2t, t2a)
}

/// Relevance weights from a caption similarity matrix:
/// `m_i = mean_j sim_ij`, `w_i ∝ exp(m_i / kappa)`, evaluated in log space.
/// Normalized weights average to 1; unnormalized ones error on overflow.
pub fn relevance_weights_from_matrix(
    sim: &[Vec<f64>],
    kappa: f64,
    normalize: bool,
    include_self: bool,
) -> Result<LossWeights> {
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {kappa}")));
    }
    let n = sim.len();
    if n == 0 {
        return Err(Error::InvalidArgument("relevance weights of an empty batch".into()));
    }
    let mut logw = Vec::with_capacity(n);
    for (i, row) in sim.iter().enumerate() {
        if row.len() != n {
            return Err(Error::shape("relevance_weights", &[n, n], &[i, row.len()]));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "relevance_weights" });
        }
        let (sum, count) = if include_self {
            (row.iter().sum::<f64>(), n)
        } else {
            (row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).sum(), n - 1)
        };
        let m = if count == 0 { 0.0 } else { sum / count as f64 };
        logw.push(m / kappa);
    }
    let w = if normalize {
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.iter().map(|v| (n as f64 * v / total).max(f64::MIN_POSITIVE)).collect()
    } else {
        let w: Vec<f64> = logw.iter().map(|l| l.exp()).collect();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "relevance_weights (unnormalized)" });
        }
        w
    };
    Ok(LossWeights { w, kappa, normalized: normalize })
}

/// Relevance weights for a batch of captions under a similarity provider.
pub fn relevance_weights(
    captions: &[Caption],
    provider: &dyn CaptionSimilarity,
    kappa: f64,
    normalize: bool,
    include_self: bool,
    sign: SimilaritySign,
) -> Result<LossWeights> {
    let mut sim = provider.similarity_matrix(captions)?;
    sim.iter_mut().flatten().for_each(|v| *v = sign.apply(*v));
    relevance_weights_from_matrix(&sim, kappa, normalize, include_self)
}

/// SimCLR loss over the 2N views: each anchor's positive is its counterpart
/// view and its own similarity is left out of the denominator.
pub fn nt_xent<T: Real>(g: &mut Graph<T>, v1: Var, v2: Var, temperature: f64) -> Result<Var> {
    let (n, d) = check_rows(g, v1, "nt_xent view 1")?;
    let shape2 = check_rows(g, v2, "nt_xent view 2")?;
    if shape2 != (n, d) {
        return Err(Error::shape("nt_xent", &[n, d], &[shape2.0, shape2.1]));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    g.tag("nt_xent");
    let m = 2 * n;
    let z = g.concat(&[v1, v2], 0)?;
    let zt = g.transpose(z)?;
    let s = g.matmul(z, zt)?;
    let s = g.scale(s, T::of(1.0 / temperature))?;
    let mut mask = vec![T::zero(); m * m];
    let mut onehot = vec![T::zero(); m * m];
    for i in 0..m {
        mask[i * m + i] = T::of(MASK);
        onehot[i * m + (i + n) % m] = T::one();
    }
    let mask = g.constant(Tensor::new(vec![m, m], mask)?)?;
    let onehot = g.constant(Tensor::new(vec![m, m], onehot)?)?;
    let masked = g.add(s, mask)?;
    let lse = g.logsumexp(masked)?;
    let pos = g.mul(s, onehot)?;
    let pos = g.sum_axis(pos, 1)?;
    let per = g.sub(lse, pos)?;
    g.mean(per)
}

/// `λ · l_ssl + (1 − λ) · l_cross`.
pub fn multitask_loss<T: Real>(g: &mut Graph<T>, l_ssl: Var, l_cross: Var, lambda: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let a = g.scale(l_ssl, T::of(lambda))?;
    let b = g.scale(l_cross, T::of(1.0 - lambda))?;
    g.add(a, b)
}
