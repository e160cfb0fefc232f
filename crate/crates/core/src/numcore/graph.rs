//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! Every kernel computes its forward value eagerly, checks it for NaN/Inf and
//! records enough information to run its backward rule. Gradients flow from a
//! scalar loss back to the leaves; leaf gradients accumulate across repeated
//! `backward` calls until [`Graph::zero_leaf_grads`] is called.

use std::collections::BTreeMap;

use super::param::{ParamId, ParamStore};
use super::real::Real;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Unary {
    Exp,
    Ln,
    Relu,
    Gelu,
    Neg,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Unary, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    L2Normalize(Var, T),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Diag(Var),
    Embedding(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    IndexSelect(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    AvgPool2d(Var, usize),
    BlurPool(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded kernels.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    tags: Vec<&'static str>,
}

fn suffix_broadcastable(a: &[usize], b: &[usize]) -> bool {
    a == b || numel(b) == 1 || (b.len() <= a.len() && a.ends_with(b))
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = if cols == 0 { 0 } else { numel(shape) / cols };
    (rows, cols)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    j as usize
}

const BLUR_TAPS: [f64; 3] = [1.0, 2.0, 1.0];

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|s| s / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let hw = ho * wo;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            tags: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a named marker; used to observe which code paths ran.
    pub fn tag(&mut self, name: &'static str) {
        self.tags.push(name);
    }

    pub fn tags(&self) -> &[&'static str] {
        &self.tags
    }

    pub fn has_tag(&self, name: &str) -> bool {
        self.tags.iter().any(|t| *t == name)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Binary(_, a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(_, a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::LogSumExp(a)
            | Op::L2Normalize(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Diag(a)
            | Op::Embedding(a, _)
            | Op::Slice(a, _, _)
            | Op::IndexSelect(a, _)
            | Op::AvgPool2d(a, _)
            | Op::BlurPool(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(vs, _) => vs.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    // ----- leaves -----

    /// Leaf holding `t`; gradients are tracked when `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t.with_requires_grad(false), Op::Leaf, "constant")
    }

    /// Leaf bound to a stored parameter; each parameter maps to one node per graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let mut t = store.get(id).tensor.clone();
        t.zero_grad();
        let v = self.push(t.with_requires_grad(true), Op::Leaf, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    /// Gradients of every parameter used in this graph, in id order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, Option<&[T]>)> {
        self.params.iter().map(|(&id, &v)| (id, self.grad(v)))
    }

    /// Adds this graph's parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (&id, &v) in &self.params {
            let p = store.get_mut(id);
            match self.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    let zeros = vec![T::zero(); p.tensor.len()];
                    p.tensor.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    pub fn zero_leaf_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ----- shape kernels -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[0, 0]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), "transpose")
    }

    fn permute_data(x: &[T], shape: &[usize], axes: &[usize]) -> (Vec<T>, Vec<usize>) {
        let nd = shape.len();
        let mut strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
        let total = x.len();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        let mut src = 0usize;
        for _ in 0..total {
            out.push(x[src]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                src += out_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                src -= out_strides[d] * out_shape[d];
                idx[d] = 0;
            }
        }
        (out, out_shape)
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&d| d >= s.len() || std::mem::replace(&mut seen[d], true)) {
            return Err(Error::shape("permute", &s, axes));
        }
        let (out, shape) = Self::permute_data(self.value(a).data(), &s, axes);
        self.push(Tensor::new(shape, out)?, Op::Permute(a, axes.to_vec()), "permute")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(t.with_requires_grad(false), Op::Reshape(a), "reshape")
    }

    // ----- elementwise -----

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !suffix_broadcastable(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let x = self.value(a).data();
        let y = self.value(b).data();
        let nb = y.len();
        let out: Vec<T> = x
            .iter()
            .enumerate()
            .map(|(i, &u)| {
                let w = y[i % nb];
                match kind {
                    Binary::Add => u + w,
                    Binary::Sub => u - w,
                    Binary::Mul => u * w,
                    Binary::Div => u / w,
                }
            })
            .collect();
        let shape = sa.to_vec();
        self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b), name)
    }

    /// `a + b`, where `b` is the same shape, a trailing-shape suffix, or a single value.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&v| v + c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::AddScalar(a), "add_scalar")
    }

    fn unary(&mut self, kind: Unary, a: Var, name: &'static str) -> Result<Var> {
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Exp => v.exp(),
                Unary::Ln => v.ln(),
                Unary::Relu => v.max(T::zero()),
                Unary::Gelu => T::of(gelu_fwd(v.f64())),
                Unary::Neg => -v,
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Unary(kind, a), name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a, "exp")
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Ln, a, "ln")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Relu, a, "relu")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Gelu, a, "gelu")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a, "neg")
    }

    // ----- row kernels over the last dimension -----

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = last_dim(&shape);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            softmax_row(&x[r * cols..(r + 1) * cols], &mut out[r * cols..(r + 1) * cols]);
        }
        self.push(Tensor::new(shape, out)?, Op::Softmax(a), "softmax")
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = last_dim(&shape);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let lse = log_sum_exp(row);
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax(a), "log_softmax")
    }

    /// Log-sum-exp of each row; drops the last dimension.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = last_dim(&shape);
        let x = self.value(a).data();
        let out: Vec<T> = (0..rows).map(|r| log_sum_exp(&x[r * cols..(r + 1) * cols])).collect();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        self.push(Tensor::new(out_shape, out)?, Op::LogSumExp(a), "logsumexp")
    }

    /// Divides each row by `norm + eps`.
    pub fn l2_normalize(&mut self, a: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = last_dim(&shape);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let d = row.iter().map(|&v| v * v).sum::<T>().sqrt() + eps;
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v / d;
            }
        }
        self.push(Tensor::new(shape, out)?, Op::L2Normalize(a, eps), "l2_normalize")
    }

    /// Layer normalization over the last dimension with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = last_dim(&shape);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let n = T::of(cols as f64);
        let mut out = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * rs * gv[j] + bv[j];
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, rstd },
            "layer_norm",
        )
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).data();
        let s = x.iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(a), "mean")
    }

    fn reduce_axis(&self, a: Var, axis: usize, name: &'static str) -> Result<(Vec<T>, Vec<usize>, usize)> {
        let shape = self.shape(a);
        if axis >= shape.len() {
            return Err(Error::shape(name, shape, &[axis]));
        }
        let (outer, ext, inner) = split_axis(shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let src = &x[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok((out, out_shape, ext))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (out, shape, _) = self.reduce_axis(a, axis, "sum_axis")?;
        self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut out, shape, ext) = self.reduce_axis(a, axis, "mean_axis")?;
        let n = T::of(ext as f64);
        out.iter_mut().for_each(|v| *v /= n);
        self.push(Tensor::new(shape, out)?, Op::MeanAxis(a, axis), "mean_axis")
    }

    // ----- indexing -----

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::shape("diag", s, &[s[0], s[0]]));
        }
        let n = s[0];
        let x = self.value(a).data();
        let out = (0..n).map(|i| x[i * n + i]).collect();
        self.push(Tensor::new(vec![n], out)?, Op::Diag(a), "diag")
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("embedding", s, &[0, 0]));
        }
        let (vocab, dim) = (s[0], s[1]);
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    size: vocab,
                });
            }
            out.extend_from_slice(&t[id * dim..(id + 1) * dim]);
        }
        self.push(
            Tensor::new(vec![ids.len(), dim], out)?,
            Op::Embedding(table, ids.to_vec()),
            "embedding",
        )
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*vars.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let ext = self.shape(v)[axis];
                let x = self.value(v).data();
                out.extend_from_slice(&x[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat(vars.to_vec(), axis), "concat")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * ext + start) * inner..(o * ext + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        self.push(Tensor::new(out_shape, out)?, Op::Slice(a, axis, start), "slice")
    }

    /// Rows along the first axis, in the given order (repeats allowed).
    pub fn index_select(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.first().ok_or_else(|| Error::NotScalar(shape.clone()))?;
        let inner = numel(&shape[1..]);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    what: "index_select",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(&x[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.push(
            Tensor::new(out_shape, out)?,
            Op::IndexSelect(a, rows.to_vec()),
            "index_select",
        )
    }

    // ----- spatial kernels on [batch, channels, height, width] -----

    /// 2-D cross-correlation with zero padding; `w` is `[out, in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(c)) => (a, c),
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        let kk = ci * kh * kw;
        let hw = ho * wo;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = vec![T::zero(); kk * hw];
        let mut out = vec![T::zero(); b * co * hw];
        for n in 0..b {
            im2col(
                &xv[n * ci * h * wd..(n + 1) * ci * h * wd],
                ci,
                h,
                wd,
                kh,
                kw,
                stride,
                pad,
                ho,
                wo,
                &mut cols,
            );
            T::gemm(
                co,
                kk,
                hw,
                T::one(),
                wv,
                kk as isize,
                1,
                &cols,
                hw as isize,
                1,
                T::zero(),
                &mut out[n * co * hw..(n + 1) * co * hw],
                hw as isize,
                1,
            );
        }
        self.push(
            Tensor::new(vec![b, co, ho, wo], out)?,
            Op::Conv2d { x, w, stride, pad },
            "conv2d",
        )
    }

    /// Non-overlapping `k × k` average pooling (trailing remainder dropped).
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape("avg_pool2d", &s, &[k, k]));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x).data();
        let inv = T::one() / T::of((k * k) as f64);
        let mut out = vec![T::zero(); bc * ho * wo];
        for p in 0..bc {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc * inv;
                }
            }
        }
        self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out)?,
            Op::AvgPool2d(x, k),
            "avg_pool2d",
        )
    }

    /// Anti-aliased downsampling: depthwise `[1,2,1]ᵀ[1,2,1]/16` blur with
    /// reflect padding, then stride-2 subsampling.
    pub fn blur_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 3 || s[3] < 3 {
            return Err(Error::InvalidArgument(format!(
                "blur_pool needs a [batch, channels, H>=3, W>=3] input, got {s:?}"
            )));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = ((h + 1) / 2, (w + 1) / 2);
        let xv = self.value(x).data();
        let taps: Vec<T> = BLUR_TAPS.iter().map(|&t| T::of(t)).collect();
        let norm = T::of(16.0);
        let mut out = vec![T::zero(); bc * ho * wo];
        for p in 0..bc {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for (dy, &ty) in taps.iter().enumerate() {
                        let iy = reflect(2 * oy as isize + dy as isize - 1, h);
                        for (dx, &tx) in taps.iter().enumerate() {
                            let ix = reflect(2 * ox as isize + dx as isize - 1, w);
                            acc += ty * tx * src[iy * w + ix];
                        }
                    }
                    out[(p * ho + oy) * wo + ox] = acc / norm;
                }
            }
        }
        self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out)?,
            Op::BlurPool(x),
            "blur_pool",
        )
    }

    // ----- attention -----

    /// Multi-head scaled dot-product attention over `[batch, len, width]`
    /// inputs already projected to queries, keys and values. With `causal`,
    /// query `i` only attends keys `0..=i` (requires equal lengths).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        if sq.len() != 3 || sk != sv || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("attention", &sq, &sk));
        }
        let (b, lq, width) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by {heads} heads"
            )));
        }
        if causal && lq != lk {
            return Err(Error::shape("causal attention", &sq, &sk));
        }
        let dh = width / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * lq * lk];
        let mut out = vec![T::zero(); b * lq * width];
        for n in 0..b {
            for h in 0..heads {
                let qo = n * lq * width + h * dh;
                let ko = n * lk * width + h * dh;
                let p = &mut probs[((n * heads + h) * lq) * lk..((n * heads + h + 1) * lq) * lk];
                T::gemm(
                    lq,
                    dh,
                    lk,
                    scale,
                    &qv[qo..],
                    width as isize,
                    1,
                    &kv[ko..],
                    1,
                    width as isize,
                    T::zero(),
                    p,
                    lk as isize,
                    1,
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let valid = if causal { i + 1 } else { lk };
                    let mut tmp = vec![T::zero(); valid];
                    softmax_row(&row[..valid], &mut tmp);
                    row[..valid].copy_from_slice(&tmp);
                    row[valid..].fill(T::zero());
                }
                T::gemm(
                    lq,
                    lk,
                    dh,
                    T::one(),
                    p,
                    lk as isize,
                    1,
                    &vv[ko..],
                    width as isize,
                    1,
                    T::zero(),
                    &mut out[qo..],
                    width as isize,
                    1,
                );
            }
        }
        self.push(
            Tensor::new(vec![b, lq, width], out)?,
            Op::Attention { q, k, v, heads, probs },
            "attention",
        )
    }

    // ----- reverse mode -----

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            log::warn!("backward on a loss that does not depend on any tracked tensor; gradients are zero");
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (v, c) in self.backward_op(i, &g)? {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, i: usize, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut da = vec![T::zero(); m * k];
                let mut db = vec![T::zero(); k * n];
                // da = g · bᵀ
                T::gemm(m, n, k, T::one(), g, n as isize, 1, self.value(*b).data(), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                // db = aᵀ · g
                T::gemm(k, m, n, T::one(), self.value(*a).data(), 1, k as isize, g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*a, d)]
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (d, _) = Self::permute_data(g, node.value.shape(), &inv);
                vec![(*a, d)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Binary(kind, a, b) => {
                let x = self.value(*a).data();
                let w = self.value(*b).data();
                let nb = w.len();
                let mut da = vec![T::zero(); x.len()];
                let mut db = vec![T::zero(); nb];
                for idx in 0..x.len() {
                    let j = idx % nb;
                    let gi = g[idx];
                    match kind {
                        Binary::Add => {
                            da[idx] = gi;
                            db[j] += gi;
                        }
                        Binary::Sub => {
                            da[idx] = gi;
                            db[j] -= gi;
                        }
                        Binary::Mul => {
                            da[idx] = gi * w[j];
                            db[j] += gi * x[idx];
                        }
                        Binary::Div => {
                            da[idx] = gi / w[j];
                            db[j] -= gi * x[idx] / (w[j] * w[j]);
                        }
                    }
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let d = x
                    .iter()
                    .zip(y)
                    .zip(g)
                    .map(|((&xv, &yv), &gv)| match kind {
                        Unary::Exp => gv * yv,
                        Unary::Ln => gv / xv,
                        Unary::Relu => {
                            if xv > T::zero() {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Gelu => gv * T::of(gelu_grad(xv.f64())),
                        Unary::Neg => -gv,
                    })
                    .collect();
                vec![(*a, d)]
            }
            Op::Softmax(a) => {
                let (rows, cols) = last_dim(node.value.shape());
                let mut d = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSoftmax(a) => {
                let (rows, cols) = last_dim(node.value.shape());
                let mut d = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let gsum: T = g[r * cols..(r + 1) * cols].iter().copied().sum();
                    for j in 0..cols {
                        let k = r * cols + j;
                        d[k] = g[k] - y[k].exp() * gsum;
                    }
                }
                vec![(*a, d)]
            }
            Op::LogSumExp(a) => {
                let x = self.value(*a).data();
                let (rows, cols) = last_dim(self.shape(*a));
                let mut d = vec![T::zero(); x.len()];
                for r in 0..rows {
                    for j in 0..cols {
                        let k = r * cols + j;
                        d[k] = g[r] * (x[k] - y[r]).exp();
                    }
                }
                vec![(*a, d)]
            }
            Op::L2Normalize(a, eps) => {
                let x = self.value(*a).data();
                let (rows, cols) = last_dim(node.value.shape());
                let mut d = vec![T::zero(); x.len()];
                for r in 0..rows {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let n = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let den = n + *eps;
                    let gx: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    let coef = if n > T::zero() { gx / (den * den * n) } else { T::zero() };
                    for j in 0..cols {
                        d[r * cols + j] = gr[j] / den - xr[j] * coef;
                    }
                }
                vec![(*a, d)]
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let (rows, cols) = last_dim(node.value.shape());
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); cols];
                let mut dbeta = vec![T::zero(); cols];
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let mean = row.iter().copied().sum::<T>() / n;
                    let rs = rstd[r];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..cols {
                        xhat[j] = (row[j] - mean) * rs;
                        let gj = g[r * cols + j];
                        dg[j] += gj * xhat[j];
                        dbeta[j] += gj;
                        dxhat[j] = gj * gv[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= n;
                    m2 /= n;
                    for j in 0..cols {
                        dx[r * cols + j] = rs * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![(*x, dx), (*gamma, dg), (*beta, dbeta)]
            }
            Op::SumAll(a) => vec![(*a, vec![g[0]; self.value(*a).len()])],
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                vec![(*a, vec![g[0] / T::of(n as f64); n])]
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, ext, inner) = split_axis(self.shape(*a), *axis);
                let f = if matches!(node.op, Op::MeanAxis(..)) {
                    T::one() / T::of(ext as f64)
                } else {
                    T::one()
                };
                let mut d = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        for j in 0..inner {
                            d[(o * ext + e) * inner + j] = g[o * inner + j] * f;
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Diag(a) => {
                let n = g.len();
                let mut d = vec![T::zero(); n * n];
                for i in 0..n {
                    d[i * n + i] = g[i];
                }
                vec![(*a, d)]
            }
            Op::Embedding(table, ids) => {
                let dim = self.shape(*table)[1];
                let mut d = vec![T::zero(); self.value(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..dim {
                        d[id * dim + j] += g[r * dim + j];
                    }
                }
                vec![(*table, d)]
            }
            Op::Concat(vars, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut res = Vec::with_capacity(vars.len());
                let mut offset = 0;
                for &v in vars {
                    let ext = self.shape(v)[*axis];
                    let mut d = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    offset += ext;
                    res.push((v, d));
                }
                res
            }
            Op::Slice(a, axis, start) => {
                let src_shape = self.shape(*a);
                let (outer, ext, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*a, d)]
            }
            Op::IndexSelect(a, rows) => {
                let inner = numel(&self.shape(*a)[1..]);
                let mut d = vec![T::zero(); self.value(*a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..inner {
                        d[r * inner + j] += g[k * inner + j];
                    }
                }
                vec![(*a, d)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (b, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let kk = ci * kh * kw;
                let hw = ho * wo;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                let mut cols = vec![T::zero(); kk * hw];
                let mut dcols = vec![T::zero(); kk * hw];
                let need_dx = self.nodes[x.0].requires_grad;
                for n in 0..b {
                    let xs = &xv[n * ci * h * wd..(n + 1) * ci * h * wd];
                    let gn = &g[n * co * hw..(n + 1) * co * hw];
                    im2col(xs, ci, h, wd, kh, kw, *stride, *pad, ho, wo, &mut cols);
                    // dw += g_n · colsᵀ
                    T::gemm(co, hw, kk, T::one(), gn, hw as isize, 1, &cols, 1, hw as isize, T::one(), &mut dw, kk as isize, 1);
                    if need_dx {
                        // dcols = wᵀ · g_n
                        T::gemm(kk, co, hw, T::one(), wv, 1, kk as isize, gn, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
                        col2im(
                            &dcols,
                            ci,
                            h,
                            wd,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            ho,
                            wo,
                            &mut dx[n * ci * h * wd..(n + 1) * ci * h * wd],
                        );
                    }
                }
                vec![(*x, dx), (*w, dw)]
            }
            Op::AvgPool2d(a, k) => {
                let s = self.shape(*a);
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = T::one() / T::of((k * k) as f64);
                let mut d = vec![T::zero(); bc * h * w];
                for p in 0..bc {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(p * ho + oy) * wo + ox] * inv;
                            for dy in 0..*k {
                                for dx in 0..*k {
                                    d[p * h * w + (oy * k + dy) * w + ox * k + dx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::BlurPool(a) => {
                let s = self.shape(*a);
                let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = ((h + 1) / 2, (w + 1) / 2);
                let taps: Vec<T> = BLUR_TAPS.iter().map(|&t| T::of(t / 4.0)).collect();
                let mut d = vec![T::zero(); bc * h * w];
                for p in 0..bc {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = g[(p * ho + oy) * wo + ox];
                            for (dy, &ty) in taps.iter().enumerate() {
                                let iy = reflect(2 * oy as isize + dy as isize - 1, h);
                                for (dx, &tx) in taps.iter().enumerate() {
                                    let ix = reflect(2 * ox as isize + dx as isize - 1, w);
                                    d[p * h * w + iy * w + ix] += gv * ty * tx;
                                }
                            }
                        }
                    }
                }
                vec![(*a, d)]
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (b, lq, width) = {
                    let s = self.shape(*q);
                    (s[0], s[1], s[2])
                };
                let lk = self.shape(*k)[1];
                let dh = width / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); lq * lk];
                for n in 0..b {
                    for h in 0..*heads {
                        let qo = n * lq * width + h * dh;
                        let ko = n * lk * width + h * dh;
                        let p = &probs[((n * heads + h) * lq) * lk..((n * heads + h + 1) * lq) * lk];
                        // dv += pᵀ · g
                        T::gemm(lk, lq, dh, T::one(), p, 1, lk as isize, &g[qo..], width as isize, 1, T::one(), &mut dv[ko..], width as isize, 1);
                        // dp = g · vᵀ
                        T::gemm(lq, dh, lk, T::one(), &g[qo..], width as isize, 1, &vv[ko..], 1, width as isize, T::zero(), &mut dp, lk as isize, 1);
                        for i in 0..lq {
                            let pr = &p[i * lk..(i + 1) * lk];
                            let dr = &mut dp[i * lk..(i + 1) * lk];
                            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                            for j in 0..lk {
                                dr[j] = pr[j] * (dr[j] - dot);
                            }
                        }
                        // dq = ds · k · scale ; dk = dsᵀ · q · scale
                        T::gemm(lq, lk, dh, scale, &dp, lk as isize, 1, &kv[ko..], width as isize, 1, T::one(), &mut dq[qo..], width as isize, 1);
                        T::gemm(lk, lq, dh, scale, &dp, 1, lk as isize, &qv[qo..], width as isize, 1, T::one(), &mut dk[ko..], width as isize, 1);
                    }
                }
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
        };
        Ok(out)
    }
}

/// Numerically stable log-sum-exp (max subtraction).
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Numerically stable softmax of one row into `out`.
pub fn softmax_row<T: Real>(xs: &[T], out: &mut [T]) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (o, &v) in out.iter_mut().zip(xs) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}
