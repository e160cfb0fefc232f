use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Steps skipped because of a non-finite gradient.
    pub skipped: usize,
}

impl AdamState {
    pub fn new<T: Real>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
            skipped: 0,
        }
    }
}

/// One Adam update from the gradients accumulated in `params`, with
/// decoupled decay `p ← p·(1 − lr·wd)` on parameters marked for decay.
/// Parameters without a gradient are left alone. A non-finite gradient skips
/// the whole step and returns `false`. Gradients are cleared either way.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<bool> {
    if state.m.len() != params.len() {
        return Err(Error::shape("adam state", &[params.len()], &[state.m.len()]));
    }
    for ((_, p), m) in params.iter().zip(&state.m) {
        if p.tensor.len() != m.len() {
            return Err(Error::shape("adam moments", p.tensor.shape(), &[m.len()]));
        }
    }
    let finite = params
        .iter()
        .all(|(_, p)| p.tensor.grad().map_or(true, |g| g.iter().all(|v| v.is_finite())));
    if !finite {
        state.skipped += 1;
        log::warn!("non-finite gradient, skipping optimizer step ({} skipped so far)", state.skipped);
        params.zero_grad();
        return Ok(false);
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Some(grad) = p.tensor.grad().map(|g| g.iter().map(|x| x.f64()).collect::<Vec<_>>()) else {
            continue;
        };
        let shrink = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            let x = data[i].f64() * shrink - lr * mhat / (vhat.sqrt() + cfg.eps);
            data[i] = T::of(x);
        }
    }
    params.zero_grad();
    Ok(true)
}

/// Half-cosine decay from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs at least one step".into()));
    }
    if step > total_steps {
        return Err(Error::IndexOutOfRange {
            what: "cosine schedule",
            index: step,
            size: total_steps + 1,
        });
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()))
}
