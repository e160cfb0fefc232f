use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step for 64-bit checks.
pub const DEFAULT_STEP: f64 = 1e-5;

fn eval<F>(f: &F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone())?;
    let out = f(&mut g, v)?;
    g.value(out).item()
}

/// Analytic gradient of `f` at `x` from the graph's backward pass.
pub fn analytic_gradient<F>(f: &F, x: &Tensor<f64>) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone().with_requires_grad(true))?;
    let out = f(&mut g, v)?;
    g.backward(out)?;
    Ok(g.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec))
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step `h`. Returns the largest
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let first = eval(&f, x)?;
    let second = eval(&f, x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let analytic = analytic_gradient(&f, x)?;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
