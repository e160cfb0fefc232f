use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

const TOL: f64 = 1e-4;
const H: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Contracts the kernel output with fixed random weights so every output
/// coordinate contributes to the checked gradient.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed ^ 0xabc));
    let w = g.constant(w)?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check<F>(shape: &[usize], seeds: std::ops::Range<u64>, f: F)
where
    F: Fn(&mut Graph<f64>, Var, u64) -> Result<Var>,
{
    for seed in seeds {
        let x = Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed));
        let err = finite_difference_check(|g, v| f(g, v, seed), &x, H).unwrap();
        assert!(err <= TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![3])).unwrap();
    let y = g.softmax(x).unwrap();
    for &v in g.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![1, 2], &[3.0, 4.0]).unwrap()).unwrap();
    let y = g.l2_normalize(x, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
}

#[test]
fn log_sum_exp_is_shift_stable() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(vec![2], &[1000.0, 1000.0]).unwrap()).unwrap();
    let y = g.logsumexp(x).unwrap();
    let expected = 1000.0 + std::f64::consts::LN_2;
    assert!((g.value(y).item().unwrap() - expected).abs() < 1e-9);
    assert!((expected - 1000.6931).abs() < 1e-4);
}

#[test]
fn rows_sum_to_one_and_have_unit_norm() {
    let x = Tensor::<f64>::randn(vec![7, 11], 3.0, &mut rng(1));
    let mut g = Graph::new();
    let v = g.constant(x).unwrap();
    let s = g.softmax(v).unwrap();
    let n = g.l2_normalize(v, 1e-12).unwrap();
    for r in 0..7 {
        let sum: f64 = g.value(s).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        let norm: f64 = g.value(n).row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(vec![2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn non_finite_output_names_the_kernel() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full(vec![2], 800.0)).unwrap();
    match g.exp(a) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
        other => panic!("expected overflow error, got {other:?}"),
    }
    let z = g.constant(Tensor::zeros(vec![1])).unwrap();
    assert!(matches!(g.ln(z), Err(Error::NonFinite { op: "ln" })));
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::randn(vec![2, 3, 4], 1.0, &mut rng(2)).with_requires_grad(true)).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_accumulates_on_repeat() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(vec![3]).with_requires_grad(true)).unwrap();
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|&v| v == 2.0));
    g.zero_leaf_grads();
    assert!(g.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_tolerates_detached() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros(vec![3]).with_requires_grad(true)).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));
    let c = g.constant(Tensor::zeros(vec![3])).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
}

#[test]
fn normalized_dot_gradient_matches_hand_value() {
    let f = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let n = g.l2_normalize(x, 1e-12)?;
        let c = g.constant(Tensor::from_f64(vec![1, 2], &[0.0, 1.0])?)?;
        let p = g.mul(n, c)?;
        g.sum(p)
    };
    let x = Tensor::from_f64(vec![1, 2], &[1.0, 0.0]).unwrap();
    let grad = analytic_gradient(&f, &x).unwrap();
    assert!(grad[0].abs() < 1e-9 && (grad[1] - 1.0).abs() < 1e-9);
    assert!(finite_difference_check(f, &x, H).unwrap() < 1e-6);
}

#[test]
fn cross_entropy_at_uniform_logits() {
    for n in [2usize, 3, 5, 8] {
        let target = n / 2;
        let f = move |g: &mut Graph<f64>, x: Var| -> Result<Var> {
            let ls = g.log_softmax(x)?;
            let mut onehot = vec![0.0; n];
            onehot[target] = -1.0;
            let c = g.constant(Tensor::from_f64(vec![n], &onehot)?)?;
            let p = g.mul(ls, c)?;
            g.sum(p)
        };
        let x = Tensor::zeros(vec![n]);
        let grad = analytic_gradient(&f, &x).unwrap();
        for (j, gj) in grad.iter().enumerate() {
            let expected = 1.0 / n as f64 - if j == target { 1.0 } else { 0.0 };
            assert!((gj - expected).abs() < 1e-12);
        }
        assert!(finite_difference_check(f, &x, H).unwrap() < 1e-8);
    }
}

#[test]
fn finite_difference_on_square_and_constant() {
    let sq = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        let y = g.mul(x, x)?;
        g.sum(y)
    };
    let x = Tensor::from_f64(vec![1], &[3.0]).unwrap();
    assert!(finite_difference_check(sq, &x, DEFAULT_STEP).unwrap() <= 1e-9);
    assert_eq!(analytic_gradient(&sq, &x).unwrap(), vec![6.0]);

    let constant = |g: &mut Graph<f64>, _x: Var| -> Result<Var> {
        let c = g.constant(Tensor::scalar(4.0))?;
        g.sum(c)
    };
    assert_eq!(finite_difference_check(constant, &x, DEFAULT_STEP).unwrap(), 0.0);
}

#[test]
fn finite_difference_rejects_non_deterministic_f() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let f = |g: &mut Graph<f64>, x: Var| -> Result<Var> {
        calls.set(calls.get() + 1.0);
        let y = g.add_scalar(x, calls.get())?;
        g.sum(y)
    };
    let x = Tensor::zeros(vec![2]);
    assert!(matches!(
        finite_difference_check(f, &x, DEFAULT_STEP),
        Err(Error::NonDeterministic { .. })
    ));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::randn(vec![2, 3, 9, 9], 1.0, &mut rng(5))).unwrap();
        let w = g.constant(Tensor::randn(vec![4, 3, 3, 3], 0.3, &mut rng(6))).unwrap();
        let y = g.conv2d(x, w, 2, 1).unwrap();
        let y = g.blur_pool(y).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(), run());
}

// ----- per-kernel gradient checks, five random inputs each -----

#[test]
fn grad_matmul() {
    check(&[3, 4], 0..5, |g, x, s| {
        let b = g.constant(Tensor::randn(vec![4, 5], 1.0, &mut rng(s + 100)))?;
        let y = g.matmul(x, b)?;
        contract(g, y, s)
    });
    check(&[4, 5], 0..5, |g, x, s| {
        let a = g.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng(s + 100)))?;
        let y = g.matmul(a, x)?;
        contract(g, y, s)
    });
}

#[test]
fn grad_elementwise_and_broadcast() {
    check(&[3, 4], 0..5, |g, x, s| {
        let b = g.constant(Tensor::randn(vec![4], 1.0, &mut rng(s + 7)))?;
        let a = g.add(x, b)?;
        let m = g.mul(a, x)?;
        let d = g.sub(m, b)?;
        contract(g, d, s)
    });
    // broadcast operand gets the reduced gradient
    check(&[4], 0..5, |g, x, s| {
        let a = g.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng(s + 7)))?;
        let m = g.mul(a, x)?;
        let d = g.add(m, x)?;
        contract(g, d, s)
    });
    check(&[3, 4], 0..5, |g, x, s| {
        let b = g.constant(Tensor::randn(vec![3, 4], 0.1, &mut rng(s + 9)))?;
        let b = g.add_scalar(b, 2.0)?;
        let q = g.div(x, b)?;
        let r = g.div(b, q)?;
        let r = g.scale(r, 0.5)?;
        contract(g, r, s)
    });
    check(&[1], 0..5, |g, s_var, s| {
        let a = g.constant(Tensor::randn(vec![3, 4], 1.0, &mut rng(s + 7)))?;
        let m = g.mul(a, s_var)?;
        contract(g, m, s)
    });
}

#[test]
fn grad_unary() {
    check(&[2, 5], 0..5, |g, x, s| {
        let e = g.exp(x)?;
        let l = g.ln(e)?;
        let e2 = g.exp(l)?;
        let l2 = g.add_scalar(e2, 1.0)?;
        let l2 = g.ln(l2)?;
        let n = g.neg(l2)?;
        contract(g, n, s)
    });
    check(&[2, 5], 0..5, |g, x, s| {
        let y = g.gelu(x)?;
        contract(g, y, s)
    });
    check(&[2, 5], 0..5, |g, x, s| {
        let y = g.relu(x)?;
        contract(g, y, s)
    });
}

#[test]
fn grad_row_kernels() {
    check(&[3, 6], 0..5, |g, x, s| {
        let y = g.softmax(x)?;
        contract(g, y, s)
    });
    check(&[3, 6], 0..5, |g, x, s| {
        let y = g.log_softmax(x)?;
        contract(g, y, s)
    });
    check(&[3, 6], 0..5, |g, x, s| {
        let y = g.logsumexp(x)?;
        contract(g, y, s)
    });
    check(&[3, 6], 0..5, |g, x, s| {
        let y = g.l2_normalize(x, 1e-12)?;
        contract(g, y, s)
    });
}

#[test]
fn grad_layer_norm_all_inputs() {
    check(&[4, 6], 0..5, |g, x, s| {
        let ga = g.constant(Tensor::randn(vec![6], 1.0, &mut rng(s + 1)))?;
        let be = g.constant(Tensor::randn(vec![6], 1.0, &mut rng(s + 2)))?;
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        contract(g, y, s)
    });
    check(&[6], 0..5, |g, ga, s| {
        let x = g.constant(Tensor::randn(vec![4, 6], 1.0, &mut rng(s + 1)))?;
        let be = g.constant(Tensor::randn(vec![6], 1.0, &mut rng(s + 2)))?;
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        contract(g, y, s)
    });
    check(&[6], 0..5, |g, be, s| {
        let x = g.constant(Tensor::randn(vec![4, 6], 1.0, &mut rng(s + 1)))?;
        let ga = g.constant(Tensor::randn(vec![6], 1.0, &mut rng(s + 2)))?;
        let y = g.layer_norm(x, ga, be, 1e-5)?;
        contract(g, y, s)
    });
}

#[test]
fn grad_reductions_and_indexing() {
    check(&[2, 3, 4], 0..5, |g, x, s| {
        let a = g.mean_axis(x, 1)?;
        let b = g.sum_axis(x, 2)?;
        let ca = contract(g, a, s)?;
        let cb = contract(g, b, s + 1)?;
        let m = g.mean(x)?;
        let t = g.add(ca, cb)?;
        g.add(t, m)
    });
    check(&[4, 4], 0..5, |g, x, s| {
        let d = g.diag(x)?;
        let t = g.transpose(x)?;
        let r = g.index_select(t, &[3, 0, 0, 2])?;
        let a = contract(g, d, s)?;
        let b = contract(g, r, s + 1)?;
        g.add(a, b)
    });
    check(&[5, 3], 0..5, |g, table, s| {
        let e = g.embedding(table, &[4, 0, 4, 2])?;
        contract(g, e, s)
    });
    check(&[2, 3, 4], 0..5, |g, x, s| {
        let p = g.permute(x, &[2, 0, 1])?;
        let r = g.reshape(p, &[4, 6])?;
        let sl = g.slice(x, 1, 1, 3)?;
        let c = g.concat(&[x, sl], 1)?;
        let a = contract(g, r, s)?;
        let b = contract(g, c, s + 3)?;
        g.add(a, b)
    });
}

#[test]
fn grad_spatial_kernels() {
    check(&[2, 2, 7, 6], 0..5, |g, x, s| {
        let w = g.constant(Tensor::randn(vec![3, 2, 3, 3], 0.5, &mut rng(s + 11)))?;
        let y = g.conv2d(x, w, 2, 1)?;
        contract(g, y, s)
    });
    check(&[3, 2, 3, 3], 0..5, |g, w, s| {
        let x = g.constant(Tensor::randn(vec![2, 2, 6, 5], 1.0, &mut rng(s + 11)))?;
        let y = g.conv2d(x, w, 1, 1)?;
        contract(g, y, s)
    });
    check(&[2, 2, 7, 6], 0..5, |g, x, s| {
        let y = g.avg_pool2d(x, 2)?;
        contract(g, y, s)
    });
    check(&[2, 2, 7, 6], 0..5, |g, x, s| {
        let y = g.blur_pool(x)?;
        contract(g, y, s)
    });
}

#[test]
fn grad_attention_inputs() {
    for causal in [false, true] {
        for which in 0..3 {
            check(&[2, 4, 6], 0..5, |g, x, s| {
                let a = g.constant(Tensor::randn(vec![2, 4, 6], 1.0, &mut rng(s + 21)))?;
                let b = g.constant(Tensor::randn(vec![2, 4, 6], 1.0, &mut rng(s + 22)))?;
                let y = match which {
                    0 => g.attention(x, a, b, 2, causal)?,
                    1 => g.attention(a, x, b, 2, causal)?,
                    _ => g.attention(a, b, x, 2, causal)?,
                };
                contract(g, y, s)
            });
        }
    }
    // single query against a longer key sequence
    check(&[2, 1, 6], 0..5, |g, q, s| {
        let kv = g.constant(Tensor::randn(vec![2, 5, 6], 1.0, &mut rng(s + 23)))?;
        let y = g.attention(q, kv, kv, 3, false)?;
        contract(g, y, s)
    });
}

#[test]
fn blur_pool_preserves_dc_and_spreads_impulse() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(vec![1, 2, 6, 5], 0.7)).unwrap();
    let y = g.blur_pool(c).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 3, 3]);
    assert!(g.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-12));

    let mut imp = Tensor::<f64>::zeros(vec![1, 1, 5, 5]);
    imp.data_mut()[12] = 1.0;
    let x = g.constant(imp).unwrap();
    let y = g.blur_pool(x).unwrap();
    assert_eq!(g.value(y).data()[4], 4.0 / 16.0);

    let too_small = g.constant(Tensor::zeros(vec![1, 1, 2, 5])).unwrap();
    assert!(g.blur_pool(too_small).is_err());
}

#[test]
fn blur_pool_shift_by_two_shifts_output_by_one() {
    let x = Tensor::<f64>::randn(vec![1, 1, 12, 12], 1.0, &mut rng(9));
    let mut shifted = Tensor::<f64>::zeros(vec![1, 1, 12, 12]);
    for i in 0..12 {
        for j in 0..12 {
            if i >= 2 && j >= 2 {
                shifted.data_mut()[i * 12 + j] = x.data()[(i - 2) * 12 + j - 2];
            }
        }
    }
    let mut g = Graph::new();
    let a = g.constant(x).unwrap();
    let b = g.constant(shifted).unwrap();
    let ya = g.blur_pool(a).unwrap();
    let yb = g.blur_pool(b).unwrap();
    let (va, vb) = (g.value(ya).data(), g.value(yb).data());
    for i in 2..5 {
        for j in 2..5 {
            assert!((vb[(i + 1) * 6 + j + 1] - va[i * 6 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn causal_attention_ignores_future_positions() {
    let q = Tensor::<f64>::randn(vec![1, 5, 4], 1.0, &mut rng(3));
    let mut q2 = q.clone();
    // perturb the last position only
    for v in &mut q2.data_mut()[16..] {
        *v += 1.0;
    }
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t).unwrap();
        let y = g.attention(v, v, v, 2, true).unwrap();
        g.value(y).data()[..16].to_vec()
    };
    assert_eq!(run(q), run(q2));
}

#[test]
fn params_bind_once_and_accumulate() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::full(vec![2], 1.5), true).unwrap();
    assert!(store.add("w", Tensor::zeros(vec![1]), true).is_err());
    let mut g = Graph::new();
    let a = g.param(&store, id).unwrap();
    let b = g.param(&store, id).unwrap();
    assert_eq!(a, b);
    let y = g.mul(a, b).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    g.accumulate_into(&mut store).unwrap();
    assert_eq!(store.get(id).tensor.grad().unwrap(), &[3.0, 3.0]);
}
