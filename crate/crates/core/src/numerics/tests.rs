use proptest::prelude::*;

use super::check::{finite_diff_grad, jacobian_of, max_relative_error, JacobianMethod};
use super::{Graph, Mask, Rng, Tensor, Var};
use crate::error::{Error, Result};

const H: f64 = 1e-5;

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.normal(shape, 0.0, 1.0).unwrap()
}

/// Compare autodiff and central differences for `sum(op(inputs) ∘ w)` with a
/// fixed random weighting `w`.
fn grad_check<F>(inputs: Vec<Tensor>, op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = op(&mut g, &vars).unwrap();
    let weights = rand_tensor(&mut Rng::new(99), g.shape(out));
    let w = g.constant(weights.clone()).unwrap();
    let weighted = g.mul(out, w).unwrap();
    let loss = g.sum(weighted).unwrap();
    g.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let auto = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        let numeric = finite_diff_grad(
            |x| {
                let mut g2 = Graph::new();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g2.constant(if j == k { x.clone() } else { t.clone() }).unwrap())
                    .collect();
                let out = op(&mut g2, &vs)?;
                let w = g2.constant(weights.clone())?;
                let weighted = g2.mul(out, w)?;
                let s = g2.sum(weighted)?;
                g2.value(s).item()
            },
            input,
            H,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&auto, &numeric, 1e-3));
    }
    worst
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0, 3.0])).unwrap();
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_of_softmax_sum_is_zero() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.1])).unwrap();
    let s = g.softmax(x).unwrap();
    let loss = g.sum(s).unwrap();
    g.backward(loss).unwrap();
    for &d in g.grad(x).unwrap().data() {
        assert!(d.abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_and_foreign_vars() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    assert!(matches!(g.backward(x), Err(Error::NotScalar(_))));

    let mut other = Graph::new();
    let y = other.param(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(g.backward(y), Err(Error::NotOnTape)));
}

#[test]
fn backward_consumes_graph() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(1000.0)).unwrap();
    assert!(matches!(g.exp(x), Err(Error::NonFinite { .. })));
    assert!(matches!(g.leaf(Tensor::scalar(f64::NAN), false), Err(Error::NonFinite { .. })));
}

#[test]
fn three_layer_mlp_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let w1 = rand_tensor(&mut rng, &[6, 8]).map(|v| v * 0.5);
    let w2 = rand_tensor(&mut rng, &[8, 8]).map(|v| v * 0.5);
    let w3 = rand_tensor(&mut rng, &[8, 3]).map(|v| v * 0.5);
    let err = grad_check(vec![x, w1, w2, w3], |g, v| {
        let h = g.matmul(v[0], v[1], false, false)?;
        let h = g.silu(h)?;
        let h = g.matmul(h, v[2], false, false)?;
        let h = g.silu(h)?;
        g.matmul(h, v[3], false, false)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn elementwise_ops_gradients() {
    let mut rng = Rng::new(11);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    for (name, err) in [
        ("add", grad_check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]))),
        ("sub", grad_check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]))),
        ("mul", grad_check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]))),
        ("scale", grad_check(vec![a.clone()], |g, v| g.scale(v[0], -0.7))),
        ("silu", grad_check(vec![a.clone()], |g, v| g.silu(v[0]))),
        ("exp", grad_check(vec![a.clone()], |g, v| g.exp(v[0]))),
        ("softmax", grad_check(vec![a.clone()], |g, v| g.softmax(v[0]))),
        ("reshape", grad_check(vec![a.clone()], |g, v| g.reshape(v[0], &[2, 6]))),
        ("sum", grad_check(vec![a.clone()], |g, v| g.sum(v[0]))),
        ("mean", grad_check(vec![a.clone()], |g, v| g.mean(v[0]))),
        ("slice_last", grad_check(vec![a.clone()], |g, v| g.slice_last(v[0], 1, 2))),
    ] {
        assert!(err < 1e-6, "{name}: rel err {err}");
    }
}

#[test]
fn matmul_gradients_all_transpose_combinations() {
    let mut rng = Rng::new(12);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a = rand_tensor(&mut rng, if ta { &[2, 4, 3] } else { &[2, 3, 4] });
        let b = rand_tensor(&mut rng, if tb { &[2, 5, 4] } else { &[2, 4, 5] });
        let err = grad_check(vec![a, b], |g, v| g.matmul(v[0], v[1], ta, tb));
        assert!(err < 1e-6, "batched ({ta},{tb}) rel err {err}");

        let a = rand_tensor(&mut rng, if ta { &[3, 4, 3] } else { &[3, 3, 4] });
        let w = rand_tensor(&mut rng, if tb { &[5, 4] } else { &[4, 5] });
        let err = grad_check(vec![a, w], |g, v| g.matmul(v[0], v[1], ta, tb));
        assert!(err < 1e-6, "shared ({ta},{tb}) rel err {err}");
    }
}

#[test]
fn structural_ops_gradients() {
    let mut rng = Rng::new(13);
    let flat = rand_tensor(&mut rng, &[2 * 3, 2 * 4]);
    let err = grad_check(vec![flat], |g, v| g.split_heads(v[0], 2, 3, 2));
    assert!(err < 1e-6);

    let heads = rand_tensor(&mut rng, &[2, 2, 3, 4]);
    let err = grad_check(vec![heads.clone()], |g, v| g.merge_heads(v[0]));
    assert!(err < 1e-6);

    let s = rand_tensor(&mut rng, &[2]);
    let err = grad_check(vec![heads.clone(), s], |g, v| g.head_scale(v[0], v[1]));
    assert!(err < 1e-6);

    let err = grad_check(vec![heads.clone()], |g, v| g.repeat_heads(v[0], 3));
    assert!(err < 1e-6);

    let err = grad_check(vec![heads.clone()], |g, v| g.rope(v[0], &[0.0, 1.0, 7.0], 10000.0));
    assert!(err < 1e-6);

    let table = rand_tensor(&mut rng, &[5, 3]);
    let err = grad_check(vec![table], |g, v| g.embedding(v[0], &[4, 0, 4, 2], &[2, 2]));
    assert!(err < 1e-6);

    let x = rand_tensor(&mut rng, &[3, 6]);
    let gain = rand_tensor(&mut rng, &[6]);
    let err = grad_check(vec![x, gain], |g, v| g.rmsnorm(v[0], v[1], 1e-6));
    assert!(err < 1e-6);

    let scores = rand_tensor(&mut rng, &[2, 4, 4]);
    let mask = Mask::causal(4);
    let err = grad_check(vec![scores], |g, v| g.masked_softmax(v[0], &mask));
    assert!(err < 1e-6);

    let logits = rand_tensor(&mut rng, &[4, 5]);
    let err = grad_check(vec![logits], |g, v| {
        g.cross_entropy(v[0], &[1, 4, 0, 2], &[true, false, true, true])
    });
    assert!(err < 1e-6);
}

#[test]
fn masked_softmax_zeroes_disallowed_positions() {
    let mut g = Graph::new();
    let x = g.constant(Rng::new(1).normal(&[3, 3], 0.0, 1.0).unwrap()).unwrap();
    let y = g.masked_softmax(x, &Mask::causal(3)).unwrap();
    let y = g.value(y);
    assert_eq!(y.at(&[0, 1]), 0.0);
    assert_eq!(y.at(&[0, 2]), 0.0);
    assert_eq!(y.at(&[1, 2]), 0.0);
    assert_eq!(y.at(&[0, 0]), 1.0);
}

#[test]
fn masked_softmax_rejects_mismatched_mask() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 4])).unwrap();
    assert!(g.masked_softmax(x, &Mask::causal(3)).is_err());
}

#[test]
fn cross_entropy_of_uniform_logits_is_log_vocab() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 64])).unwrap();
    let l = g.cross_entropy(x, &[3, 7], &[true, true]).unwrap();
    assert!((g.value(l).item().unwrap() - 64f64.ln()).abs() < 1e-12);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 4])).unwrap();
    assert!(g.cross_entropy(x, &[0, 0], &[false, false]).is_err());
}

#[test]
fn finite_diff_examples() {
    let x = Tensor::from_vec(vec![1.0, 2.0]);
    let g = finite_diff_grad(|t| Ok(t.sq_norm()), &x, 1e-5).unwrap();
    assert!((g.data()[0] - 2.0).abs() < 1e-8 && (g.data()[1] - 4.0).abs() < 1e-8);
    let g = finite_diff_grad(|_| Ok(3.5), &x, 1e-5).unwrap();
    assert!(g.data().iter().all(|&v| v == 0.0));
    assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
}

#[test]
fn jacobian_of_identity_and_linear_maps() {
    let x = Rng::new(3).normal(&[5], 0.0, 1.0).unwrap();
    for method in [JacobianMethod::Autodiff, JacobianMethod::FiniteDiff { h: 1e-5 }] {
        let j = jacobian_of(|_g, v| Ok(v), &x, method).unwrap();
        assert!(j.max_abs_diff(&Tensor::eye(5)) < 1e-9);
    }
    let w = Rng::new(4).normal(&[3, 5], 0.0, 1.0).unwrap();
    let map = |g: &mut Graph, v: Var| {
        let wv = g.constant(w.clone())?;
        let col = g.reshape(v, &[5, 1])?;
        let y = g.matmul(wv, col, false, false)?;
        g.reshape(y, &[3])
    };
    let ja = jacobian_of(map, &x, JacobianMethod::Autodiff).unwrap();
    assert!(ja.max_abs_diff(&w) < 1e-14);
    let jf = jacobian_of(map, &x, JacobianMethod::FiniteDiff { h: 1e-5 }).unwrap();
    assert!(jf.max_abs_diff(&w) < 1e-9);
}

#[test]
fn jacobian_rejects_large_or_non_vector_input() {
    assert!(jacobian_of(|_g, v| Ok(v), &Tensor::zeros(&[200]), JacobianMethod::Autodiff).is_err());
    assert!(jacobian_of(|_g, v| Ok(v), &Tensor::zeros(&[2, 2]), JacobianMethod::Autodiff).is_err());
}

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 6), 1..5),
        shift in -100.0f64..100.0,
    ) {
        let n = rows.len();
        let data: Vec<f64> = rows.concat();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[n, 6], data.clone()).unwrap()).unwrap();
        let xs = g.constant(Tensor::new(&[n, 6], data.iter().map(|v| v + shift).collect()).unwrap()).unwrap();
        let y = g.softmax(x).unwrap();
        let ys = g.softmax(xs).unwrap();
        for r in 0..n {
            let s: f64 = g.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert!(g.value(y).max_abs_diff(g.value(ys)) < 1e-12);
    }

    #[test]
    fn matmul_matches_triple_loop_on_integers(
        m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform_int(-9, 10).unwrap() as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform_int(-9, 10).unwrap() as f64).collect();
        let mut g = Graph::new();
        let av = g.constant(Tensor::new(&[m, k], a.clone()).unwrap()).unwrap();
        let bv = g.constant(Tensor::new(&[k, n], b.clone()).unwrap()).unwrap();
        let c = g.matmul(av, bv, false, false).unwrap();
        prop_assert_eq!(g.value(c).data(), &naive_matmul(&a, &b, m, k, n)[..]);
    }

    #[test]
    fn rope_preserves_norm(seed in 0u64..500, pos in 0.0f64..500.0) {
        let x = Rng::new(seed).normal(&[1, 1, 1, 8], 0.0, 1.0).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x.clone()).unwrap();
        let r = g.rope(v, &[pos], 10000.0).unwrap();
        prop_assert!((g.value(r).sq_norm().sqrt() - x.sq_norm().sqrt()).abs() < 1e-12);
    }
}
