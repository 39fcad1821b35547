use super::*;
use crate::numerics::check::{finite_diff_grad, jacobian_of, max_relative_error, JacobianMethod};
use crate::numerics::linalg::determinant;
use crate::numerics::{Rng, Tensor};

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    rng.normal(shape, 0.0, std).unwrap()
}

fn scalar4(v: f64) -> Tensor {
    Tensor::new(&[1, 1, 1, 1], vec![v]).unwrap()
}

#[test]
fn sdpa_single_token_returns_value() {
    let mut g = Graph::new();
    let mut rng = Rng::new(0);
    let q = g.constant(randn(&mut rng, &[1, 1, 1, 3], 1.0)).unwrap();
    let k = g.constant(randn(&mut rng, &[1, 1, 1, 3], 1.0)).unwrap();
    let vt = randn(&mut rng, &[1, 1, 1, 3], 1.0);
    let v = g.constant(vt.clone()).unwrap();
    let s = sdpa(&mut g, q, k, v, &Mask::causal(1)).unwrap();
    assert_eq!(g.value(s.weights).data(), &[1.0]);
    assert_eq!(g.value(s.output), &vt);
}

#[test]
fn sdpa_zero_queries_give_uniform_causal_rows() {
    let t = 6;
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[1, 1, t, 4])).unwrap();
    let k = g.constant(Tensor::zeros(&[1, 1, t, 4])).unwrap();
    let v = g.constant(randn(&mut Rng::new(1), &[1, 1, t, 4], 1.0)).unwrap();
    let s = sdpa(&mut g, q, k, v, &Mask::causal(t)).unwrap();
    let w = g.value(s.weights);
    for i in 0..t {
        let row = &w.data()[i * t..(i + 1) * t];
        let entropy: f64 = row.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum();
        assert!((entropy - ((i + 1) as f64).ln()).abs() < 1e-12);
        for (j, &a) in row.iter().enumerate() {
            let expect = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
            assert!((a - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn sdpa_two_by_two_hand_case() {
    let mut g = Graph::new();
    let eye = Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let q = g.constant(eye.clone()).unwrap();
    let k = g.constant(eye.clone()).unwrap();
    let v = g.constant(eye).unwrap();
    let s = sdpa(&mut g, q, k, v, &Mask::causal(2)).unwrap();
    let w = g.value(s.weights);
    // row 1: logits [0, 1/√2]
    let e = (1.0 / 2f64.sqrt()).exp();
    let expect = [1.0, 0.0, 1.0 / (1.0 + e), e / (1.0 + e)];
    for (a, b) in w.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn sdpa_errors() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[1, 1, 2, 0])).unwrap();
    assert!(sdpa(&mut g, z, z, z, &Mask::causal(2)).is_err());
    let x = g.constant(Tensor::zeros(&[1, 1, 3, 2])).unwrap();
    assert!(sdpa(&mut g, x, x, x, &Mask::causal(2)).is_err());
}

fn run_step(integrator: Integrator, q: f64, k: f64, dt: f64, force: &dyn Force) -> (f64, f64) {
    let mut g = Graph::new();
    let qv = g.constant(scalar4(q)).unwrap();
    let kv = g.constant(scalar4(k)).unwrap();
    let dtv = g.constant(Tensor::from_vec(vec![dt])).unwrap();
    let (q1, k1) = step(integrator, &mut g, qv, kv, dtv, force).unwrap();
    (g.value(q1).data()[0], g.value(k1).data()[0])
}

#[test]
fn euler_harmonic_step() {
    let (q, k) = run_step(Integrator::Euler, 1.0, 0.0, 0.1, &LinearForce(-1.0));
    assert_eq!(q, 1.0);
    assert!((k + 0.1).abs() < 1e-15);
}

#[test]
fn leapfrog_harmonic_step() {
    let (q, k) = run_step(Integrator::Leapfrog, 1.0, 0.0, 0.1, &LinearForce(-1.0));
    assert!((q - 0.995).abs() < 1e-15);
    assert!((k + 0.09975).abs() < 1e-15);
}

#[test]
fn zero_force_is_pure_drift() {
    for integ in [Integrator::Euler, Integrator::Leapfrog] {
        let (q, k) = run_step(integ, 0.3, -2.0, 0.1, &LinearForce(0.0));
        assert_eq!(k, -2.0);
        assert!((q - (0.3 - 0.2)).abs() < 1e-15);
    }
}

struct CoupledFixture {
    q: Tensor,
    k: Tensor,
    w1: Tensor,
    w2: Tensor,
    tau: Tensor,
}

fn fixture(seed: u64, heads: usize, seq: usize, dk: usize, wstd: f64) -> CoupledFixture {
    let mut rng = Rng::new(seed);
    CoupledFixture {
        q: randn(&mut rng, &[2, heads, seq, dk], 1.0),
        k: randn(&mut rng, &[2, heads, seq, dk], 1.0),
        w1: randn(&mut rng, &[dk, dk], wstd),
        w2: randn(&mut rng, &[dk, dk], wstd),
        tau: Tensor::from_vec((0..heads).map(|h| (0.05 + 0.05 * h as f64).ln()).collect()),
    }
}

fn evolve_values(fx: &CoupledFixture, integrator: Integrator, n: usize, negate: bool) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let q = g.constant(fx.q.clone()).unwrap();
    let k = g.constant(fx.k.clone()).unwrap();
    let w1 = g.constant(fx.w1.clone()).unwrap();
    let w2 = g.constant(fx.w2.clone()).unwrap();
    let net = CouplingNetwork::new(&g, w1, w2).unwrap();
    let tau = g.constant(fx.tau.clone()).unwrap();
    let mut dt = step_size(&mut g, tau).unwrap();
    if negate {
        dt = g.scale(dt, -1.0).unwrap();
    }
    let (q, k) = evolve_qk(&mut g, q, k, integrator, n, dt, &net).unwrap();
    (g.value(q).clone(), g.value(k).clone())
}

#[test]
fn evolve_zero_steps_is_identity() {
    let fx = fixture(3, 2, 4, 4, 0.5);
    for integ in [Integrator::Euler, Integrator::Leapfrog] {
        let (q, k) = evolve_values(&fx, integ, 0, false);
        assert_eq!(q, fx.q);
        assert_eq!(k, fx.k);
    }
}

#[test]
fn euler_two_steps_equal_composed_single_steps() {
    let fx = fixture(4, 2, 3, 4, 0.5);
    let (q2, k2) = evolve_values(&fx, Integrator::Euler, 2, false);
    let (q1, k1) = evolve_values(&fx, Integrator::Euler, 1, false);
    let again = CoupledFixture { q: q1, k: k1, ..fixture(4, 2, 3, 4, 0.5) };
    let (qc, kc) = evolve_values(&again, Integrator::Euler, 1, false);
    assert_eq!(q2, qc);
    assert_eq!(k2, kc);
}

#[test]
fn leapfrog_is_time_reversible() {
    for seed in 0..3 {
        let fx = fixture(seed, 2, 5, 8, 0.5);
        let (qn, kn) = evolve_values(&fx, Integrator::Leapfrog, 7, false);
        let back = CoupledFixture { q: qn, k: kn, ..fixture(seed, 2, 5, 8, 0.5) };
        let (q0, k0) = evolve_values(&back, Integrator::Leapfrog, 7, true);
        assert!(q0.max_abs_diff(&fx.q) < 1e-10);
        assert!(k0.max_abs_diff(&fx.k) < 1e-10);
    }
}

#[test]
fn zeroed_coupling_weights_leave_keys_and_drift_queries() {
    let mut fx = fixture(5, 2, 3, 4, 0.5);
    fx.w1 = Tensor::zeros(&[4, 4]);
    fx.w2 = Tensor::zeros(&[4, 4]);
    for integ in [Integrator::Euler, Integrator::Leapfrog] {
        let n = 3;
        let (q, k) = evolve_values(&fx, integ, n, false);
        assert_eq!(k, fx.k);
        let inner = 3 * 4;
        for (idx, (&qv, (&q0, &k0))) in q.data().iter().zip(fx.q.data().iter().zip(fx.k.data())).enumerate() {
            let dt = fx.tau.data()[(idx / inner) % 2].exp();
            assert!((qv - (q0 + n as f64 * dt * k0)).abs() < 1e-14);
        }
    }
}

fn one_step_map(integrator: Integrator, w1: Tensor, w2: Tensor, dt: f64, dk: usize) -> impl Fn(&mut Graph, Var) -> Result<Var> {
    move |g: &mut Graph, x: Var| {
        let q = g.slice_last(x, 0, dk)?;
        let k = g.slice_last(x, dk, dk)?;
        let q = g.reshape(q, &[1, 1, 1, dk])?;
        let k = g.reshape(k, &[1, 1, 1, dk])?;
        let w1 = g.constant(w1.clone())?;
        let w2 = g.constant(w2.clone())?;
        let net = CouplingNetwork::new(g, w1, w2)?;
        let dtv = g.constant(Tensor::from_vec(vec![dt]))?;
        let (q1, k1) = step(integrator, g, q, k, dtv, &net)?;
        // concatenate via two padded halves
        let q1 = g.reshape(q1, &[dk])?;
        let k1 = g.reshape(k1, &[dk])?;
        let mut left = Tensor::zeros(&[dk, 2 * dk]);
        let mut right = Tensor::zeros(&[dk, 2 * dk]);
        for i in 0..dk {
            left.set(&[i, i], 1.0);
            right.set(&[i, dk + i], 1.0);
        }
        let l = g.constant(left)?;
        let r = g.constant(right)?;
        let q1 = g.reshape(q1, &[1, dk])?;
        let k1 = g.reshape(k1, &[1, dk])?;
        let a = g.matmul(q1, l, false, false)?;
        let b = g.matmul(k1, r, false, false)?;
        let y = g.add(a, b)?;
        g.reshape(y, &[2 * dk])
    }
}

#[test]
fn leapfrog_step_jacobian_has_unit_determinant() {
    let dk = 4;
    let mut rng = Rng::new(8);
    let w1 = randn(&mut rng, &[dk, dk], 1.0);
    let w2 = randn(&mut rng, &[dk, dk], 1.0);
    let x = randn(&mut rng, &[2 * dk], 1.0);
    let j = jacobian_of(one_step_map(Integrator::Leapfrog, w1.clone(), w2.clone(), 0.1, dk), &x, JacobianMethod::Autodiff)
        .unwrap();
    assert!((determinant(&j).unwrap() - 1.0).abs() < 1e-8);
    let je = jacobian_of(one_step_map(Integrator::Euler, w1, w2, 0.1, dk), &x, JacobianMethod::Autodiff).unwrap();
    assert!((determinant(&je).unwrap() - 1.0).abs() > 1e-6);
}

fn coupling_oracle(q: &[f64], w1: &Tensor, w2: &Tensor) -> Vec<f64> {
    let d = q.len();
    let h: Vec<f64> = (0..d)
        .map(|i| {
            let z: f64 = (0..d).map(|j| w1.at(&[i, j]) * q[j]).sum();
            z / (1.0 + (-z).exp())
        })
        .collect();
    (0..d).map(|i| (0..d).map(|j| w2.at(&[i, j]) * h[j]).sum()).collect()
}

#[test]
fn mlp_only_adds_coupling_output_per_position() {
    let dk = 4;
    let mut rng = Rng::new(10);
    let qt = randn(&mut rng, &[2, 2, 3, dk], 1.0);
    let w1 = randn(&mut rng, &[dk, dk], 0.7);
    let w2 = randn(&mut rng, &[dk, dk], 0.7);
    let mut g = Graph::new();
    let q = g.constant(qt.clone()).unwrap();
    let w1v = g.constant(w1.clone()).unwrap();
    let w2v = g.constant(w2.clone()).unwrap();
    let net = CouplingNetwork::new(&g, w1v, w2v).unwrap();
    let q2 = mlp_only_transform(&mut g, q, &net).unwrap();
    for (pos, (orig, out)) in qt.data().chunks(dk).zip(g.value(q2).data().chunks(dk)).enumerate() {
        let f = coupling_oracle(orig, &w1, &w2);
        for i in 0..dk {
            assert!((out[i] - orig[i] - f[i]).abs() < 1e-14, "position {pos}");
        }
    }
}

/// Build random parameters for `variant` on `g`.
fn variant_params(g: &mut Graph, variant: &AttentionVariant, heads: usize, dk: usize, rng: &mut Rng) -> VariantParams {
    match variant.kind {
        VariantKind::CoupledEuler | VariantKind::CoupledLeapfrog => {
            let w1 = g.param(randn(rng, &[dk, dk], 0.5)).unwrap();
            let w2 = g.param(randn(rng, &[dk, dk], 0.5)).unwrap();
            let tau = g.param(tau_init(heads, 0.1)).unwrap();
            VariantParams::Coupled { net: CouplingNetwork::new(g, w1, w2).unwrap(), tau }
        }
        VariantKind::MlpOnly => {
            let w1 = g.param(randn(rng, &[dk, dk], 0.5)).unwrap();
            let w2 = g.param(randn(rng, &[dk, dk], 0.5)).unwrap();
            VariantParams::MlpOnly { net: CouplingNetwork::new(g, w1, w2).unwrap() }
        }
        VariantKind::Diff => {
            let lambda = g.param(Tensor::from_vec((0..heads).map(|h| lambda_init(h + 1)).collect())).unwrap();
            VariantParams::Diff { lambda }
        }
        _ => VariantParams::None,
    }
}

fn all_variants() -> Vec<AttentionVariant> {
    VariantKind::ALL
        .iter()
        .map(|&k| AttentionVariant { gqa_group: 2, ..AttentionVariant::new(k) })
        .collect()
}

#[test]
fn every_variant_is_causal() {
    let (b, h, t, dk) = (1, 2, 5, 4);
    for variant in all_variants() {
        let hkv = variant.kv_heads(h);
        let mut rng = Rng::new(21);
        for i in 0..t {
            let mut g = Graph::new();
            let q = g.param(randn(&mut rng, &[b, h, t, dk], 1.0)).unwrap();
            let k = g.param(randn(&mut rng, &[b, hkv, t, dk], 1.0)).unwrap();
            let v = g.param(randn(&mut rng, &[b, hkv, t, dk], 1.0)).unwrap();
            let params = variant_params(&mut g, &variant, h, dk, &mut rng);
            let s = attend(&mut g, &variant, &params, q, k, v, &Mask::causal(t), None).unwrap();
            let w = g.value(s.weights).clone();
            for hh in 0..h {
                for r in 0..t {
                    for c in r + 1..t {
                        assert_eq!(w.at(&[0, hh, r, c]), 0.0, "{} upper triangle", variant.kind);
                    }
                }
            }
            // pick output row i, check no gradient reaches later values
            let mut sel = Tensor::zeros(&[b, h, t, dk]);
            for hh in 0..h {
                for d in 0..dk {
                    sel.set(&[0, hh, i, d], 1.0 + d as f64);
                }
            }
            let sel = g.constant(sel).unwrap();
            let prod = g.mul(s.output, sel).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap();
            let gv = g.grad(v).unwrap();
            for hh in 0..hkv {
                for j in i + 1..t {
                    for d in 0..dk {
                        assert_eq!(gv.at(&[0, hh, j, d]), 0.0, "{} value leak {i}->{j}", variant.kind);
                    }
                }
            }
        }
    }
}

#[test]
fn standard_rows_sum_to_one() {
    let mut rng = Rng::new(2);
    let mut g = Graph::new();
    let q = g.constant(randn(&mut rng, &[2, 2, 7, 4], 2.0)).unwrap();
    let k = g.constant(randn(&mut rng, &[2, 2, 7, 4], 2.0)).unwrap();
    let v = g.constant(randn(&mut rng, &[2, 2, 7, 4], 1.0)).unwrap();
    let s = sdpa(&mut g, q, k, v, &Mask::causal(7)).unwrap();
    for row in g.value(s.weights).data().chunks(7) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn gqa_equals_replicated_sdpa() {
    let mut rng = Rng::new(30);
    let (b, h, t, dk) = (2, 4, 6, 4);
    for hkv in [1, 2, 4] {
        let qt = randn(&mut rng, &[b, h, t, dk], 1.0);
        let kt = randn(&mut rng, &[b, hkv, t, dk], 1.0);
        let vt = randn(&mut rng, &[b, hkv, t, dk], 1.0);
        let mut g = Graph::new();
        let q = g.constant(qt.clone()).unwrap();
        let k = g.constant(kt.clone()).unwrap();
        let v = g.constant(vt.clone()).unwrap();
        let out = gqa_attention(&mut g, q, k, v, &Mask::causal(t)).unwrap();

        // independent replication: build [b, h, t, dk] by hand
        let group = h / hkv;
        let rep = |src: &Tensor| {
            let mut r = Tensor::zeros(&[b, h, t, dk]);
            for bb in 0..b {
                for hh in 0..h {
                    for tt in 0..t {
                        for d in 0..dk {
                            r.set(&[bb, hh, tt, d], src.at(&[bb, hh / group, tt, d]));
                        }
                    }
                }
            }
            r
        };
        let mut g2 = Graph::new();
        let q2 = g2.constant(qt).unwrap();
        let k2 = g2.constant(rep(&kt)).unwrap();
        let v2 = g2.constant(rep(&vt)).unwrap();
        let reference = sdpa(&mut g2, q2, k2, v2, &Mask::causal(t)).unwrap();
        assert!(g.value(out.output).max_abs_diff(g2.value(reference.output)) < 1e-12);
    }
}

#[test]
fn gqa_rejects_indivisible_heads() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::zeros(&[1, 3, 2, 2])).unwrap();
    let kv = g.constant(Tensor::zeros(&[1, 2, 2, 2])).unwrap();
    assert!(gqa_attention(&mut g, q, kv, kv, &Mask::causal(2)).is_err());
    assert!(AttentionVariant::gqa(4).validate(6, 8).is_err());
    assert!(AttentionVariant::gqa(4).validate(8, 8).is_ok());
}

fn diff_run(qt: &Tensor, kt: &Tensor, vt: &Tensor, lambda: &[f64]) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let q = g.constant(qt.clone()).unwrap();
    let k = g.constant(kt.clone()).unwrap();
    let v = g.constant(vt.clone()).unwrap();
    let l = g.constant(Tensor::from_vec(lambda.to_vec())).unwrap();
    let t = qt.shape()[2];
    let s = diff_attention(&mut g, q, k, v, &Mask::causal(t), l).unwrap();
    (g.value(s.output).clone(), g.value(s.weights).clone())
}

#[test]
fn diff_with_zero_lambda_is_first_subhead_sdpa() {
    let mut rng = Rng::new(40);
    let (qt, kt, vt) =
        (randn(&mut rng, &[1, 2, 5, 6], 1.0), randn(&mut rng, &[1, 2, 5, 6], 1.0), randn(&mut rng, &[1, 2, 5, 6], 1.0));
    let (out, _) = diff_run(&qt, &kt, &vt, &[0.0, 0.0]);
    let mut g = Graph::new();
    let q = g.constant(qt).unwrap();
    let k = g.constant(kt).unwrap();
    let q1 = g.slice_last(q, 0, 3).unwrap();
    let k1 = g.slice_last(k, 0, 3).unwrap();
    let logits = g.matmul(q1, k1, false, true).unwrap();
    let logits = g.scale(logits, 1.0 / 3f64.sqrt()).unwrap();
    let w = g.masked_softmax(logits, &Mask::causal(5)).unwrap();
    let v = g.constant(vt).unwrap();
    let o = g.matmul(w, v, false, false).unwrap();
    assert_eq!(&out, g.value(o));
}

#[test]
fn diff_perfect_cancellation() {
    let mut rng = Rng::new(41);
    let half_q = randn(&mut rng, &[1, 1, 4, 2], 1.0);
    let half_k = randn(&mut rng, &[1, 1, 4, 2], 1.0);
    let dup = |h: &Tensor| {
        let data: Vec<f64> = h.data().chunks(2).flat_map(|c| [c[0], c[1], c[0], c[1]]).collect();
        Tensor::new(&[1, 1, 4, 4], data).unwrap()
    };
    let vt = randn(&mut rng, &[1, 1, 4, 4], 1.0);
    let (out, _) = diff_run(&dup(&half_q), &dup(&half_k), &vt, &[1.0]);
    assert!(out.data().iter().all(|&x| x.abs() < 1e-15));
}

#[test]
fn diff_rows_sum_to_one_minus_lambda() {
    let mut rng = Rng::new(42);
    let shape = [2, 3, 6, 4];
    let lambda = [0.2, 0.35, 0.7];
    let (_, w) = diff_run(&randn(&mut rng, &shape, 1.0), &randn(&mut rng, &shape, 1.0), &randn(&mut rng, &shape, 1.0), &lambda);
    for (r, row) in w.data().chunks(6).enumerate() {
        let h = (r / 6) % 3;
        assert!((row.iter().sum::<f64>() - (1.0 - lambda[h])).abs() < 1e-10);
    }
}

#[test]
fn diff_rejects_odd_head_width() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 3])).unwrap();
    let l = g.constant(Tensor::from_vec(vec![0.5])).unwrap();
    assert!(diff_attention(&mut g, x, x, x, &Mask::causal(2), l).is_err());
}

#[test]
fn lambda_init_schedule() {
    assert!((lambda_init(0) - 0.2).abs() < 1e-15);
    let expected = 0.8 - 0.6 * (-0.3f64).exp();
    assert!((lambda_init(1) - expected).abs() < 1e-15);
    assert!((lambda_init(1) - 0.35551).abs() < 1e-5);
    let mut prev = lambda_init(0);
    for l in 1..200 {
        let cur = lambda_init(l);
        assert!(cur >= prev && cur <= 0.8);
        prev = cur;
    }
    assert!((0.8 - lambda_init(200)).abs() < 1e-12);
}

#[test]
fn every_variant_gradient_matches_finite_differences() {
    let (b, h, t, dk) = (1, 2, 4, 4);
    for variant in all_variants().into_iter().chain([AttentionVariant::coupled(Integrator::Euler, 3)]) {
        let hkv = variant.kv_heads(h);
        let mut rng = Rng::new(77);
        let qt = randn(&mut rng, &[b, h, t, dk], 1.0);
        let kt = randn(&mut rng, &[b, hkv, t, dk], 1.0);
        let vt = randn(&mut rng, &[b, hkv, t, dk], 1.0);
        let weights = randn(&mut rng, &[b, h, t, dk], 1.0);

        // Collect every leaf: q, k, v, then the variant's own parameters.
        let build = |leaves: &[Tensor], track: bool| -> (Graph, Vec<Var>, Var) {
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), track).unwrap()).collect();
            let params = match variant.kind {
                VariantKind::CoupledEuler | VariantKind::CoupledLeapfrog => VariantParams::Coupled {
                    net: CouplingNetwork::new(&g, vars[3], vars[4]).unwrap(),
                    tau: vars[5],
                },
                VariantKind::MlpOnly => VariantParams::MlpOnly { net: CouplingNetwork::new(&g, vars[3], vars[4]).unwrap() },
                VariantKind::Diff => VariantParams::Diff { lambda: vars[3] },
                _ => VariantParams::None,
            };
            let s = attend(&mut g, &variant, &params, vars[0], vars[1], vars[2], &Mask::causal(t), None).unwrap();
            let w = g.constant(weights.clone()).unwrap();
            let p = g.mul(s.output, w).unwrap();
            let loss = g.sum(p).unwrap();
            (g, vars, loss)
        };
        let mut leaves = vec![qt.clone(), kt.clone(), vt.clone()];
        match variant.kind {
            VariantKind::CoupledEuler | VariantKind::CoupledLeapfrog => {
                leaves.push(randn(&mut rng, &[dk, dk], 0.5));
                leaves.push(randn(&mut rng, &[dk, dk], 0.5));
                leaves.push(tau_init(h, 0.1));
            }
            VariantKind::MlpOnly => {
                leaves.push(randn(&mut rng, &[dk, dk], 0.5));
                leaves.push(randn(&mut rng, &[dk, dk], 0.5));
            }
            VariantKind::Diff => leaves.push(Tensor::from_vec(vec![0.3, 0.6])),
            _ => {}
        }
        let (mut g, vars, loss) = build(&leaves, true);
        g.backward(loss).unwrap();
        for (i, leaf) in leaves.iter().enumerate() {
            let auto = g.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(leaf.shape()));
            let numeric = finite_diff_grad(
                |x| {
                    let mut probe = leaves.clone();
                    probe[i] = x.clone();
                    let (g2, _, l) = build(&probe, false);
                    g2.value(l).item()
                },
                leaf,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&auto, &numeric, 1e-6);
            assert!(err < 1e-4, "{} leaf {i}: rel err {err}", variant.label());
        }
    }
}

#[test]
fn mlp_only_key_gradient_matches_standard() {
    let (b, h, t, dk) = (1, 2, 4, 4);
    let mut rng = Rng::new(90);
    let qt = randn(&mut rng, &[b, h, t, dk], 1.0);
    let kt = randn(&mut rng, &[b, h, t, dk], 1.0);
    let vt = randn(&mut rng, &[b, h, t, dk], 1.0);
    let kgrad = |variant: AttentionVariant, q_override: Option<Tensor>| {
        let mut g = Graph::new();
        let q = g.constant(q_override.unwrap_or_else(|| qt.clone())).unwrap();
        let k = g.param(kt.clone()).unwrap();
        let v = g.constant(vt.clone()).unwrap();
        let params = variant_params(&mut g, &variant, h, dk, &mut Rng::new(5));
        let s = attend(&mut g, &variant, &params, q, k, v, &Mask::causal(t), None).unwrap();
        let loss = g.sum(s.output).unwrap();
        g.backward(loss).unwrap();
        g.grad(k).unwrap().clone()
    };
    // With the same effective queries, key gradients coincide.
    let mlp = AttentionVariant::new(VariantKind::MlpOnly);
    let mut g = Graph::new();
    let q = g.constant(qt.clone()).unwrap();
    let params = variant_params(&mut g, &mlp, h, dk, &mut Rng::new(5));
    let VariantParams::MlpOnly { net } = params else { unreachable!() };
    let q2 = mlp_only_transform(&mut g, q, &net).unwrap();
    let transformed = g.value(q2).clone();
    let a = kgrad(mlp, None);
    let b = kgrad(AttentionVariant::standard(), Some(transformed));
    assert!(a.max_abs_diff(&b) < 1e-14);
}
