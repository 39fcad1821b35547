use super::*;
use crate::attention::{AttentionVariant, Integrator, VariantKind};
use crate::numerics::check::{finite_diff_grad, max_relative_error};
use crate::numerics::{Graph, Rng, Tensor};

fn nano(variant: AttentionVariant) -> ModelConfig {
    ModelConfig::preset(Preset::Nano, variant)
}

#[test]
fn rmsnorm_constant_input() {
    let mut g = Graph::new();
    let c = 0.5;
    let x = g.constant(Tensor::full(&[3, 8], c)).unwrap();
    let gain = g.constant(Tensor::ones(&[8])).unwrap();
    let y = rmsnorm(&mut g, x, gain).unwrap();
    let expect = c / (c * c + NORM_EPS).sqrt();
    assert!(g.value(y).data().iter().all(|&v| (v - expect).abs() < 1e-15));
}

#[test]
fn rmsnorm_scale_invariance_and_unit_mean_square() {
    let mut rng = Rng::new(1);
    let xt = rng.normal(&[4, 16], 0.0, 3.0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(xt.clone()).unwrap();
    let x5 = g.constant(xt.map(|v| 5.0 * v)).unwrap();
    let gain = g.constant(Tensor::ones(&[16])).unwrap();
    let y = rmsnorm(&mut g, x, gain).unwrap();
    let y5 = rmsnorm(&mut g, x5, gain).unwrap();
    assert!(g.value(y).max_abs_diff(g.value(y5)) < 1e-6);
    for row in g.value(y).data().chunks(16) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / 16.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }
}

#[test]
fn rmsnorm_rejects_zero_width_and_bad_gain() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 0])).unwrap();
    let gain = g.constant(Tensor::zeros(&[0])).unwrap();
    assert!(rmsnorm(&mut g, x, gain).is_err());
    let x = g.constant(Tensor::zeros(&[2, 4])).unwrap();
    let gain = g.constant(Tensor::ones(&[3])).unwrap();
    assert!(rmsnorm(&mut g, x, gain).is_err());
}

#[test]
fn swiglu_zero_gate_is_zero() {
    let mut rng = Rng::new(2);
    let mut g = Graph::new();
    let x = g.constant(rng.normal(&[5, 8], 0.0, 1.0).unwrap()).unwrap();
    let wg = g.constant(Tensor::zeros(&[8, 12])).unwrap();
    let wu = g.constant(rng.normal(&[8, 12], 0.0, 1.0).unwrap()).unwrap();
    let wd = g.constant(rng.normal(&[12, 8], 0.0, 1.0).unwrap()).unwrap();
    let y = swiglu_ffn(&mut g, x, wg, wu, wd).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(&[7, 8])).unwrap();
    assert!(swiglu_ffn(&mut g, x, wg, wu, bad).is_err());
}

#[test]
fn swiglu_gradients_match_finite_differences() {
    let mut rng = Rng::new(3);
    let leaves: Vec<Tensor> = [[3, 4], [4, 6], [4, 6], [6, 4]]
        .iter()
        .map(|s| rng.normal(s, 0.0, 0.7).unwrap())
        .collect();
    let weights = rng.normal(&[3, 4], 0.0, 1.0).unwrap();
    let eval = |ls: &[Tensor], track: bool| {
        let mut g = Graph::new();
        let v: Vec<_> = ls.iter().map(|t| g.leaf(t.clone(), track).unwrap()).collect();
        let y = swiglu_ffn(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        let w = g.constant(weights.clone()).unwrap();
        let p = g.mul(y, w).unwrap();
        let l = g.sum(p).unwrap();
        (g, v, l)
    };
    let (mut g, vars, loss) = eval(&leaves, true);
    g.backward(loss).unwrap();
    for i in 0..leaves.len() {
        let numeric = finite_diff_grad(
            |x| {
                let mut probe = leaves.clone();
                probe[i] = x.clone();
                let (g2, _, l) = eval(&probe, false);
                g2.value(l).item()
            },
            &leaves[i],
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(g.grad(vars[i]).unwrap(), &numeric, 1e-3) < 1e-6);
    }
}

#[test]
fn ffn_parameter_count_per_layer() {
    let c = nano(AttentionVariant::standard());
    let ledger = count_params(&c);
    assert_eq!(ledger.components["ffn"], 3 * c.d_model * c.d_ff * c.n_layers);
}

fn rope_logits(q: &Tensor, k: &Tensor, positions: &[f64]) -> Tensor {
    let mut g = Graph::new();
    let qv = g.constant(q.clone()).unwrap();
    let kv = g.constant(k.clone()).unwrap();
    let (q2, k2) = apply_rope(&mut g, qv, kv, positions).unwrap();
    let l = g.matmul(q2, k2, false, true).unwrap();
    g.value(l).clone()
}

#[test]
fn rope_position_zero_is_identity_and_shift_preserves_logits() {
    let mut rng = Rng::new(4);
    let q = rng.normal(&[1, 2, 6, 8], 0.0, 1.0).unwrap();
    let k = rng.normal(&[1, 2, 6, 8], 0.0, 1.0).unwrap();
    let mut g = Graph::new();
    let qv = g.constant(q.slice_rows_for_test(1)).unwrap();
    let kv = g.constant(k.slice_rows_for_test(1)).unwrap();
    let (q0, k0) = apply_rope(&mut g, qv, kv, &[0.0]).unwrap();
    assert_eq!(g.value(q0), &q.slice_rows_for_test(1));
    assert_eq!(g.value(k0), &k.slice_rows_for_test(1));

    let pos: Vec<f64> = (0..6).map(|p| p as f64).collect();
    let shifted: Vec<f64> = pos.iter().map(|p| p + 5.0).collect();
    let a = rope_logits(&q, &k, &pos);
    let b = rope_logits(&q, &k, &shifted);
    assert!(a.max_abs_diff(&b) < 1e-10);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 3])).unwrap();
    assert!(apply_rope(&mut g, x, x, &[0.0, 1.0]).is_err());
}

trait SliceRows {
    fn slice_rows_for_test(&self, n: usize) -> Tensor;
}

impl SliceRows for Tensor {
    /// First `n` sequence positions of a `[1, h, seq, d]` tensor.
    fn slice_rows_for_test(&self, n: usize) -> Tensor {
        let s = self.shape();
        let (h, t, d) = (s[1], s[2], s[3]);
        let mut data = Vec::new();
        for hh in 0..h {
            data.extend_from_slice(&self.data()[(hh * t) * d..(hh * t + n) * d]);
        }
        Tensor::new(&[1, h, n, d], data).unwrap()
    }
}

#[test]
fn zeroed_output_projections_make_blocks_identities() {
    let config = nano(AttentionVariant::coupled(Integrator::Leapfrog, 3));
    let mut model = Model::new(config.clone(), 0).unwrap();
    for l in 0..config.n_layers {
        for name in ["attn.wo", "ffn.w_down"] {
            let p = model.param_mut(&format!("layers.{l}.{name}")).unwrap();
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false).unwrap();
    let mut rng = Rng::new(9);
    let x0 = g.constant(rng.normal(&[2 * 8, 32], 0.0, 1.0).unwrap()).unwrap();
    let mask = crate::numerics::Mask::causal(8);
    let shape = BatchShape::new(2, 8);
    let (x1, scored) = block_forward(&mut g, &config, &model.layout().layers[0], &vars, x0, shape, &mask, None).unwrap();
    assert_eq!(g.value(x1), g.value(x0));
    for row in g.value(scored.weights).data().chunks(8) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.index(vocab)).collect()
}

#[test]
fn logits_shape_and_tied_output() {
    let config = nano(AttentionVariant::standard());
    let model = Model::new(config.clone(), 0).unwrap();
    let tokens = random_tokens(&mut Rng::new(1), 3 * 10, 64);
    let (logits, weights) = model.infer(&tokens, BatchShape::new(3, 10)).unwrap();
    assert_eq!(logits.shape(), &[3, 10, 64]);
    assert_eq!(weights.len(), config.n_layers);
    assert_eq!(weights[0].shape(), &[3, 2, 10, 10]);
    assert!(model.layout().specs.iter().all(|s| !s.name.contains("out") && !s.name.contains("lm_head")));
    let ledger = count_params(&config);
    assert_eq!(ledger.components.len(), 5);
    assert_eq!(ledger.components["token_embedding"], 64 * 32);
}

#[test]
fn init_loss_is_near_log_vocab() {
    for kind in VariantKind::ALL {
        let variant = AttentionVariant { gqa_group: 2, ..AttentionVariant::new(kind) };
        let model = Model::new(nano(variant), 7).unwrap();
        let mut rng = Rng::new(11);
        let (b, t) = (8, 16);
        let tokens = random_tokens(&mut rng, b * t, 64);
        let targets = random_tokens(&mut rng, b * t, 64);
        let batch = TokenBatch::new(b, t, tokens, targets, vec![true; b * t]).unwrap();
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false).unwrap();
        let (loss, _) = model.loss(&mut g, &vars, &batch).unwrap();
        let l = g.value(loss).item().unwrap();
        assert!((l / 64f64.ln() - 1.0).abs() < 0.05, "{kind}: {l}");
    }
}

#[test]
fn forward_rejects_bad_tokens_and_lengths() {
    let model = Model::new(nano(AttentionVariant::standard()), 0).unwrap();
    assert!(matches!(
        model.infer(&[1, 64, 3], BatchShape::new(1, 3)),
        Err(crate::Error::TokenOutOfRange { token: 64, vocab: 64 })
    ));
    assert!(matches!(
        model.infer(&[1; 17], BatchShape::new(1, 17)),
        Err(crate::Error::SequenceTooLong { len: 17, max: 16 })
    ));
    assert!(model.infer(&[1; 4], BatchShape::new(1, 4).with_offset(13)).is_err());
    assert!(model.infer(&[1; 5], BatchShape::new(2, 3)).is_err());
}

#[test]
fn invalid_configs_rejected() {
    let mut c = nano(AttentionVariant::standard());
    c.n_heads = 3;
    assert!(Model::new(c, 0).is_err());
    let c = nano(AttentionVariant::gqa(4));
    assert!(Model::new(c, 0).is_err());
    let mut c = nano(AttentionVariant::standard());
    c.d_ff = 0;
    assert!(c.validate().is_err());
    let c = nano(AttentionVariant::coupled(Integrator::Euler, 8));
    assert!(c.validate().is_err());
}

#[test]
fn zero_step_coupled_logits_equal_standard_bitwise() {
    for positional in [Positional::Learned, Positional::Rope] {
        for integ in [Integrator::Leapfrog, Integrator::Euler] {
            let tokens = random_tokens(&mut Rng::new(5), 2 * 16, 64);
            let std_model = Model::new(nano(AttentionVariant::standard()).with_positional(positional), 42).unwrap();
            let cpl = Model::new(nano(AttentionVariant::coupled(integ, 0)).with_positional(positional), 42).unwrap();
            let (a, _) = std_model.infer(&tokens, BatchShape::new(2, 16)).unwrap();
            let (b, _) = cpl.infer(&tokens, BatchShape::new(2, 16)).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }
}

#[test]
fn shared_parameters_do_not_depend_on_variant() {
    let a = Model::new(nano(AttentionVariant::standard()), 3).unwrap();
    let b = Model::new(nano(AttentionVariant::new(VariantKind::Diff)), 3).unwrap();
    for (name, t) in a.named_params() {
        assert_eq!(b.param(name), Some(t), "{name}");
    }
    let c = Model::new(nano(AttentionVariant::standard()), 4).unwrap();
    assert_ne!(a.param("layers.0.attn.wq"), c.param("layers.0.attn.wq"));
}

#[test]
fn init_statistics() {
    let model = Model::new(ModelConfig::preset(Preset::Micro, AttentionVariant::coupled(Integrator::Leapfrog, 3)), 0).unwrap();
    let std = |t: &Tensor| (t.sq_norm() / t.len() as f64).sqrt();
    let wq = model.param("layers.0.attn.wq").unwrap();
    assert!((std(wq) - INIT_STD).abs() < 0.002);
    let wo = model.param("layers.1.attn.wo").unwrap();
    assert!((std(wo) - INIT_STD / 2.0).abs() < 0.002);
    let tau = model.param("layers.0.attn.tau").unwrap();
    assert!(tau.data().iter().all(|&t| (t.exp() - 0.1).abs() < 1e-15));
    let diff = Model::new(nano(AttentionVariant::new(VariantKind::Diff)), 0).unwrap();
    assert!(diff.param("layers.0.attn.lambda").unwrap().data().iter().all(|&l| (l - 0.2).abs() < 1e-15));
    let l1 = diff.param("layers.1.attn.lambda").unwrap().data()[0];
    assert!((l1 - crate::attention::lambda_init(1)).abs() < 1e-15);
}

#[test]
fn small_preset_variant_deltas() {
    let small = |v| ModelConfig::preset(Preset::Small, v);
    for integ in [Integrator::Leapfrog, Integrator::Euler] {
        let l = count_params(&small(AttentionVariant::coupled(integ, 3)));
        assert_eq!(l.variant_specific, 65_600);
        assert_eq!(l.delta_vs_standard, 65_600);
    }
    let diff = count_params(&small(AttentionVariant::new(VariantKind::Diff)));
    assert_eq!(diff.variant_specific, 64);
    assert_eq!(diff.delta_vs_standard, 64);
    let gqa = count_params(&small(AttentionVariant::gqa(4)));
    assert_eq!(gqa.delta_vs_standard, 57_197_568 - 60_343_296);
    assert_eq!(gqa.variant_specific, 0);
    let mlp = count_params(&small(AttentionVariant::new(VariantKind::MlpOnly)));
    assert_eq!(mlp.variant_specific, 65_536);
    let standard = count_params(&small(AttentionVariant::standard()));
    assert_eq!(standard.variant_specific, 0);
    assert_eq!(standard.total, standard.components.values().sum::<usize>());
}

#[test]
fn delta_formulas_hold_for_every_preset() {
    for preset in Preset::ALL {
        let base = ModelConfig::preset(preset, AttentionVariant::standard());
        let (dk, l, h, d) = (base.d_k() as i64, base.n_layers as i64, base.n_heads as i64, base.d_model as i64);
        let coupled = count_params(&base.clone().with_variant(AttentionVariant::coupled(Integrator::Euler, 3)));
        assert_eq!(coupled.delta_vs_standard, 2 * dk * dk * l + h * l, "{preset}");
        let group = if h % 4 == 0 { 4 } else { 2 };
        let gqa = count_params(&base.clone().with_variant(AttentionVariant::gqa(group)));
        let kv_ratio = 1.0 / group as f64;
        let expect = -(2.0 * (d * d * l) as f64 * (1.0 - kv_ratio));
        assert_eq!(gqa.delta_vs_standard as f64, expect, "{preset}");
        let rope = count_params(&base.clone().with_positional(Positional::Rope));
        assert_eq!(rope.total + base.max_seq_len * base.d_model, count_params(&base).total);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let config = nano(AttentionVariant::new(VariantKind::Diff)).with_positional(Positional::Rope);
    let model = Model::new(config, 17).unwrap();
    let mut ck = Checkpoint::from_model(&model);
    ck.meta = serde_json::json!({"step": 12});
    ck.records.push(("extra".into(), Tensor::new(&[2], vec![f64::MIN_POSITIVE, -0.0]).unwrap()));
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    assert_eq!(&buf[..4], MAGIC);
    let back = Checkpoint::read_from(buf.as_slice()).unwrap();
    assert_eq!(back.config, ck.config);
    assert_eq!(back.meta, ck.meta);
    for ((n1, t1), (n2, t2)) in ck.records.iter().zip(&back.records) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t1), bits(t2));
    }
    assert_eq!(back.to_model().unwrap(), model);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), buf);
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn corrupt_checkpoints_rejected() {
    let model = Model::new(nano(AttentionVariant::standard()), 1).unwrap();
    let mut buf = Vec::new();
    Checkpoint::from_model(&model).write_to(&mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(Checkpoint::read_from(bad.as_slice()).is_err());
    assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
    let mut extra = buf.clone();
    extra.push(0);
    assert!(Checkpoint::read_from(extra.as_slice()).is_err());
    let mut ck = Checkpoint::from_model(&model);
    ck.records.retain(|(n, _)| n != "final_norm.gain");
    assert!(ck.to_model().is_err());
}

#[test]
fn config_json_is_strict() {
    let c = nano(AttentionVariant::coupled(Integrator::Leapfrog, 3));
    let json = serde_json::to_value(&c).unwrap();
    let back: ModelConfig = serde_json::from_value(json.clone()).unwrap();
    assert_eq!(back, c);
    let mut extra = json;
    extra["dropout"] = serde_json::json!(0.1);
    assert!(serde_json::from_value::<ModelConfig>(extra).is_err());
    assert_eq!("micro".parse::<Preset>().unwrap(), Preset::Micro);
    assert!("huge".parse::<Preset>().is_err());
}
