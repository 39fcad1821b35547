use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::analysis::{effective_rank, entropy};
use super::gradcheck::grad_check_model;
use super::integrators::{energy_trace, step_determinant, symplecticity_check, ForceField};
use crate::attention::{
    attend, diff_attention, evolve_qk, gqa_attention, lambda_init, sdpa, tau_init, AttentionVariant, CouplingNetwork,
    Integrator, VariantKind, VariantParams,
};
use crate::backbone::{count_params, BatchShape, Model, ModelConfig, ParamLayout, Positional, Preset};
use crate::error::Result;
use crate::numerics::{Graph, Mask, Rng, Tensor};

/// Gradient-check tolerance on worst relative error.
pub const GRAD_TOL: f64 = 1e-4;
pub const SYMPLECTIC_TOL: f64 = 1e-8;
/// Minimum `|det − 1|` that counts as visibly non-symplectic.
pub const NON_SYMPLECTIC_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VerifyOptions {
    /// Skip the finite-difference gradient checks (the slow part).
    pub skip_grad_checks: bool,
    /// Fault injection: treat Euler as claiming unit determinant.
    pub claim_euler_symplectic: bool,
}

impl VerifyOptions {
    fn claims_symplectic(&self, integrator: Integrator) -> bool {
        integrator.is_symplectic() || (self.claim_euler_symplectic && integrator == Integrator::Euler)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// Fixed-width table, one line per check.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!("{status}  {:<width$}  {:>7.2}s  {}\n", c.name, c.seconds, c.detail));
        }
        out
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check { name: name.to_string(), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Run every check, reporting each through `on_check` as it finishes.
pub fn run_verify(opts: &VerifyOptions, on_check: &mut dyn FnMut(&Check)) -> VerifyReport {
    let mut checks = Vec::new();
    let mut push = |c: Check| {
        on_check(&c);
        checks.push(c);
    };
    push(timed("param_ledger", check_param_ledger));
    for integrator in [Integrator::Leapfrog, Integrator::Euler] {
        let name = format!("symplecticity.{}", integrator.name());
        push(timed(&name, || check_symplecticity(integrator, opts.claims_symplectic(integrator))));
    }
    push(timed("euler_linear_determinant", check_euler_linear_determinant));
    push(timed("leapfrog_reversibility", check_reversibility));
    push(timed("energy.euler_closed_form", check_euler_energy));
    push(timed("energy.leapfrog_bounded", check_leapfrog_energy));
    push(timed("identity_limit", check_identity_limit));
    push(timed("causality", check_causality));
    push(timed("row_sums", check_row_sums));
    push(timed("gqa_replication", check_gqa_replication));
    push(timed("rope_shift", check_rope_shift));
    push(timed("analysis_oracles", check_analysis_oracles));
    if !opts.skip_grad_checks {
        for kind in VariantKind::ALL {
            let name = format!("grad_check.{kind}");
            push(timed(&name, || check_gradients(kind)));
        }
    }
    VerifyReport { checks }
}

fn expected_delta(kind: VariantKind) -> i64 {
    match kind {
        VariantKind::Standard => 0,
        VariantKind::CoupledLeapfrog | VariantKind::CoupledEuler => 65_600,
        VariantKind::MlpOnly => 65_536,
        VariantKind::Gqa => -3_145_728,
        VariantKind::Diff => 64,
    }
}

fn check_param_ledger() -> Result<(bool, String)> {
    let mut ok = true;
    let mut parts = Vec::new();
    for kind in VariantKind::ALL {
        let config = ModelConfig::preset(Preset::Small, AttentionVariant::new(kind));
        let ledger = count_params(&config);
        let layout_total: usize = ParamLayout::new(&config).specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        let good = ledger.delta_vs_standard == expected_delta(kind) && layout_total == ledger.total;
        ok &= good;
        parts.push(format!("{kind} {:+}", ledger.delta_vs_standard));
    }
    Ok((ok, format!("small preset: {}", parts.join(", "))))
}

fn check_symplecticity(integrator: Integrator, claimed: bool) -> Result<(bool, String)> {
    let mut rng = Rng::new(0).derive("verify.symplecticity").derive(integrator.name());
    if claimed {
        let mut worst: f64 = 0.0;
        for dk in [2, 4, 8] {
            for _ in 0..100 {
                let std = rng.uniform_range(0.1, 2.0);
                let force = ForceField::random_coupling(dk, std, &mut rng)?;
                let dt = 1.0 - rng.uniform();
                worst = worst.max(symplecticity_check(integrator, &force, dt, dk, 1, &mut rng)?.max_deviation);
            }
        }
        Ok((worst < SYMPLECTIC_TOL, format!("claimed volume preserving: max|det-1| = {worst:.3e} over 300 samples")))
    } else {
        let mut least = f64::INFINITY;
        for dk in [2, 4, 8] {
            for _ in 0..20 {
                let force = ForceField::random_coupling(dk, 1.0, &mut rng)?;
                least = least.min(symplecticity_check(integrator, &force, 0.1, dk, 1, &mut rng)?.max_deviation);
            }
        }
        Ok((least > NON_SYMPLECTIC_MIN, format!("claimed not volume preserving: min|det-1| = {least:.3e} at dt=0.1")))
    }
}

fn check_euler_linear_determinant() -> Result<(bool, String)> {
    let f = ForceField::Linear(-1.0);
    let det = |i, dt| step_determinant(i, &f, dt, &[0.7], &[-0.3]);
    let d1 = det(Integrator::Euler, 0.1)?;
    let d2 = det(Integrator::Euler, 0.05)?;
    let zero_ok = det(Integrator::Euler, 0.0)? == 1.0 && det(Integrator::Leapfrog, 0.0)? == 1.0;
    let ok = (d1 - 1.01).abs() < 1e-12 && (d2 - 1.0025).abs() < 1e-12 && zero_ok;
    Ok((ok, format!("det(dt=0.1) = {d1:.15}, det(dt=0.05) = {d2:.15}, dt=0 identity {zero_ok}")))
}

fn evolve(q: &Tensor, k: &Tensor, w1: &Tensor, w2: &Tensor, tau: &Tensor, n: usize, sign: f64) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone())?, g.constant(k.clone())?);
    let (w1, w2) = (g.constant(w1.clone())?, g.constant(w2.clone())?);
    let net = CouplingNetwork::new(&g, w1, w2)?;
    let tau = g.constant(tau.clone())?;
    let dt = g.exp(tau)?;
    let dt = g.scale(dt, sign)?;
    let (q1, k1) = evolve_qk(&mut g, qv, kv, Integrator::Leapfrog, n, dt, &net)?;
    Ok((g.value(q1).clone(), g.value(k1).clone()))
}

fn check_reversibility() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let mut rng = Rng::new(seed).derive("verify.reversibility");
        let (h, dk) = (2, 8);
        let q = rng.normal(&[2, h, 5, dk], 0.0, 1.0)?;
        let k = rng.normal(&[2, h, 5, dk], 0.0, 1.0)?;
        let w1 = rng.normal(&[dk, dk], 0.0, 0.5)?;
        let w2 = rng.normal(&[dk, dk], 0.0, 0.5)?;
        let tau = Tensor::from_vec(vec![0.1f64.ln(), 0.2f64.ln()]);
        let (qn, kn) = evolve(&q, &k, &w1, &w2, &tau, 7, 1.0)?;
        let (q0, k0) = evolve(&qn, &kn, &w1, &w2, &tau, 7, -1.0)?;
        worst = worst.max(q0.max_abs_diff(&q)).max(k0.max_abs_diff(&k));
    }
    Ok((worst < 1e-10, format!("7 steps forward and back, 3 seeds: max error {worst:.3e}")))
}

fn check_euler_energy() -> Result<(bool, String)> {
    let (dt, n) = (0.1, 100);
    let trace = energy_trace(Integrator::Euler, dt, n, &[1.0, -0.4], &[0.3, 0.8])?;
    let h0 = trace[0];
    let worst = trace
        .iter()
        .enumerate()
        .map(|(i, &h)| (h / (h0 * (1.0 + dt * dt).powi(i as i32)) - 1.0).abs())
        .fold(0.0, f64::max);
    let growth = trace[n] / h0;
    Ok((worst < 1e-10, format!("H_100/H_0 = {growth:.10}, max relative deviation from (1+dt^2)^N {worst:.3e}")))
}

fn check_leapfrog_energy() -> Result<(bool, String)> {
    let (dt, n) = (0.1, 10_000);
    let trace = energy_trace(Integrator::Leapfrog, dt, n, &[1.0], &[0.0])?;
    let h0 = trace[0];
    let worst = trace.iter().map(|h| ((h - h0) / h0).abs()).fold(0.0, f64::max);
    Ok((worst < dt * dt, format!("max relative energy error {worst:.3e} over {n} steps (bound {:.0e})", dt * dt)))
}

fn nano(variant: AttentionVariant) -> ModelConfig {
    ModelConfig::preset(Preset::Nano, variant)
}

fn random_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.index(vocab)).collect()
}

fn check_identity_limit() -> Result<(bool, String)> {
    let mut rng = Rng::new(0).derive("verify.identity");
    let shape = BatchShape::new(2, 12);
    let tokens = random_tokens(&mut rng, 24, 64);
    let mut ok = true;
    for positional in [Positional::Learned, Positional::Rope] {
        let standard = Model::new(nano(AttentionVariant::standard()).with_positional(positional), 7)?;
        let (reference, _) = standard.infer(&tokens, shape)?;
        for integrator in [Integrator::Leapfrog, Integrator::Euler] {
            let config = nano(AttentionVariant::coupled(integrator, 0)).with_positional(positional);
            let (logits, _) = Model::new(config, 7)?.infer(&tokens, shape)?;
            ok &= logits.data().iter().zip(reference.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    let q = rng.normal(&[1, 2, 4, 4], 0.0, 1.0)?;
    let k = rng.normal(&[1, 2, 4, 4], 0.0, 1.0)?;
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q)?, g.constant(k.clone())?);
    let zero = g.constant(Tensor::zeros(&[4, 4]))?;
    let net = CouplingNetwork::new(&g, zero, zero)?;
    let dt = g.constant(Tensor::from_vec(vec![0.1, 0.3]))?;
    let (_, k1) = evolve_qk(&mut g, qv, kv, Integrator::Euler, 3, dt, &net)?;
    let keys_fixed = g.value(k1) == &k;
    ok &= keys_fixed;
    Ok((ok, format!("n_steps=0 logits bit-identical to standard; zero coupling keeps keys exactly: {keys_fixed}")))
}

fn variants_for_checks() -> Vec<AttentionVariant> {
    VariantKind::ALL.iter().map(|&k| AttentionVariant { gqa_group: 2, ..AttentionVariant::new(k) }).collect()
}

fn random_variant_params(g: &mut Graph, variant: &AttentionVariant, heads: usize, dk: usize, rng: &mut Rng) -> Result<VariantParams> {
    Ok(match variant.kind {
        VariantKind::CoupledEuler | VariantKind::CoupledLeapfrog | VariantKind::MlpOnly => {
            let w1 = g.param(rng.normal(&[dk, dk], 0.0, 0.5)?)?;
            let w2 = g.param(rng.normal(&[dk, dk], 0.0, 0.5)?)?;
            let net = CouplingNetwork::new(g, w1, w2)?;
            if variant.kind == VariantKind::MlpOnly {
                VariantParams::MlpOnly { net }
            } else {
                VariantParams::Coupled { net, tau: g.param(tau_init(heads, 0.1))? }
            }
        }
        VariantKind::Diff => {
            VariantParams::Diff { lambda: g.param(Tensor::from_vec((0..heads).map(lambda_init).collect()))? }
        }
        _ => VariantParams::None,
    })
}

fn check_causality() -> Result<(bool, String)> {
    let (b, h, t, dk) = (1, 2, 6, 4);
    let mut rng = Rng::new(0).derive("verify.causality");
    let mut violations = 0usize;
    for variant in variants_for_checks() {
        let hkv = variant.kv_heads(h);
        for i in 0..t {
            let mut g = Graph::new();
            let q = g.param(rng.normal(&[b, h, t, dk], 0.0, 1.0)?)?;
            let k = g.param(rng.normal(&[b, hkv, t, dk], 0.0, 1.0)?)?;
            let v = g.param(rng.normal(&[b, hkv, t, dk], 0.0, 1.0)?)?;
            let params = random_variant_params(&mut g, &variant, h, dk, &mut rng)?;
            let s = attend(&mut g, &variant, &params, q, k, v, &Mask::causal(t), None)?;
            let w = g.value(s.weights);
            for hh in 0..h {
                for c in i + 1..t {
                    violations += usize::from(w.at(&[0, hh, i, c]) != 0.0);
                }
            }
            let mut sel = Tensor::zeros(&[b, h, t, dk]);
            for hh in 0..h {
                for d in 0..dk {
                    sel.set(&[0, hh, i, d], 1.0);
                }
            }
            let sel = g.constant(sel)?;
            let prod = g.mul(s.output, sel)?;
            let loss = g.sum(prod)?;
            g.backward(loss)?;
            if let Some(gv) = g.grad(v) {
                for hh in 0..hkv {
                    for j in i + 1..t {
                        for d in 0..dk {
                            violations += usize::from(gv.at(&[0, hh, j, d]) != 0.0);
                        }
                    }
                }
            }
        }
    }
    Ok((violations == 0, format!("{violations} nonzero upper-triangle weights or future value gradients over 6 variants")))
}

fn check_row_sums() -> Result<(bool, String)> {
    let mut rng = Rng::new(0).derive("verify.rows");
    let shape = [2, 3, 7, 4];
    let mut g = Graph::new();
    let q = g.constant(rng.normal(&shape, 0.0, 2.0)?)?;
    let k = g.constant(rng.normal(&shape, 0.0, 2.0)?)?;
    let v = g.constant(rng.normal(&shape, 0.0, 1.0)?)?;
    let s = sdpa(&mut g, q, k, v, &Mask::causal(7))?;
    let std_err = g.value(s.weights).data().chunks(7).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    let lambda = [0.2, 0.5, 0.8];
    let l = g.constant(Tensor::from_vec(lambda.to_vec()))?;
    let d = diff_attention(&mut g, q, k, v, &Mask::causal(7), l)?;
    let diff_err = g
        .value(d.weights)
        .data()
        .chunks(7)
        .enumerate()
        .map(|(r, row)| (row.iter().sum::<f64>() - (1.0 - lambda[(r / 7) % 3])).abs())
        .fold(0.0, f64::max);
    Ok((std_err < 1e-10 && diff_err < 1e-10, format!("softmax rows |sum-1| {std_err:.1e}; diff rows |sum-(1-lambda)| {diff_err:.1e}")))
}

fn replicate(src: &Tensor, heads: usize) -> Result<Tensor> {
    let s = src.shape();
    let (b, hkv, t, dk) = (s[0], s[1], s[2], s[3]);
    let group = heads / hkv;
    let mut data = Vec::with_capacity(b * heads * t * dk);
    for bb in 0..b {
        for hh in 0..heads {
            let start = ((bb * hkv + hh / group) * t) * dk;
            data.extend_from_slice(&src.data()[start..start + t * dk]);
        }
    }
    Tensor::new(&[b, heads, t, dk], data)
}

fn check_gqa_replication() -> Result<(bool, String)> {
    let mut rng = Rng::new(0).derive("verify.gqa");
    let (b, h, t, dk) = (2, 4, 6, 4);
    let mut worst: f64 = 0.0;
    for hkv in [1, 2, 4] {
        let qt = rng.normal(&[b, h, t, dk], 0.0, 1.0)?;
        let kt = rng.normal(&[b, hkv, t, dk], 0.0, 1.0)?;
        let vt = rng.normal(&[b, hkv, t, dk], 0.0, 1.0)?;
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(qt.clone())?, g.constant(kt.clone())?, g.constant(vt.clone())?);
        let out = gqa_attention(&mut g, q, k, v, &Mask::causal(t))?;
        let (k2, v2) = (g.constant(replicate(&kt, h)?)?, g.constant(replicate(&vt, h)?)?);
        let reference = sdpa(&mut g, q, k2, v2, &Mask::causal(t))?;
        worst = worst.max(g.value(out.output).max_abs_diff(g.value(reference.output)));
    }
    Ok((worst < 1e-12, format!("max difference from replicated keys/values {worst:.1e}")))
}

/// Largest change of any layer's pre-softmax logits when every position
/// moves by `shift`.
pub fn position_shift_delta(model: &Model, tokens: &[usize], shape: BatchShape, shift: usize) -> Result<f64> {
    let logits_at = |offset: usize| -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false)?;
        let out = model.forward(&mut g, &vars, tokens, shape.with_offset(offset))?;
        Ok(out.layers.iter().map(|l| g.value(l.logits).clone()).collect())
    };
    let (a, b) = (logits_at(shape.pos_offset)?, logits_at(shape.pos_offset + shift)?);
    Ok(a.iter().zip(&b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max))
}

fn check_rope_shift() -> Result<(bool, String)> {
    let mut rng = Rng::new(0).derive("verify.rope");
    let shape = BatchShape::new(2, 8);
    let tokens = random_tokens(&mut rng, 16, 64);
    let rope = Model::new(nano(AttentionVariant::standard()).with_positional(Positional::Rope), 3)?;
    let learned = Model::new(nano(AttentionVariant::standard()), 3)?;
    let d_rope = position_shift_delta(&rope, &tokens, shape, 5)?;
    let d_learned = position_shift_delta(&learned, &tokens, shape, 5)?;
    Ok((d_rope < 1e-10 && d_learned > 1e-3, format!("logit change under shift 5: rope {d_rope:.1e}, learned {d_learned:.3e}")))
}

fn check_analysis_oracles() -> Result<(bool, String)> {
    let mut ok = entropy(&[0.0, 1.0, 0.0])? == 0.0;
    for m in [1usize, 2, 5, 64] {
        ok &= (entropy(&vec![1.0 / m as f64; m])? - (m as f64).ln()).abs() < 1e-12;
    }
    ok &= (entropy(&[0.5, 0.25, 0.25])? - 1.5 * 2f64.ln()).abs() < 1e-12;
    for l in [1usize, 4, 9] {
        ok &= (effective_rank(&Tensor::eye(l))? - l as f64).abs() < 1e-9;
    }
    let u = Tensor::new(&[3, 1], vec![1.0, -2.0, 0.5])?;
    let w = Tensor::new(&[1, 4], vec![0.3, 0.1, -1.0, 2.0])?;
    ok &= (effective_rank(&u.matmul(&w)?)? - 1.0).abs() < 1e-9;
    let diag = Tensor::new(&[3, 3], vec![2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])?;
    ok &= (effective_rank(&diag)? - 16.0 / 6.0).abs() < 1e-9;
    let mut rng = Rng::new(0).derive("verify.rank");
    let a = rng.normal(&[6, 6], 0.0, 1.0)?;
    let r = effective_rank(&a)?;
    ok &= (effective_rank(&a.map(|x| 37.5 * x))? - r).abs() < 1e-9 * r;
    Ok((ok, "entropy one-hot/uniform/[.5,.25,.25]; effective rank identity/rank-1/diag(2,1,1)/scaling".into()))
}

fn check_gradients(kind: VariantKind) -> Result<(bool, String)> {
    let config = nano(AttentionVariant { gqa_group: 2, ..AttentionVariant::new(kind) });
    let report = grad_check_model(&config, 0, GRAD_TOL)?;
    let worst = report.params.iter().max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error));
    let detail = match worst {
        Some(p) => format!("worst relative error {:.2e} ({}), {} tensors", p.worst_rel_error, p.name, report.params.len()),
        None => "no parameters".into(),
    };
    Ok((report.passed(), detail))
}
