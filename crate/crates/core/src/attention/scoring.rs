use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Var};

/// Weights and output of one scoring pass.
#[derive(Clone, Copy, Debug)]
pub struct Scored {
    pub output: Var,
    /// Row-stochastic (or, for differential attention, effective) weights,
    /// `[batch, heads, seq, seq]`.
    pub weights: Var,
    /// Scaled pre-softmax logits.
    pub logits: Var,
}

fn check_qkv(g: &Graph, q: Var, k: Var, v: Var) -> Result<usize> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq.len() != 4 || sk.len() != 4 || sv.len() != 4 {
        return Err(Error::Shape(format!("attention expects [batch, heads, seq, d_k]; got {sq:?} {sk:?} {sv:?}")));
    }
    let d_k = sq[3];
    if d_k == 0 {
        return Err(Error::Shape("d_k = 0".into()));
    }
    if sk[3] != d_k || sk[..3] != sv[..3] || sq[0] != sk[0] {
        return Err(Error::Shape(format!("q {sq:?}, k {sk:?}, v {sv:?} do not conform")));
    }
    Ok(d_k)
}

fn scaled_logits(g: &mut Graph, q: Var, k: Var, d: usize) -> Result<Var> {
    let raw = g.matmul(q, k, false, true)?;
    g.scale(raw, 1.0 / (d as f64).sqrt())
}

/// `softmax(QKᵀ/√d_k + mask)·V`.
pub fn sdpa(g: &mut Graph, q: Var, k: Var, v: Var, mask: &Mask) -> Result<Scored> {
    let d_k = check_qkv(g, q, k, v)?;
    if g.shape(q)[1] != g.shape(k)[1] {
        return Err(Error::Shape(format!("sdpa head counts differ: {:?} vs {:?}", g.shape(q), g.shape(k))));
    }
    let logits = scaled_logits(g, q, k, d_k)?;
    let weights = g.masked_softmax(logits, mask)?;
    let output = g.matmul(weights, v, false, false)?;
    Ok(Scored { output, weights, logits })
}

/// Grouped-query attention: query head `h` reads key/value head
/// `h / (H / H_kv)`.
pub fn gqa_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &Mask) -> Result<Scored> {
    check_qkv(g, q, k, v)?;
    let (hq, hkv) = (g.shape(q)[1], g.shape(k)[1]);
    if hkv == 0 || hq % hkv != 0 {
        return Err(Error::Shape(format!("{hq} query heads not divisible by {hkv} key/value heads")));
    }
    let group = hq / hkv;
    let k = g.repeat_heads(k, group)?;
    let v = g.repeat_heads(v, group)?;
    sdpa(g, q, k, v, mask)
}

/// Differential attention: `(softmax(Q₁K₁ᵀ/√d_s) − λ·softmax(Q₂K₂ᵀ/√d_s))·V`
/// with `d_s = d_k/2` and one `λ` per head.
pub fn diff_attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: &Mask, lambda: Var) -> Result<Scored> {
    let d_k = check_qkv(g, q, k, v)?;
    if d_k % 2 != 0 {
        return Err(Error::Shape(format!("differential attention needs an even d_k, got {d_k}")));
    }
    let heads = g.shape(q)[1];
    if g.shape(lambda) != [heads] {
        return Err(Error::Shape(format!("lambda {:?} for {heads} heads", g.shape(lambda))));
    }
    let ds = d_k / 2;
    let q1 = g.slice_last(q, 0, ds)?;
    let q2 = g.slice_last(q, ds, ds)?;
    let k1 = g.slice_last(k, 0, ds)?;
    let k2 = g.slice_last(k, ds, ds)?;
    let logits = scaled_logits(g, q1, k1, ds)?;
    let a1 = g.masked_softmax(logits, mask)?;
    let logits2 = scaled_logits(g, q2, k2, ds)?;
    let a2 = g.masked_softmax(logits2, mask)?;
    let a2 = g.head_scale(a2, lambda)?;
    let weights = g.sub(a1, a2)?;
    let output = g.matmul(weights, v, false, false)?;
    Ok(Scored { output, weights, logits })
}
