use super::config::{ModelConfig, Positional, NORM_EPS, ROPE_BASE};
use super::params::{LayerSlots, ParamLayout};
use crate::attention::{attend, CouplingNetwork, RopeSpec, Scored, VariantParams};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Tensor, Var};

/// `gain ∘ x / sqrt(mean(x²) + 1e-6)` over the last axis.
pub fn rmsnorm(g: &mut Graph, x: Var, gain: Var) -> Result<Var> {
    g.rmsnorm(x, gain, NORM_EPS)
}

/// `(SiLU(x·W_gate) ∘ (x·W_up)) · W_down` on `[n, d_model]` rows.
pub fn swiglu_ffn(g: &mut Graph, x: Var, w_gate: Var, w_up: Var, w_down: Var) -> Result<Var> {
    let gate = g.matmul(x, w_gate, false, false)?;
    let gate = g.silu(gate)?;
    let up = g.matmul(x, w_up, false, false)?;
    let h = g.mul(gate, up)?;
    g.matmul(h, w_down, false, false)
}

/// Rotate `[b, h, seq, d_k]` queries and keys by their positions.
pub fn apply_rope(g: &mut Graph, q: Var, k: Var, positions: &[f64]) -> Result<(Var, Var)> {
    Ok((g.rope(q, positions, ROPE_BASE)?, g.rope(k, positions, ROPE_BASE)?))
}

/// Attention outputs retained from one layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    /// `[batch, heads, seq, seq]` attention weights.
    pub weights: Var,
    /// `[batch, heads, seq, seq]` pre-softmax logits (first map for diff).
    pub logits: Var,
}

/// Graph handles produced by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch, seq, vocab]`.
    pub logits: Var,
    pub layers: Vec<LayerTrace>,
}

/// Shape of a token batch plus the position of its first token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchShape {
    pub batch: usize,
    pub seq: usize,
    pub pos_offset: usize,
}

impl BatchShape {
    pub fn new(batch: usize, seq: usize) -> Self {
        BatchShape { batch, seq, pos_offset: 0 }
    }

    pub fn with_offset(mut self, pos_offset: usize) -> Self {
        self.pos_offset = pos_offset;
        self
    }
}

/// Pre-norm block: `x + Attn(RMSNorm(x))`, then `x + FFN(RMSNorm(x))`.
///
/// `x` is the `[batch·seq, d_model]` residual stream.
pub fn block_forward(
    g: &mut Graph,
    config: &ModelConfig,
    slots: &LayerSlots,
    vars: &[Var],
    x: Var,
    shape: BatchShape,
    mask: &Mask,
    positions: Option<&[f64]>,
) -> Result<(Var, Scored)> {
    let (b, t) = (shape.batch, shape.seq);
    let h = rmsnorm(g, x, vars[slots.attn_norm])?;
    let q = g.matmul(h, vars[slots.wq], false, false)?;
    let k = g.matmul(h, vars[slots.wk], false, false)?;
    let v = g.matmul(h, vars[slots.wv], false, false)?;
    let q = g.split_heads(q, b, t, config.n_heads)?;
    let k = g.split_heads(k, b, t, config.kv_heads())?;
    let v = g.split_heads(v, b, t, config.kv_heads())?;
    let params = match (slots.coupling, slots.tau, slots.lambda) {
        (Some((w1, w2)), tau, _) => {
            let net = CouplingNetwork::new(g, vars[w1], vars[w2])?;
            match tau {
                Some(tau) => VariantParams::Coupled { net, tau: vars[tau] },
                None => VariantParams::MlpOnly { net },
            }
        }
        (None, _, Some(lambda)) => VariantParams::Diff { lambda: vars[lambda] },
        _ => VariantParams::None,
    };
    let rope = positions.map(|p| RopeSpec { positions: p, base: ROPE_BASE });
    let scored = attend(g, &config.variant, &params, q, k, v, mask, rope)?;
    let merged = g.merge_heads(scored.output)?;
    let attn = g.matmul(merged, vars[slots.wo], false, false)?;
    let x = g.add(x, attn)?;
    let h = rmsnorm(g, x, vars[slots.ffn_norm])?;
    let ffn = swiglu_ffn(g, h, vars[slots.w_gate], vars[slots.w_up], vars[slots.w_down])?;
    Ok((g.add(x, ffn)?, scored))
}

/// A decoder-only transformer: configuration plus parameter values in
/// [`ParamLayout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let params = layout.init(seed)?;
        Ok(Model { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        layout.check(&params)?;
        Ok(Model { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.layout.index_of(name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.layout.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.layout.specs.iter().map(|s| s.name.as_str()).zip(&self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Record every parameter on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<Var>> {
        self.params.iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    fn check_tokens(&self, tokens: &[usize], shape: BatchShape) -> Result<()> {
        if tokens.len() != shape.batch * shape.seq || shape.batch == 0 || shape.seq == 0 {
            return Err(Error::Shape(format!(
                "{} tokens for batch {} × seq {}",
                tokens.len(),
                shape.batch,
                shape.seq
            )));
        }
        let limit = match self.config.positional {
            Positional::Learned => shape.seq + shape.pos_offset,
            Positional::Rope => shape.seq,
        };
        if limit > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: limit, max: self.config.max_seq_len });
        }
        if let Some(&tok) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { token: tok, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Embed, run every block, normalize and project onto the tied
    /// embedding matrix. `vars` come from [`Model::bind`].
    pub fn forward(&self, g: &mut Graph, vars: &[Var], tokens: &[usize], shape: BatchShape) -> Result<Forward> {
        self.check_tokens(tokens, shape)?;
        if vars.len() != self.layout.len() {
            return Err(Error::Shape(format!("expected {} bound parameters, got {}", self.layout.len(), vars.len())));
        }
        let (b, t) = (shape.batch, shape.seq);
        let table = vars[self.layout.tok_embed];
        let mut x = g.embedding(table, tokens, &[b * t])?;
        if let Some(pos) = self.layout.pos_embed {
            let ids: Vec<usize> = (0..b).flat_map(|_| shape.pos_offset..shape.pos_offset + t).collect();
            let p = g.embedding(vars[pos], &ids, &[b * t])?;
            x = g.add(x, p)?;
        }
        let positions: Option<Vec<f64>> = (self.config.positional == Positional::Rope)
            .then(|| (shape.pos_offset..shape.pos_offset + t).map(|p| p as f64).collect());
        let mask = Mask::causal(t);
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        for slots in &self.layout.layers {
            let (next, scored) = block_forward(g, &self.config, slots, vars, x, shape, &mask, positions.as_deref())?;
            layers.push(LayerTrace { weights: scored.weights, logits: scored.logits });
            x = next;
        }
        let h = rmsnorm(g, x, vars[self.layout.final_norm])?;
        let logits = g.matmul(h, table, false, true)?;
        let logits = g.reshape(logits, &[b, t, self.config.vocab_size])?;
        Ok(Forward { logits, layers })
    }

    /// Forward pass without gradients; returns logits and per-layer weights.
    pub fn infer(&self, tokens: &[usize], shape: BatchShape) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false)?;
        let out = self.forward(&mut g, &vars, tokens, shape)?;
        let weights = out.layers.iter().map(|l| g.value(l.weights).clone()).collect();
        Ok((g.value(out.logits).clone(), weights))
    }

    /// Mean cross-entropy over positions where `mask` is set.
    pub fn loss(&self, g: &mut Graph, vars: &[Var], batch: &TokenBatch) -> Result<(Var, Forward)> {
        let out = self.forward(g, vars, &batch.tokens, BatchShape::new(batch.batch, batch.seq))?;
        let flat = g.reshape(out.logits, &[batch.batch * batch.seq, self.config.vocab_size])?;
        let loss = g.cross_entropy(flat, &batch.targets, &batch.mask)?;
        Ok((loss, out))
    }
}

/// Flattened `[batch, seq]` inputs, next-token targets and loss mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, tokens: Vec<usize>, targets: Vec<usize>, mask: Vec<bool>) -> Result<Self> {
        let n = batch * seq;
        if tokens.len() != n || targets.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "batch {batch}×{seq}: {} tokens, {} targets, {} mask entries",
                tokens.len(),
                targets.len(),
                mask.len()
            )));
        }
        Ok(TokenBatch { batch, seq, tokens, targets, mask })
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// One past the last masked position over all rows.
    pub fn active_len(&self) -> usize {
        (0..self.batch)
            .filter_map(|b| self.mask[b * self.seq..(b + 1) * self.seq].iter().rposition(|&m| m))
            .max()
            .map_or(0, |p| p + 1)
    }

    /// Drop positions after [`TokenBatch::active_len`]. Under a causal
    /// model the loss at every kept position is unchanged.
    pub fn trimmed(&self) -> TokenBatch {
        let len = self.active_len().max(1);
        if len == self.seq {
            return self.clone();
        }
        let cut = |v: &[usize]| -> Vec<usize> { v.chunks(self.seq).flat_map(|r| r[..len].to_vec()).collect() };
        TokenBatch {
            batch: self.batch,
            seq: len,
            tokens: cut(&self.tokens),
            targets: cut(&self.targets),
            mask: self.mask.chunks(self.seq).flat_map(|r| r[..len].to_vec()).collect(),
        }
    }
}
