use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Token used to fill positions after the queries.
pub const PAD: usize = 0;
/// Default vocabulary: pad, 31 keys, 32 values.
pub const DEFAULT_VOCAB: usize = 64;
/// Size of the held-out evaluation set.
pub const EVAL_SEQUENCES: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }

    /// `(num_pairs, seq_len, num_queries)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Difficulty::Easy => (4, 64, 4),
            Difficulty::Medium => (8, 128, 8),
            Difficulty::Hard => (16, 256, 16),
        }
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown MQAR difficulty {s:?} (easy | medium | hard)")))
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Multi-query associative recall geometry.
///
/// A sequence is `num_pairs` (key, value) tokens with distinct keys, then
/// `num_queries` keys drawn from the bound ones, then padding. Keys come
/// from `1..vocab/2`, values from `vocab/2..vocab`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MqarSpec {
    pub num_pairs: usize,
    pub seq_len: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub num_queries: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}

impl MqarSpec {
    pub fn preset(difficulty: Difficulty, seed: u64) -> Self {
        let (num_pairs, seq_len, num_queries) = difficulty.dims();
        MqarSpec { num_pairs, seq_len, vocab_size: DEFAULT_VOCAB, num_queries, seed }
    }

    pub fn keys(&self) -> std::ops::Range<usize> {
        1..self.vocab_size / 2
    }

    pub fn values(&self) -> std::ops::Range<usize> {
        self.vocab_size / 2..self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_pairs == 0 || self.num_queries == 0 {
            return Err(Error::Config("MQAR needs at least one pair and one query".into()));
        }
        if 2 * self.num_pairs + self.num_queries > self.seq_len {
            return Err(Error::Config(format!(
                "{} pairs and {} queries do not fit in {} tokens",
                self.num_pairs, self.num_queries, self.seq_len
            )));
        }
        if self.keys().len() < self.num_pairs {
            return Err(Error::Config(format!(
                "key alphabet of {} tokens is smaller than {} pairs",
                self.keys().len(),
                self.num_pairs
            )));
        }
        Ok(())
    }

    /// Training batch `index`, reproducible from `(spec, index)` alone.
    pub fn train_batch(&self, index: u64, batch_size: usize) -> Result<TokenBatch> {
        mqar_generate(self, batch_size, &mut Rng::new(self.seed).derive_indexed("mqar.train", index))
    }

    /// The held-out set: `count` sequences on a stream disjoint from
    /// training, returned in chunks of at most `chunk` sequences.
    pub fn eval_set(&self, count: usize, chunk: usize) -> Result<Vec<TokenBatch>> {
        let mut rng = Rng::new(self.seed).derive("mqar.eval");
        let mut out = Vec::new();
        let mut left = count;
        while left > 0 {
            let n = left.min(chunk.max(1));
            out.push(mqar_generate(self, n, &mut rng)?);
            left -= n;
        }
        Ok(out)
    }
}

/// Draw `batch_size` MQAR sequences. Targets are set at query positions to
/// the value bound to the queried key; the loss mask marks exactly those.
pub fn mqar_generate(spec: &MqarSpec, batch_size: usize, rng: &mut Rng) -> Result<TokenBatch> {
    spec.validate()?;
    let t = spec.seq_len;
    let n = batch_size * t;
    let (mut tokens, mut targets, mut mask) = (vec![PAD; n], vec![PAD; n], vec![false; n]);
    let mut alphabet: Vec<usize> = spec.keys().collect();
    let values = spec.values();
    for b in 0..batch_size {
        let row = b * t;
        rng.shuffle(&mut alphabet);
        let keys = &alphabet[..spec.num_pairs];
        let bound: Vec<usize> = (0..spec.num_pairs).map(|_| values.start + rng.index(values.len())).collect();
        for (i, (&k, &v)) in keys.iter().zip(&bound).enumerate() {
            tokens[row + 2 * i] = k;
            tokens[row + 2 * i + 1] = v;
        }
        for j in 0..spec.num_queries {
            let pick = rng.index(spec.num_pairs);
            let pos = row + 2 * spec.num_pairs + j;
            tokens[pos] = keys[pick];
            targets[pos] = bound[pick];
            mask[pos] = true;
        }
    }
    TokenBatch::new(batch_size, t, tokens, targets, mask)
}

/// Fraction of masked positions whose argmax equals the target; ties go to
/// the lower token id. `logits` is `[batch, seq, vocab]`.
pub fn mqar_accuracy(logits: &Tensor, batch: &TokenBatch) -> Result<f64> {
    let (correct, total) = count_correct(logits, batch)?;
    Ok(correct as f64 / total as f64)
}

/// `(correct, masked)` counts behind [`mqar_accuracy`].
pub fn count_correct(logits: &Tensor, batch: &TokenBatch) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 3 || s[0] != batch.batch || s[1] != batch.seq {
        return Err(Error::Shape(format!("logits {s:?} for batch {}×{}", batch.batch, batch.seq)));
    }
    let total = batch.masked_count();
    if total == 0 {
        return Err(Error::InvalidArgument("accuracy over an empty mask".into()));
    }
    let v = s[2];
    let correct = logits
        .data()
        .chunks(v)
        .zip(batch.mask.iter().zip(&batch.targets))
        .filter(|(_, (&m, _))| m)
        .filter(|(row, (_, &target))| argmax(row) == target)
        .count();
    Ok((correct, total))
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
