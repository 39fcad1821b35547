use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionVariant;
use crate::error::{Error, Result};

/// RMSNorm epsilon added to the mean square.
pub const NORM_EPS: f64 = 1e-6;
/// RoPE base frequency.
pub const ROPE_BASE: f64 = 10_000.0;
/// Standard deviation of every normal initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    /// Table of `max_seq_len` vectors added to the token embeddings.
    Learned,
    /// Rotary embedding on queries and keys; no positional parameters.
    Rope,
}

impl FromStr for Positional {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Positional::Learned),
            "rope" => Ok(Positional::Rope),
            _ => Err(Error::Config(format!("unknown positional scheme {s:?} (learned | rope)"))),
        }
    }
}

impl fmt::Display for Positional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Positional::Learned => "learned",
            Positional::Rope => "rope",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_positional")]
    pub positional: Positional,
    pub variant: AttentionVariant,
}

fn default_positional() -> Positional {
    Positional::Learned
}

/// Named model sizes.
///
/// `nano` is the gradient-check model and `micro` the MQAR smoke model; the
/// remaining four follow the published size ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Nano,
    Micro,
    Tiny,
    Small,
    Medium,
    Large,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::Nano, Preset::Micro, Preset::Tiny, Preset::Small, Preset::Medium, Preset::Large];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Nano => "nano",
            Preset::Micro => "micro",
            Preset::Tiny => "tiny",
            Preset::Small => "small",
            Preset::Medium => "medium",
            Preset::Large => "large",
        }
    }

    /// `(d_model, n_heads, n_layers, d_ff, vocab_size, max_seq_len)`.
    pub fn dims(self) -> (usize, usize, usize, usize, usize, usize) {
        match self {
            Preset::Nano => (32, 2, 2, 128, 64, 16),
            Preset::Micro => (64, 2, 2, 256, 64, 256),
            Preset::Tiny => (256, 4, 6, 1024, 64, 256),
            Preset::Small => (512, 8, 8, 2048, 50_257, 512),
            Preset::Medium => (768, 12, 12, 3072, 50_257, 512),
            Preset::Large => (1024, 16, 24, 4096, 50_257, 512),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset {s:?} (nano | micro | tiny | small | medium | large)")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, variant: AttentionVariant) -> Self {
        let (d_model, n_heads, n_layers, d_ff, vocab_size, max_seq_len) = preset.dims();
        ModelConfig { d_model, n_heads, n_layers, d_ff, vocab_size, max_seq_len, positional: Positional::Learned, variant }
    }

    pub fn with_positional(mut self, positional: Positional) -> Self {
        self.positional = positional;
        self
    }

    pub fn with_variant(mut self, variant: AttentionVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Per-head width `d_model / n_heads`.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn kv_heads(&self) -> usize {
        self.variant.kv_heads(self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads)));
        }
        if self.positional == Positional::Rope && !self.d_k().is_multiple_of(2) {
            return Err(Error::Config(format!("rope needs an even head width, got {}", self.d_k())));
        }
        self.variant.validate(self.n_heads, self.d_k())
    }
}
