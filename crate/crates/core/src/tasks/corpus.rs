use std::path::Path;

use crate::backbone::TokenBatch;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Byte-level vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// A file read as a byte sequence; each byte is one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    bytes: Vec<u8>,
}

impl Corpus {
    pub fn new(bytes: Vec<u8>) -> Self {
        Corpus { bytes }
    }

    pub fn load(path: &Path) -> Result<Self> {
        std::fs::read(path).map(Corpus::new).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// `batch_size` uniformly placed windows of `seq_len + 1` bytes; inputs are
/// the first `seq_len`, targets the last `seq_len`. Every position counts.
pub fn corpus_windows(corpus: &Corpus, seq_len: usize, batch_size: usize, rng: &mut Rng) -> Result<TokenBatch> {
    if seq_len == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    if corpus.len() < seq_len + 1 {
        return Err(Error::InvalidArgument(format!(
            "corpus of {} bytes is shorter than a {}-byte window",
            corpus.len(),
            seq_len + 1
        )));
    }
    let starts = corpus.len() - seq_len;
    let mut tokens = Vec::with_capacity(batch_size * seq_len);
    let mut targets = Vec::with_capacity(batch_size * seq_len);
    for _ in 0..batch_size {
        let s = rng.index(starts);
        let w = &corpus.bytes[s..s + seq_len + 1];
        tokens.extend(w[..seq_len].iter().map(|&b| b as usize));
        targets.extend(w[1..].iter().map(|&b| b as usize));
    }
    TokenBatch::new(batch_size, seq_len, tokens, targets, vec![true; batch_size * seq_len])
}
