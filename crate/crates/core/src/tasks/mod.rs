//! Training tasks: synthetic multi-query associative recall and byte-level
//! windows over a text file.

mod corpus;
mod mqar;

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use corpus::{corpus_windows, Corpus, BYTE_VOCAB};
pub use mqar::{
    argmax, count_correct, mqar_accuracy, mqar_generate, Difficulty, MqarSpec, DEFAULT_VOCAB, EVAL_SEQUENCES, PAD,
};

use crate::error::{Error, Result};

/// Default window length for corpus tasks.
pub const DEFAULT_CORPUS_SEQ: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Mqar(MqarSpec),
    Corpus {
        path: PathBuf,
        #[serde(default = "default_corpus_seq")]
        seq_len: usize,
    },
}

fn default_corpus_seq() -> usize {
    DEFAULT_CORPUS_SEQ
}

impl TaskSpec {
    /// Vocabulary the model must cover.
    pub fn vocab_size(&self) -> usize {
        match self {
            TaskSpec::Mqar(s) => s.vocab_size,
            TaskSpec::Corpus { .. } => BYTE_VOCAB,
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            TaskSpec::Mqar(s) => s.seq_len,
            TaskSpec::Corpus { seq_len, .. } => *seq_len,
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        match self {
            TaskSpec::Mqar(s) => TaskSpec::Mqar(MqarSpec { seed, ..s }),
            other => other,
        }
    }

    pub fn label(&self) -> String {
        match self {
            TaskSpec::Mqar(s) => format!("mqar(pairs={}, seq={}, queries={})", s.num_pairs, s.seq_len, s.num_queries),
            TaskSpec::Corpus { path, seq_len } => format!("corpus({}, seq={seq_len})", path.display()),
        }
    }
}

impl FromStr for TaskSpec {
    type Err = Error;

    /// `mqar:easy|medium|hard` or `corpus:PATH`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("mqar", d)) => Ok(TaskSpec::Mqar(MqarSpec::preset(d.parse()?, 0))),
            Some(("corpus", p)) if !p.is_empty() => {
                Ok(TaskSpec::Corpus { path: PathBuf::from(p), seq_len: DEFAULT_CORPUS_SEQ })
            }
            _ => Err(Error::Config(format!("unknown task {s:?} (mqar:easy | mqar:medium | mqar:hard | corpus:PATH)"))),
        }
    }
}
