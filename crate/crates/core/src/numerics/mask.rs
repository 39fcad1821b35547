use crate::error::{Error, Result};

/// Boolean `[rows, cols]` attention mask; `true` marks a permitted position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    /// Lower-triangular mask: row `i` may see columns `0..=i`.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        Mask { rows: len, cols: len, allowed }
    }

    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape(format!("mask [{rows}, {cols}] with {} entries", allowed.len())));
        }
        Ok(Mask { rows, cols, allowed })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }

    pub fn allows(&self, r: usize, c: usize) -> bool {
        self.allowed[r * self.cols + c]
    }

    pub fn is_causal(&self) -> bool {
        *self == Mask::causal(self.rows)
    }
}
