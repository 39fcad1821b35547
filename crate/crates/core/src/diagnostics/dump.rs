use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One `[L, L]` slice of `[batch, heads, L, L]` weights.
pub fn attention_slice(weights: &Tensor, batch: usize, head: usize) -> Result<Tensor> {
    let s = weights.shape();
    if s.len() != 4 || batch >= s[0] || head >= s[1] {
        return Err(Error::InvalidArgument(format!("batch {batch}, head {head} out of range for weights {s:?}")));
    }
    let n = s[2] * s[3];
    let start = (batch * s[1] + head) * n;
    Tensor::new(&[s[2], s[3]], weights.data()[start..start + n].to_vec())
}

pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..m.shape()[0] {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Binary 8-bit grayscale PGM; values in `[0, 1]` map to `0..=255`, values
/// outside are clamped.
pub fn matrix_pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Width and height from a PGM header.
pub fn pgm_dims(bytes: &[u8]) -> Result<(usize, usize)> {
    let mut fields = bytes.split(u8::is_ascii_whitespace).filter(|f| !f.is_empty()).take(3);
    let mut number = || fields.next().and_then(|f| std::str::from_utf8(f).ok()?.parse().ok());
    let magic = bytes.starts_with(b"P5");
    let _ = number();
    match (magic, number(), number()) {
        (true, Some(w), Some(h)) => Ok((w, h)),
        _ => Err(Error::Format("not a binary PGM".into())),
    }
}

/// Write `attn_l{layer}_h{head}.csv` and `.pgm` for each selected layer and
/// head of sequence `batch` in `weights` (one tensor per layer).
pub fn dump_attention(
    weights: &[Tensor],
    layers: &[usize],
    heads: &[usize],
    batch: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for &l in layers {
        let w = weights
            .get(l)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {l} out of range ({} layers)", weights.len())))?;
        for &h in heads {
            let m = attention_slice(w, batch, h)?;
            let base = dir.join(format!("attn_l{l}_h{h}"));
            let csv = base.with_extension("csv");
            std::fs::write(&csv, matrix_csv(&m)).map_err(|e| Error::io(&csv, e))?;
            let pgm = base.with_extension("pgm");
            std::fs::write(&pgm, matrix_pgm(&m)).map_err(|e| Error::io(&pgm, e))?;
            written.push(csv);
            written.push(pgm);
        }
    }
    Ok(written)
}
