use super::tape::{Tape, Var};
use super::NumError;

/// Output of [`multi_head_attention`]: the projected result plus one
/// `Lq×Lk` row-stochastic weight matrix per head.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Vec<f64>>,
    pub query_len: usize,
    pub key_len: usize,
}

impl AttentionOutput {
    /// Head-averaged weights for query row `row` (still sums to one).
    pub fn mean_row(&self, row: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.key_len];
        for w in &self.weights {
            let r = &w[row * self.key_len..(row + 1) * self.key_len];
            acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        let h = self.weights.len() as f64;
        acc.iter_mut().for_each(|a| *a /= h);
        acc
    }
}

/// Scaled dot-product attention over already-projected `q` (Lq×d), `k` and
/// `v` (Lk×d), split into `heads`, concatenated and projected by `w_out`
/// (d×d) plus optional bias.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    w_out: Var,
    b_out: Option<Var>,
) -> Result<AttentionOutput, NumError> {
    let (lq, d) = tape.dims(q);
    let (lk, dk) = tape.dims(k);
    if heads == 0 || d % heads != 0 {
        return Err(NumError::Heads { dim: d, heads });
    }
    if dk != d || tape.dims(v) != (lk, d) {
        return Err(NumError::Shape { op: "attention", lhs: vec![lq, d], rhs: vec![lk, dk] });
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut parts = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores)?;
        weights.push(tape.value(attn).to_vec());
        parts.push(tape.matmul(attn, vh)?);
    }
    let cat = if parts.len() == 1 { parts[0] } else { tape.hcat(&parts)? };
    let mut out = tape.matmul(cat, w_out)?;
    if let Some(b) = b_out {
        out = tape.add_row(out, b)?;
    }
    Ok(AttentionOutput { out, weights, query_len: lq, key_len: lk })
}
