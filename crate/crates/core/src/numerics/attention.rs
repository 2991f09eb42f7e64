use super::{Real, Tape, Var};
use crate::{Error, Result};

pub struct AttentionOutput {
    /// `[T, d]` projected output.
    pub output: Var,
    /// Per-head `[T, T]` attention weights, each row summing to one.
    pub weights: Vec<Var>,
}

/// Scaled dot-product self-attention over `x[T, d]` with `heads` heads.
///
/// Projections are right-multiplied (`x . wq`), each `[d, d]`. Head `h` uses
/// columns `h*d/heads .. (h+1)*d/heads` of the projected queries, keys and
/// values; the head outputs are concatenated before `wo`.
pub fn multi_head_self_attention<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
) -> Result<AttentionOutput> {
    let d = *tape.shape(x).last().unwrap_or(&0);
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    let dh = d / heads;
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let w = tape.softmax(scores);
        outs.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let output = tape.matmul(cat, wo)?;
    Ok(AttentionOutput { output, weights })
}
