use super::{Graph, Scalar, Var};
use crate::error::{shape_err, Result};

/// Projection weights (`[D, D]`) and biases (`[D]`) of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// Same shape as the input.
    pub output: Var,
    /// Softmax weights, `[B * heads, T, T]`.
    pub weights: Var,
}

/// Scaled dot-product self-attention with `n_heads` heads over `x` of shape
/// `[T, D]` or `[B, T, D]`.
pub fn multi_head_self_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &AttentionParams,
    n_heads: usize,
) -> Result<Attention> {
    let shape = g.shape(x).to_vec();
    let (b, t, d) = match shape[..] {
        [t, d] => (1, t, d),
        [b, t, d] => (b, t, d),
        _ => return Err(shape_err!("attention input must be [T, D] or [B, T, D], got {shape:?}")),
    };
    if n_heads == 0 || d % n_heads != 0 {
        return Err(shape_err!("model width {d} not divisible by {n_heads} heads"));
    }
    let dh = d / n_heads;
    let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let v = g.reshape(v, &[b, t, n_heads, dh])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;
        g.reshape(v, &[b * n_heads, t, dh])
    };
    let q = g.linear(x, p.wq, Some(p.bq))?;
    let k = g.linear(x, p.wk, Some(p.bk))?;
    let v = g.linear(x, p.wv, Some(p.bv))?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let scores = g.matmul(q, k, true)?;
    let scores = g.scale(scores, T::c(1.0 / (dh as f64).sqrt()));
    let weights = g.softmax(scores, 2)?;
    let ctx = g.matmul(weights, v, false)?;
    let ctx = g.reshape(ctx, &[b, n_heads, t, dh])?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &shape)?;
    let output = g.linear(ctx, p.wo, Some(p.bo))?;
    Ok(Attention { output, weights })
}
