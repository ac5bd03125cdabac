//! Transformer building blocks shared by the decoder, the retrieval encoder and
//! chunked cross-attention. Parameter-efficient modules are picked up by path:
//! `{proj}.lora_a`/`{proj}.lora_b` next to a projection and
//! `{attn}.adapter.*` next to an attention block.

use crate::autodiff::{Tensor, Var};
use crate::error::Result;

use super::params::Graph;

/// `x · W (+ bias) (+ scale · x · A · B)`.
pub fn linear(g: &mut Graph, x: Var, path: &str) -> Result<Var> {
    let w = g.p(path)?;
    let mut y = g.tape.matmul(x, w)?;
    let bias = format!("{path}.bias");
    if g.has(&bias) {
        let b = g.p(&bias)?;
        y = g.tape.add_bias(y, b)?;
    }
    let lora_a = format!("{path}.lora_a");
    if g.has(&lora_a) {
        let a = g.p(&lora_a)?;
        let b = g.p(&format!("{path}.lora_b"))?;
        let xa = g.tape.matmul(x, a)?;
        let xab = g.tape.matmul(xa, b)?;
        let scaled = g.tape.scale(xab, g.lora_scale)?;
        y = g.tape.add(y, scaled)?;
    }
    Ok(y)
}

pub fn layer_norm(g: &mut Graph, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let gain = g.p(&format!("{prefix}.g"))?;
    let bias = g.p(&format!("{prefix}.b"))?;
    Ok(g.tape.layer_norm(x, gain, bias, eps)?)
}

pub fn mlp(g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.tape.gelu(h)?;
    linear(g, h, &format!("{prefix}.fc2"))
}

/// Multi-head attention from `q_in` rows to `kv_in` rows.
///
/// `mask` is an additive `[rows(q_in) × rows(kv_in)]` constant (0 or -inf);
/// every row must keep at least one finite entry. A parallel adapter at
/// `{prefix}.adapter` reads `q_in` and is summed with the attention output.
pub fn attention(
    g: &mut Graph,
    q_in: Var,
    kv_in: Var,
    prefix: &str,
    n_heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let q = linear(g, q_in, &format!("{prefix}.q"))?;
    let k = linear(g, kv_in, &format!("{prefix}.k"))?;
    let v = linear(g, kv_in, &format!("{prefix}.v"))?;
    let d = g.tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * dh, dh)?,
                g.tape.slice_cols(k, h * dh, dh)?,
                g.tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let s = g.tape.matmul_nt(qh, kh)?;
        let mut s = g.tape.scale(s, scale)?;
        if let Some(m) = mask {
            s = g.tape.add(s, m)?;
        }
        let p = g.tape.softmax(s, 1)?;
        heads.push(g.tape.matmul(p, vh)?);
    }
    let cat = if n_heads == 1 {
        heads[0]
    } else {
        g.tape.concat_cols(&heads)?
    };
    let mut out = linear(g, cat, &format!("{prefix}.o"))?;
    let down = format!("{prefix}.adapter.down");
    if g.has(&down) {
        let a = linear(g, q_in, &down)?;
        let a = g.tape.gelu(a)?;
        let a = linear(g, a, &format!("{prefix}.adapter.up"))?;
        out = g.tape.add(out, a)?;
    }
    Ok(out)
}

/// Additive causal mask: row `t` sees columns `0..=t`.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            data[i * t + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![t, t], data).expect("t > 0")
}

/// Additive mask from a visibility predicate.
pub fn mask_from(rows: usize, cols: usize, visible: impl Fn(usize, usize) -> bool) -> Tensor {
    let mut data = vec![f64::NEG_INFINITY; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if visible(i, j) {
                data[i * cols + j] = 0.0;
            }
        }
    }
    Tensor::new(vec![rows, cols], data).expect("rows, cols > 0")
}
