//! Pre-norm decoder stack with learned absolute positions.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::layers::{attention, causal_mask, layer_norm, linear, mlp};
use super::params::{normal_tensor, Graph, ParamKind, ParameterSet};

pub(crate) fn insert_ln(params: &mut ParameterSet, prefix: &str, d: usize) -> Result<()> {
    params.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0), ParamKind::Base)?;
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[d]), ParamKind::Base)
}

pub(crate) fn insert_attention<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    rng: &mut R,
    prefix: &str,
    d: usize,
    out_std: f64,
) -> Result<()> {
    let std = 1.0 / (d as f64).sqrt();
    for p in ["q", "k", "v"] {
        params.insert(
            format!("{prefix}.{p}"),
            normal_tensor(rng, &[d, d], std),
            ParamKind::Base,
        )?;
    }
    params.insert(
        format!("{prefix}.o"),
        normal_tensor(rng, &[d, d], out_std),
        ParamKind::Base,
    )
}

pub(crate) fn insert_mlp<R: Rng + ?Sized>(
    params: &mut ParameterSet,
    rng: &mut R,
    prefix: &str,
    d: usize,
    f: usize,
    out_std: f64,
) -> Result<()> {
    params.insert(
        format!("{prefix}.fc1"),
        normal_tensor(rng, &[d, f], 1.0 / (d as f64).sqrt()),
        ParamKind::Base,
    )?;
    params.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[f]), ParamKind::Base)?;
    params.insert(
        format!("{prefix}.fc2"),
        normal_tensor(rng, &[f, d], out_std),
        ParamKind::Base,
    )?;
    params.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[d]), ParamKind::Base)
}

/// Residual-branch output projections are shrunk by `1/sqrt(2·n_blocks)`.
pub(crate) fn residual_std(fan_in: usize, n_blocks: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt() / ((2 * n_blocks.max(1)) as f64).sqrt()
}

/// Embeddings, decoder layers, final norm and output head.
pub fn init_decoder_params<R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
    params: &mut ParameterSet,
) -> Result<()> {
    cfg.validate()?;
    let (d, f) = (cfg.d_model, cfg.ffn_dim());
    params.insert("tok_emb", normal_tensor(rng, &[cfg.vocab_size, d], 0.1), ParamKind::Base)?;
    params.insert("pos_emb", normal_tensor(rng, &[cfg.max_seq_len, d], 0.1), ParamKind::Base)?;
    for l in 0..cfg.n_layers {
        let p = format!("dec.{l}");
        insert_ln(params, &format!("{p}.ln1"), d)?;
        insert_attention(params, rng, &format!("{p}.attn"), d, residual_std(d, cfg.n_layers))?;
        insert_ln(params, &format!("{p}.ln2"), d)?;
        insert_mlp(params, rng, &format!("{p}.mlp"), d, f, residual_std(f, cfg.n_layers))?;
    }
    insert_ln(params, "ln_f", d)?;
    params.insert(
        "lm_head",
        normal_tensor(rng, &[d, cfg.vocab_size], 1.0 / (d as f64).sqrt()),
        ParamKind::Base,
    )
}

/// Token plus position embeddings for `tokens`, with `virtual_emb` rows (if any)
/// spliced in before `tokens[virtual_at]`.
pub(crate) fn embed_decoder(
    g: &mut Graph,
    cfg: &ModelConfig,
    tokens: &[usize],
    virtual_at: usize,
    virtual_emb: Option<Var>,
) -> Result<Var> {
    let n_virtual = virtual_emb.map_or(0, |v| g.tape.shape(v)[0]);
    let total = tokens.len() + n_virtual;
    if total == 0 {
        return Err(Error::EmptyPrompt);
    }
    if total > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: total,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let table = g.p("tok_emb")?;
    let x = match virtual_emb {
        None => g.tape.embedding(table, tokens)?,
        Some(v) => {
            let split = virtual_at.min(tokens.len());
            let mut parts = Vec::with_capacity(3);
            if split > 0 {
                parts.push(g.tape.embedding(table, &tokens[..split])?);
            }
            parts.push(v);
            if split < tokens.len() {
                parts.push(g.tape.embedding(table, &tokens[split..])?);
            }
            g.tape.concat_rows(&parts)?
        }
    };
    let pos = g.p("pos_emb")?;
    let pos = g.tape.slice_rows(pos, 0, total)?;
    Ok(g.tape.add(x, pos)?)
}

/// Hook invoked after each layer's self-attention residual, before the MLP.
pub(crate) type LayerHook<'a> = dyn FnMut(&mut Graph, usize, Var) -> Result<Var> + 'a;

pub(crate) fn decoder_stack(
    g: &mut Graph,
    cfg: &ModelConfig,
    mut x: Var,
    hook: &mut LayerHook<'_>,
) -> Result<Var> {
    let t = g.tape.shape(x)[0];
    let mask = g.tape.constant(causal_mask(t));
    for l in 0..cfg.n_layers {
        let p = format!("dec.{l}");
        let h = layer_norm(g, x, &format!("{p}.ln1"), cfg.ln_eps)?;
        let a = attention(g, h, h, &format!("{p}.attn"), cfg.n_heads, Some(mask))?;
        x = g.tape.add(x, a)?;
        x = hook(g, l, x)?;
        let h = layer_norm(g, x, &format!("{p}.ln2"), cfg.ln_eps)?;
        let m = mlp(g, h, &format!("{p}.mlp"))?;
        x = g.tape.add(x, m)?;
    }
    Ok(x)
}

pub(crate) fn lm_head(g: &mut Graph, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let h = layer_norm(g, x, "ln_f", cfg.ln_eps)?;
    linear(g, h, "lm_head")
}

/// Plain decoder forward on a parameter set; returns `[T × vocab]` logits.
pub fn gpt_forward(cfg: &ModelConfig, params: &ParameterSet, token_ids: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let x = embed_decoder(&mut g, cfg, token_ids, 0, None)?;
    let x = decoder_stack(&mut g, cfg, x, &mut |_, _, x| Ok(x))?;
    let logits = lm_head(&mut g, cfg, x)?;
    Ok(g.tape.value(logits).clone())
}
