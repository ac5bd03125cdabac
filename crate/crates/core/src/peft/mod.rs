//! Parameter-efficient fine-tuning: P-tuning (prompt encoder producing
//! virtual tokens), parallel adapters and LoRA. Each method adds parameters of
//! kind [`ParamKind::Peft`] to a [`Model`] and freezes its base parameters.

pub mod ptuning;

use std::str::FromStr;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, ParamKind, ParameterSet};

pub use ptuning::{virtual_embeddings, PtuningConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn suffix(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl LoraConfig {
    /// `alpha = rank` (unit scaling) on q, k, v and o.
    pub fn new(rank: usize) -> Self {
        Self {
            rank,
            alpha: rank as f64,
            targets: Projection::ALL.to_vec(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum PeftConfig {
    Ptuning(PtuningConfig),
    Adapter(AdapterConfig),
    Lora(LoraConfig),
}

impl PeftConfig {
    pub fn method(&self) -> PeftMethod {
        match self {
            PeftConfig::Ptuning(_) => PeftMethod::Ptuning,
            PeftConfig::Adapter(_) => PeftMethod::Adapter,
            PeftConfig::Lora(_) => PeftMethod::Lora,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftMethod {
    Ptuning,
    Adapter,
    Lora,
}

impl PeftMethod {
    pub const ALL: [PeftMethod; 3] = [PeftMethod::Ptuning, PeftMethod::Adapter, PeftMethod::Lora];

    pub fn name(self) -> &'static str {
        match self {
            PeftMethod::Ptuning => "ptuning",
            PeftMethod::Adapter => "adapter",
            PeftMethod::Lora => "lora",
        }
    }

    /// Toy-scale preset sized relative to `d_model` so the trainable share
    /// stays under 1%: bottleneck `d/32`, rank `d/128` (both at least 1; LoRA
    /// touches four projections per site), four virtual tokens from a prompt
    /// encoder with hidden width `d/4`.
    pub fn preset(self, d_model: usize) -> PeftConfig {
        match self {
            PeftMethod::Ptuning => PeftConfig::Ptuning(PtuningConfig::new(4, (d_model / 4).max(1))),
            PeftMethod::Adapter => PeftConfig::Adapter(AdapterConfig {
                bottleneck: (d_model / 32).max(1),
            }),
            PeftMethod::Lora => PeftConfig::Lora(LoraConfig::new((d_model / 128).max(1))),
        }
    }
}

impl FromStr for PeftMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ptuning" | "p-tuning" => Ok(PeftMethod::Ptuning),
            "adapter" | "adapters" => Ok(PeftMethod::Adapter),
            "lora" => Ok(PeftMethod::Lora),
            other => Err(Error::Config(format!("unknown PEFT method `{other}`"))),
        }
    }
}

/// Left padding that makes `n_virtual + len` a multiple of `m`. The padded
/// layout is `[pad | virtual | context + question]`. `m = 0` is treated as 1.
pub fn compute_left_padding(n_virtual: usize, len: usize, m: usize) -> usize {
    let m = m.max(1);
    let total = n_virtual + len;
    total.div_ceil(m) * m - total
}

/// Attention blocks of a model, by parameter prefix: decoder self-attention,
/// then for retrieval-enhanced models the CCA blocks and the encoder's self-
/// and cross-attention.
pub fn attention_sites(arch: &Architecture) -> Vec<String> {
    let base = arch.base();
    let mut sites: Vec<String> = (0..base.n_layers).map(|l| format!("dec.{l}.attn")).collect();
    if let Architecture::Retro(r) = arch {
        sites.extend(r.cca_layers.iter().map(|l| format!("dec.{l}.cca")));
        for l in 0..r.encoder_layers {
            sites.push(format!("enc.{l}.attn"));
            sites.push(format!("enc.{l}.xattn"));
        }
    }
    sites
}

fn ensure_clean(model: &Model) -> Result<()> {
    match &model.peft {
        Some(p) => Err(Error::Peft(format!(
            "model already carries {}",
            p.method().name()
        ))),
        None => Ok(()),
    }
}

fn insert_peft(params: &mut ParameterSet, path: String, t: Tensor) -> Result<()> {
    params.insert(path, t, ParamKind::Peft)
}

/// Adds low-rank `A·B` updates to the target projections of every attention
/// block and freezes the base. `A` is Gaussian, `B` is zero.
pub fn inject_lora<R: Rng + ?Sized>(model: &mut Model, cfg: &LoraConfig, rng: &mut R) -> Result<()> {
    ensure_clean(model)?;
    if cfg.rank == 0 {
        return Err(Error::Peft("LoRA rank must be at least 1".into()));
    }
    if cfg.targets.is_empty() {
        return Err(Error::Peft("LoRA needs at least one target projection".into()));
    }
    let mut added = ParameterSet::new();
    for site in attention_sites(&model.arch) {
        for t in &cfg.targets {
            let path = format!("{site}.{}", t.suffix());
            let (d_in, d_out) = model.params.tensor(&path)?.dims2();
            if cfg.rank > d_in.min(d_out) {
                return Err(Error::Peft(format!(
                    "LoRA rank {} exceeds min({d_in}, {d_out}) for `{path}`",
                    cfg.rank
                )));
            }
            let std = 1.0 / (d_in as f64).sqrt();
            insert_peft(&mut added, format!("{path}.lora_a"), gaussian(rng, &[d_in, cfg.rank], std))?;
            insert_peft(&mut added, format!("{path}.lora_b"), Tensor::zeros(&[cfg.rank, d_out]))?;
        }
    }
    merge(model, added, PeftConfig::Lora(cfg.clone()))
}

/// Adds a parallel bottleneck adapter beside every attention block and
/// freezes the base. The up projection and its bias start at zero.
pub fn inject_adapters<R: Rng + ?Sized>(
    model: &mut Model,
    cfg: &AdapterConfig,
    rng: &mut R,
) -> Result<()> {
    ensure_clean(model)?;
    let d = model.config().d_model;
    let b = cfg.bottleneck;
    if b == 0 {
        return Err(Error::Peft("adapter bottleneck must be at least 1".into()));
    }
    if b > d {
        warn!("adapter bottleneck {b} exceeds d_model {d}");
    }
    let mut added = ParameterSet::new();
    for site in attention_sites(&model.arch) {
        let p = format!("{site}.adapter");
        let std = 1.0 / (d as f64).sqrt();
        insert_peft(&mut added, format!("{p}.down"), gaussian(rng, &[d, b], std))?;
        insert_peft(&mut added, format!("{p}.down.bias"), Tensor::zeros(&[b]))?;
        insert_peft(&mut added, format!("{p}.up"), Tensor::zeros(&[b, d]))?;
        insert_peft(&mut added, format!("{p}.up.bias"), Tensor::zeros(&[d]))?;
    }
    merge(model, added, PeftConfig::Adapter(cfg.clone()))
}

/// Adds the prompt encoder and freezes the base. `max_input` is the longest
/// token input (padding included) the model will be asked to process.
pub fn inject_ptuning<R: Rng + ?Sized>(
    model: &mut Model,
    cfg: &PtuningConfig,
    max_input: usize,
    rng: &mut R,
) -> Result<()> {
    ensure_clean(model)?;
    cfg.validate()?;
    let max = model.config().max_seq_len;
    if cfg.n_virtual + max_input > max {
        return Err(Error::SequenceTooLong {
            len: cfg.n_virtual + max_input,
            max,
        });
    }
    let added = ptuning::init_params(cfg, model.config().d_model, rng)?;
    merge(model, added, PeftConfig::Ptuning(cfg.clone()))
}

/// Dispatches to the matching `inject_*` function.
pub fn inject<R: Rng + ?Sized>(
    model: &mut Model,
    cfg: &PeftConfig,
    max_input: usize,
    rng: &mut R,
) -> Result<()> {
    match cfg {
        PeftConfig::Ptuning(c) => inject_ptuning(model, c, max_input, rng),
        PeftConfig::Adapter(c) => inject_adapters(model, c, rng),
        PeftConfig::Lora(c) => inject_lora(model, c, rng),
    }
}

fn merge(model: &mut Model, added: ParameterSet, cfg: PeftConfig) -> Result<()> {
    for (path, p) in added.iter() {
        model.params.insert(path.clone(), p.tensor.clone(), ParamKind::Peft)?;
    }
    freeze_base(model);
    model.peft = Some(cfg);
    Ok(())
}

pub fn freeze_base(model: &mut Model) {
    model.params.set_trainable(ParamKind::Base, false);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// Elements in base parameters.
    pub base_total: usize,
    /// Elements in parameters that currently receive gradients.
    pub trainable: usize,
}

impl ParamCounts {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.base_total as f64
    }
}

pub fn count_params(model: &Model) -> ParamCounts {
    ParamCounts {
        base_total: model.params.numel(|p| p.kind == ParamKind::Base),
        trainable: model.params.numel(|p| p.trainable),
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    crate::model::normal_tensor(rng, shape, std)
}
