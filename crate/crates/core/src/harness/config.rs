use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::SizePreset;
use crate::peft::{AdapterConfig, LoraConfig, PeftConfig, PeftMethod, PtuningConfig};

use super::synthetic::SyntheticSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Gpt,
    Retro,
}

impl ArchKind {
    pub const ALL: [ArchKind; 2] = [ArchKind::Gpt, ArchKind::Retro];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Gpt => "gpt",
            ArchKind::Retro => "retro",
        }
    }
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gpt" => Ok(ArchKind::Gpt),
            "retro" => Ok(ArchKind::Retro),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// What a grid cell does after pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuneMethod {
    /// Zero-shot evaluation of the pretrained model.
    None,
    Ptuning,
    Adapter,
    Lora,
    FullFinetune,
}

impl TuneMethod {
    pub const ALL: [TuneMethod; 5] = [
        TuneMethod::None,
        TuneMethod::Ptuning,
        TuneMethod::Adapter,
        TuneMethod::Lora,
        TuneMethod::FullFinetune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TuneMethod::None => "none",
            TuneMethod::Ptuning => "ptuning",
            TuneMethod::Adapter => "adapter",
            TuneMethod::Lora => "lora",
            TuneMethod::FullFinetune => "full-finetune",
        }
    }

    /// Row label in result tables.
    pub fn label(self) -> &'static str {
        match self {
            TuneMethod::None => "Zero-shot",
            TuneMethod::Ptuning => "P-tuning",
            TuneMethod::Adapter => "Adapter",
            TuneMethod::Lora => "LoRA",
            TuneMethod::FullFinetune => "Fine-tuning",
        }
    }

    pub fn peft(self) -> Option<PeftMethod> {
        match self {
            TuneMethod::Ptuning => Some(PeftMethod::Ptuning),
            TuneMethod::Adapter => Some(PeftMethod::Adapter),
            TuneMethod::Lora => Some(PeftMethod::Lora),
            TuneMethod::None | TuneMethod::FullFinetune => None,
        }
    }
}

impl FromStr for TuneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "zero-shot" => Ok(TuneMethod::None),
            "full" | "full-finetune" | "finetune" => Ok(TuneMethod::FullFinetune),
            other => PeftMethod::from_str(other).map(|m| match m {
                PeftMethod::Ptuning => TuneMethod::Ptuning,
                PeftMethod::Adapter => TuneMethod::Adapter,
                PeftMethod::Lora => TuneMethod::Lora,
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetroSettings {
    pub chunk_size: usize,
    pub k_neighbors: usize,
    pub neighbor_len: usize,
    /// Initial CCA gate for pretraining from scratch.
    pub gate_init: f64,
}

impl Default for RetroSettings {
    fn default() -> Self {
        Self {
            chunk_size: 8,
            k_neighbors: 1,
            neighbor_len: 24,
            gate_init: 1.0,
        }
    }
}

/// PEFT sizes used by the training harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeftSettings {
    pub lora_rank: usize,
    pub adapter_bottleneck: usize,
    pub n_virtual: usize,
    pub ptuning_hidden: usize,
}

impl Default for PeftSettings {
    fn default() -> Self {
        Self {
            lora_rank: 4,
            adapter_bottleneck: 16,
            n_virtual: 16,
            ptuning_hidden: 32,
        }
    }
}

impl PeftSettings {
    pub fn config(&self, method: PeftMethod) -> PeftConfig {
        match method {
            PeftMethod::Ptuning => {
                PeftConfig::Ptuning(PtuningConfig::new(self.n_virtual, self.ptuning_hidden))
            }
            PeftMethod::Adapter => PeftConfig::Adapter(AdapterConfig {
                bottleneck: self.adapter_bottleneck,
            }),
            PeftMethod::Lora => PeftConfig::Lora(LoraConfig::new(self.lora_rank)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainSettings {
    pub steps: usize,
    pub lr: f64,
    /// Include reading pages for pretraining entities in the mix.
    pub qa_pages: bool,
    /// Also pretrain on the documents of train, validation and test
    /// entities. Off by default so their facts are only reachable through
    /// retrieval.
    pub all_docs: bool,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 1500,
            lr: 3e-3,
            qa_pages: true,
            all_docs: false,
        }
    }
}

/// Declarative description of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub arch: ArchKind,
    pub size: SizePreset,
    pub method: TuneMethod,
    /// Tuning learning rate.
    pub lr: f64,
    pub micro_batch: usize,
    pub global_batch: usize,
    /// Tuning step limit; early stopping may end sooner.
    pub max_steps: usize,
    pub seed: u64,
    /// Retrieved passages in the prompt (plain decoder) or as neighbors
    /// (retrieval-enhanced decoder).
    pub retrieval: bool,
    pub dataset: SyntheticSpec,
    pub pretrain: PretrainSettings,
    pub retro: RetroSettings,
    pub peft: PeftSettings,
    pub eval_every: usize,
    pub patience: usize,
    pub max_new: usize,
    pub max_seq_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            arch: ArchKind::Gpt,
            size: SizePreset::Xs,
            method: TuneMethod::None,
            lr: 1e-2,
            micro_batch: 1,
            global_batch: 8,
            max_steps: 800,
            seed: 0,
            retrieval: true,
            dataset: SyntheticSpec::default(),
            pretrain: PretrainSettings::default(),
            retro: RetroSettings::default(),
            peft: PeftSettings::default(),
            eval_every: 50,
            patience: 8,
            max_new: 4,
            max_seq_len: 72,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.micro_batch == 0 || self.global_batch == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.global_batch % self.micro_batch != 0 {
            return bad("global batch must be a multiple of the micro batch");
        }
        if !(self.lr > 0.0 && self.pretrain.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.max_new == 0 {
            return bad("max_new must be at least 1");
        }
        self.dataset.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// The configuration of the pretraining run this cell starts from.
    pub fn base_config(&self) -> ExperimentConfig {
        ExperimentConfig {
            method: TuneMethod::None,
            ..self.clone()
        }
    }
}
