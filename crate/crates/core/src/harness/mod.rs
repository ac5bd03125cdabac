//! Synthetic retrieval QA, training loops and the GPT vs RETRO comparison
//! grid.

mod config;
mod env;
mod grid;
pub mod reference;
mod synthetic;
mod train;


pub use config::{
    ArchKind, ExperimentConfig, PeftSettings, PretrainSettings, RetroSettings, TuneMethod,
};
pub use env::{Sample, TaskEnv};
pub use grid::{
    plot_series, render_table, run_cell, run_comparison, run_comparison_with, tune_and_score,
    GridCell, SuiteConfig,
};
pub use synthetic::{
    fact_sentence, generate_synthetic_kv_task, question_for, restatement, CorpusDoc, Fact,
    SyntheticSpec, SyntheticTask, ATTRIBUTES,
};
pub use train::{
    batch_gradient, batch_indices, build_model, model_config, prepare, pretrain, pretrain_resume,
    train_step, tune, PretrainRun, TuneRun,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::SizePreset;
use crate::peft::ParamCounts;

/// Outcome of one grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub config_hash: String,
    pub arch: ArchKind,
    pub size: SizePreset,
    pub method: TuneMethod,
    pub seed: u64,
    /// Metric means in `[0, 1]`, e.g. `val_f1` and `test_f1`.
    pub metrics: BTreeMap<String, f64>,
    pub params: ParamCounts,
    pub wall_clock_secs: f64,
    pub loss_curve: Vec<f64>,
    pub pretrain_loss_curve: Vec<f64>,
    pub best_step: usize,
    pub steps: usize,
    pub optimizer: String,
}

impl ResultsRecord {
    /// Bitwise equality of everything except the wall-clock time.
    pub fn same_outcome(&self, other: &ResultsRecord) -> bool {
        let strip = |r: &ResultsRecord| {
            let mut r = r.clone();
            r.wall_clock_secs = 0.0;
            serde_json::to_string(&r).expect("record serializes")
        };
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        strip(self) == strip(other)
            && bits(&self.loss_curve) == bits(&other.loss_curve)
            && bits(&self.pretrain_loss_curve) == bits(&other.pretrain_loss_curve)
            && self
                .metrics
                .iter()
                .zip(&other.metrics)
                .all(|(a, b)| a.0 == b.0 && a.1.to_bits() == b.1.to_bits())
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}
