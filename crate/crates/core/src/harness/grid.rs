use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, SizePreset};
use crate::par::Execution;
use crate::peft::count_params;

use super::config::{ArchKind, ExperimentConfig, TuneMethod};
use super::env::TaskEnv;
use super::synthetic::generate_synthetic_kv_task;
use super::train::{pretrain, tune};
use super::ResultsRecord;

/// A grid over sizes, architectures, methods and seeds sharing one base
/// configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub base: ExperimentConfig,
    pub sizes: Vec<SizePreset>,
    pub archs: Vec<ArchKind>,
    pub methods: Vec<TuneMethod>,
    pub seeds: Vec<u64>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            base: ExperimentConfig::default(),
            sizes: vec![SizePreset::Xs],
            archs: ArchKind::ALL.to_vec(),
            methods: vec![
                TuneMethod::None,
                TuneMethod::Ptuning,
                TuneMethod::Adapter,
                TuneMethod::Lora,
            ],
            seeds: vec![0],
        }
    }
}

impl SuiteConfig {
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let mut out = Vec::new();
        for &seed in &self.seeds {
            for &size in &self.sizes {
                for &arch in &self.archs {
                    for &method in &self.methods {
                        out.push(ExperimentConfig {
                            arch,
                            size,
                            method,
                            seed,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Tunes (or just evaluates) `base` as `cfg` describes and scores the
/// result on validation and test questions.
pub fn run_cell(
    cfg: &ExperimentConfig,
    env: &TaskEnv,
    base: &Model,
    pretrain_losses: &[f64],
    exec: Execution,
) -> Result<ResultsRecord> {
    tune_and_score(cfg, env, base, None, pretrain_losses, exec).map(|(record, _)| record)
}

/// [`run_cell`] that also returns the tuned model and checks the base
/// against `expected_base_hash` when given.
pub fn tune_and_score(
    cfg: &ExperimentConfig,
    env: &TaskEnv,
    base: &Model,
    expected_base_hash: Option<&str>,
    pretrain_losses: &[f64],
    exec: Execution,
) -> Result<(ResultsRecord, Model)> {
    let start = Instant::now();
    let run = tune(cfg, env, base, expected_base_hash, exec)?;
    let test = env.evaluate(&run.model, &env.task.test, cfg.max_new, exec)?;
    let mut metrics = BTreeMap::new();
    metrics.insert("val_f1".to_string(), run.best_val);
    metrics.insert("val_f1_initial".to_string(), run.initial_val);
    metrics.insert("test_f1".to_string(), test.mean);
    let record = ResultsRecord {
        config_hash: cfg.hash(),
        arch: cfg.arch,
        size: cfg.size,
        method: cfg.method,
        seed: cfg.seed,
        metrics,
        params: count_params(&run.model),
        wall_clock_secs: start.elapsed().as_secs_f64(),
        loss_curve: run.losses,
        pretrain_loss_curve: pretrain_losses.to_vec(),
        best_step: run.best_step,
        steps: run.steps,
        optimizer: "adam(beta1=0.9, beta2=0.999, eps=1e-8, clip=1.0, no weight decay)".into(),
    };
    Ok((record, run.model))
}

/// A grid cell's configuration and its record, `None` when the cell could
/// not be produced.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub config: ExperimentConfig,
    pub record: Option<ResultsRecord>,
}

/// Runs every cell through `run`. A cell whose runner returns `None` is kept
/// as absent.
pub fn run_comparison_with<F>(suite: &SuiteConfig, mut run: F) -> Result<Vec<GridCell>>
where
    F: FnMut(&ExperimentConfig) -> Result<Option<ResultsRecord>>,
{
    suite
        .cells()
        .into_iter()
        .map(|config| {
            let record = run(&config)?;
            Ok(GridCell { config, record })
        })
        .collect()
}

/// Pretrains one base per (seed, size, architecture) and runs every method
/// from it.
pub fn run_comparison(suite: &SuiteConfig, exec: Execution) -> Result<Vec<GridCell>> {
    let mut envs: BTreeMap<u64, TaskEnv> = BTreeMap::new();
    let mut bases: BTreeMap<(u64, SizePreset, ArchKind), (Model, Vec<f64>)> = BTreeMap::new();
    run_comparison_with(suite, |cfg| {
        if !envs.contains_key(&cfg.seed) {
            let task = generate_synthetic_kv_task(cfg.seed, &cfg.dataset)?;
            envs.insert(cfg.seed, TaskEnv::new(task, cfg.retro.clone(), cfg.retrieval)?);
        }
        let env = &envs[&cfg.seed];
        let key = (cfg.seed, cfg.size, cfg.arch);
        if !bases.contains_key(&key) {
            let run = pretrain(&cfg.base_config(), env, exec)?;
            info!(
                "pretrained {} {} seed {}: final loss {:.4}",
                cfg.arch.name(),
                cfg.size.name(),
                cfg.seed,
                run.losses.last().copied().unwrap_or(f64::NAN)
            );
            bases.insert(key, (run.model, run.losses));
        }
        let (base, losses) = &bases[&key];
        run_cell(cfg, env, base, losses, exec).map(Some)
    })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Mean over seeds of `metric` (×100) per (method, size, arch).
fn aggregate(cells: &[GridCell], metric: &str) -> BTreeMap<(TuneMethod, SizePreset, ArchKind), f64> {
    let mut acc: BTreeMap<(TuneMethod, SizePreset, ArchKind), Vec<f64>> = BTreeMap::new();
    for c in cells {
        if let Some(v) = c.record.as_ref().and_then(|r| r.metric(metric)) {
            acc.entry((c.config.method, c.config.size, c.config.arch))
                .or_default()
                .push(v * 100.0);
        }
    }
    acc.into_iter()
        .filter_map(|(k, v)| mean(&v).map(|m| (k, m)))
        .collect()
}

/// Methods as rows, (size, architecture) as columns, `metric` ×100 averaged
/// over seeds. Absent cells print as `-`.
pub fn render_table(cells: &[GridCell], metric: &str) -> String {
    let agg = aggregate(cells, metric);
    let mut sizes: Vec<SizePreset> = cells.iter().map(|c| c.config.size).collect();
    sizes.sort();
    sizes.dedup();
    let mut methods: Vec<TuneMethod> = cells.iter().map(|c| c.config.method).collect();
    methods.sort();
    methods.dedup();
    let mut out = format!("{metric} (x100, mean over seeds)\n{:<12}", "method");
    for s in &sizes {
        for a in ArchKind::ALL {
            let _ = write!(out, " {:>10}", format!("{}/{}", s.name(), a.name()));
        }
    }
    out.push('\n');
    for m in methods {
        let _ = write!(out, "{:<12}", m.label());
        for &s in &sizes {
            for a in ArchKind::ALL {
                match agg.get(&(m, s, a)) {
                    Some(v) => {
                        let _ = write!(out, " {v:>10.2}");
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "-");
                    }
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Plot-ready columns `size,arch,method,mean_score`: the seed-averaged
/// `metric` (×100) per cell, one line per present cell.
pub fn plot_series(cells: &[GridCell], metric: &str) -> String {
    let mut out = String::from("size,arch,method,mean_score\n");
    for ((m, s, a), v) in aggregate(cells, metric) {
        let _ = writeln!(out, "{},{},{},{v:.4}", s.name(), a.name(), m.name());
    }
    out
}
