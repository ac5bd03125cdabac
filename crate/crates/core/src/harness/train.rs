//! Pretraining, PEFT tuning and full fine-tuning loops.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::checkpoint::base_hash;
use crate::model::{Grads, Model, ModelConfig, ParamKind, ParameterSet};
use crate::optim::{Adam, AdamConfig};
use crate::par::{self, Execution};
use crate::peft;
use crate::retro::RetroConfig;

use super::config::{ArchKind, ExperimentConfig, TuneMethod};
use super::env::{Sample, TaskEnv};

const PRETRAIN_STREAM: u64 = 0x7072_6574;
const TUNE_STREAM: u64 = 0x7475_6e65;

pub fn model_config(cfg: &ExperimentConfig, vocab_size: usize) -> ModelConfig {
    cfg.size.config(vocab_size, cfg.max_seq_len)
}

/// Freshly initialized model for `cfg`; both architectures share the
/// decoder initialization for a given seed.
pub fn build_model(cfg: &ExperimentConfig, vocab_size: usize) -> Result<Model> {
    let base = model_config(cfg, vocab_size);
    match cfg.arch {
        ArchKind::Gpt => Model::gpt(base, cfg.seed),
        ArchKind::Retro => {
            let r = &cfg.retro;
            Model::retro(
                RetroConfig::new(base, r.chunk_size, r.k_neighbors, r.neighbor_len)
                    .with_gate_init(r.gate_init),
                cfg.seed,
            )
        }
    }
}

/// Sample indices for one optimizer step; a pure function of
/// `(seed, stream, step)` so resumed runs see the same batches.
pub fn batch_indices(seed: u64, stream: u64, step: usize, pool: usize, batch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    rng.set_stream(step as u64);
    if batch <= pool {
        sample(&mut rng, pool, batch).into_vec()
    } else {
        (0..batch).map(|i| i % pool).collect()
    }
}

fn add_into(acc: &mut Grads, g: Grads) {
    for (k, v) in g {
        match acc.get_mut(&k) {
            Some(a) => a.iter_mut().zip(&v).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

/// Mean loss and mean gradient over `batch`. Micro-batches are the unit of
/// parallel work; their sums are reduced in order, so the result does not
/// depend on the execution mode.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Sample],
    micro_batch: usize,
    exec: Execution,
) -> Result<(f64, Grads)> {
    let groups: Vec<&[&Sample]> = batch.chunks(micro_batch.max(1)).collect();
    let parts = par::try_map(exec, &groups, |group| -> Result<(f64, Grads)> {
        let mut loss = 0.0;
        let mut grads = Grads::new();
        for s in group.iter() {
            let (mut g, l) = model.loss(&s.input(), &s.targets)?;
            loss += g.tape.value(l).item();
            g.tape.backward(l)?;
            add_into(&mut grads, g.grads());
        }
        Ok((loss, grads))
    })?;
    let mut loss = 0.0;
    let mut grads = Grads::new();
    for (l, g) in parts {
        loss += l;
        add_into(&mut grads, g);
    }
    let n = batch.len() as f64;
    grads.values_mut().flatten().for_each(|x| *x /= n);
    Ok((loss / n, grads))
}

/// One optimizer step; aborts on a non-finite loss.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&Sample],
    micro_batch: usize,
    exec: Execution,
) -> Result<f64> {
    let (loss, grads) = batch_gradient(model, batch, micro_batch, exec)?;
    if !loss.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step: adam.step as usize + 1,
            loss,
        });
    }
    adam.step(&mut model.params, &grads)?;
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub model: Model,
    pub adam: Adam,
    pub losses: Vec<f64>,
}

/// Next-token pretraining from scratch on the corpus mix. The
/// retrieval-enhanced model sees neighbors for every chunk; the plain
/// decoder sees the same token sequences without them.
pub fn pretrain(cfg: &ExperimentConfig, env: &TaskEnv, exec: Execution) -> Result<PretrainRun> {
    cfg.validate()?;
    let model = build_model(cfg, env.tokenizer.vocab_size())?;
    let adam = Adam::new(AdamConfig::new(cfg.pretrain.lr));
    let mut run = PretrainRun {
        model,
        adam,
        losses: Vec::new(),
    };
    pretrain_resume(cfg, env, &mut run, cfg.pretrain.steps, exec)?;
    Ok(run)
}

/// Continues `run` up to `until` optimizer steps in total.
pub fn pretrain_resume(
    cfg: &ExperimentConfig,
    env: &TaskEnv,
    run: &mut PretrainRun,
    until: usize,
    exec: Execution,
) -> Result<()> {
    let pool = env.pretraining_samples(&run.model, cfg.pretrain.qa_pages, cfg.pretrain.all_docs)?;
    if pool.is_empty() {
        return Err(Error::Dataset("empty pretraining corpus".into()));
    }
    for step in run.adam.step as usize..until {
        let idx = batch_indices(cfg.seed, PRETRAIN_STREAM, step, pool.len(), cfg.global_batch);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &pool[i]).collect();
        let loss = train_step(&mut run.model, &mut run.adam, &batch, cfg.micro_batch, exec)?;
        run.losses.push(loss);
        if (step + 1) % 100 == 0 {
            debug!("pretrain {} step {} loss {loss:.4}", cfg.arch.name(), step + 1);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TuneRun {
    /// Model restored to its best validation checkpoint.
    pub model: Model,
    pub losses: Vec<f64>,
    /// Validation F1 before any tuning step.
    pub initial_val: f64,
    pub best_val: f64,
    pub best_step: usize,
    pub steps: usize,
}

/// Prepares `base` for `method`: PEFT injection (base frozen), everything
/// trainable for full fine-tuning, unchanged for zero-shot.
pub fn prepare(cfg: &ExperimentConfig, env: &TaskEnv, base: &Model) -> Result<Model> {
    let mut model = base.clone();
    match cfg.method {
        TuneMethod::None => {}
        TuneMethod::FullFinetune => model.params.set_trainable(ParamKind::Base, true),
        m => {
            let method = m.peft().expect("PEFT method");
            let plain = base.clone();
            let longest = env
                .task
                .train
                .iter()
                .chain(&env.task.val)
                .chain(&env.task.test)
                .map(|ex| env.tuning_sample(&plain, ex).map(|s| s.tokens.len()))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .max()
                .unwrap_or(0);
            let max_input = longest + env.chunk_size() - 1;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TUNE_STREAM);
            peft::inject(&mut model, &cfg.peft.config(method), max_input, &mut rng)?;
        }
    }
    Ok(model)
}

fn trainable_snapshot(params: &ParameterSet) -> BTreeMap<String, Vec<f64>> {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, p)| (k.clone(), p.tensor.data().to_vec()))
        .collect()
}

/// Tunes `base` on the training questions with early stopping on
/// validation F1 (checked every `eval_every` steps; stops after `patience`
/// checks without improvement) and returns the best model seen.
/// `expected_base_hash`, when given, must match the base parameters.
pub fn tune(
    cfg: &ExperimentConfig,
    env: &TaskEnv,
    base: &Model,
    expected_base_hash: Option<&str>,
    exec: Execution,
) -> Result<TuneRun> {
    cfg.validate()?;
    if let Some(expected) = expected_base_hash {
        let found = base_hash(&base.params);
        if found != expected {
            return Err(Error::BaseHashMismatch {
                expected: expected.to_string(),
                found,
            });
        }
    }
    let mut model = prepare(cfg, env, base)?;
    let val = &env.task.val;
    let initial_val = env.evaluate(&model, val, cfg.max_new, exec)?.mean;
    let mut run = TuneRun {
        model: model.clone(),
        losses: Vec::new(),
        initial_val,
        best_val: initial_val,
        best_step: 0,
        steps: 0,
    };
    if cfg.method == TuneMethod::None {
        return Ok(run);
    }
    let pool = env
        .task
        .train
        .iter()
        .map(|ex| env.tuning_sample(&model, ex))
        .collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(AdamConfig::new(cfg.lr));
    let mut best = trainable_snapshot(&model.params);
    let mut stale = 0;
    for step in 0..cfg.max_steps {
        let idx = batch_indices(cfg.seed, TUNE_STREAM, step, pool.len(), cfg.global_batch);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &pool[i]).collect();
        run.losses.push(train_step(&mut model, &mut adam, &batch, cfg.micro_batch, exec)?);
        run.steps = step + 1;
        if run.steps % cfg.eval_every != 0 {
            continue;
        }
        let score = env.evaluate(&model, val, cfg.max_new, exec)?.mean;
        debug!("tune {} {} step {} val {score:.4}", cfg.arch.name(), cfg.method.name(), run.steps);
        if score > run.best_val {
            run.best_val = score;
            run.best_step = run.steps;
            best = trainable_snapshot(&model.params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    for (k, data) in best {
        model.params.get_mut(&k)?.tensor.data_mut().copy_from_slice(&data);
    }
    info!(
        "tuned {} {}: val {:.4} -> {:.4} (best at step {} of {})",
        cfg.arch.name(),
        cfg.method.name(),
        run.initial_val,
        run.best_val,
        run.best_step,
        run.steps
    );
    run.model = model;
    Ok(run)
}
