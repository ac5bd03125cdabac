use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use retrolab::harness::reference::render_published;
use retrolab::harness::{
    generate_synthetic_kv_task, plot_series, pretrain, render_table, run_comparison,
    tune_and_score, CorpusDoc, ExperimentConfig, GridCell, ResultsRecord, SuiteConfig, TaskEnv,
    TuneMethod,
};
use retrolab::model::checkpoint::{self, base_hash, Extras};
use retrolab::model::Model;
use retrolab::par::Execution;
use retrolab::retrieval::{chunk_document, HashedBow, RetrievalIndex};

use crate::{CellArgs, Cli, Command, IndexCommand};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const TABLE_FILE: &str = "table.txt";
pub const SERIES_FILE: &str = "series.csv";

pub fn run(cli: &Cli) -> Result<()> {
    let suite = load_suite(cli.config.as_deref(), cli.seed)?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match &cli.command {
        Command::Pretrain { cell } => cmd_pretrain(cli, &cell_config(&suite, cell), exec),
        Command::Tune { cell, method, base } => {
            let cfg = ExperimentConfig {
                method: *method,
                ..cell_config(&suite, cell)
            };
            cmd_tune(cli, &cfg, base.as_deref(), exec)
        }
        Command::Eval {
            cell,
            base,
            tuned,
            show,
        } => cmd_eval(cli, &cell_config(&suite, cell), base.as_deref(), tuned.as_deref(), *show, exec),
        Command::Grid => cmd_grid(cli, &suite, exec),
        Command::Report { results, metric } => {
            let path = results.clone().unwrap_or_else(|| cli.out.join(RESULTS_FILE));
            cmd_report(&suite, &path, metric)
        }
        Command::Index(IndexCommand::Build { corpus, index, dim }) => {
            cmd_index_build(&suite, corpus.as_deref(), index, *dim)
        }
        Command::Index(IndexCommand::Query { index, k, text }) => cmd_index_query(index, *k, text),
    }
}

/// Suite from a TOML file (missing fields take defaults); `seed` replaces
/// the seed list and the base seed.
pub fn load_suite(path: Option<&Path>, seed: Option<u64>) -> Result<SuiteConfig> {
    let mut suite = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SuiteConfig::default(),
    };
    if let Some(s) = seed {
        suite.seeds = vec![s];
        suite.base.seed = s;
    } else if let Some(&s) = suite.seeds.first() {
        suite.base.seed = s;
    }
    suite.base.validate()?;
    Ok(suite)
}

fn cell_config(suite: &SuiteConfig, cell: &CellArgs) -> ExperimentConfig {
    ExperimentConfig {
        arch: cell.arch.or(suite.archs.first().copied()).unwrap_or(suite.base.arch),
        size: cell.size.or(suite.sizes.first().copied()).unwrap_or(suite.base.size),
        ..suite.base.clone()
    }
}

fn env_for(cfg: &ExperimentConfig) -> Result<TaskEnv> {
    let task = generate_synthetic_kv_task(cfg.seed, &cfg.dataset)?;
    Ok(TaskEnv::new(task, cfg.retro.clone(), cfg.retrieval)?)
}

pub fn base_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(format!("base-{}-{}-s{}", cfg.arch.name(), cfg.size.name(), cfg.seed))
}

pub fn tuned_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(format!(
        "tuned-{}-{}-{}-s{}",
        cfg.arch.name(),
        cfg.size.name(),
        cfg.method.name(),
        cfg.seed
    ))
}

fn cmd_pretrain(cli: &Cli, cfg: &ExperimentConfig, exec: Execution) -> Result<()> {
    let env = env_for(cfg)?;
    let base = cfg.base_config();
    let run = pretrain(&base, &env, exec)?;
    let mut extras = Extras::default();
    run.adam.export(&mut extras)?;
    extras.meta.insert("config".into(), serde_json::to_value(&base)?);
    extras.meta.insert("config_hash".into(), json!(base.hash()));
    extras.meta.insert("base_hash".into(), json!(base_hash(&run.model.params)));
    extras.meta.insert("pretrain_losses".into(), json!(run.losses));
    let dir = base_dir(&cli.out, cfg);
    checkpoint::save(&dir, &run.model, &extras)?;
    println!(
        "pretrained {} {} seed {}: {} steps, final loss {:.4} -> {}",
        cfg.arch.name(),
        cfg.size.name(),
        cfg.seed,
        run.losses.len(),
        run.losses.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

struct Base {
    model: Model,
    hash: String,
    losses: Vec<f64>,
}

fn load_base(dir: &Path, cfg: &ExperimentConfig) -> Result<Base> {
    let (model, extras) = checkpoint::load(dir)
        .with_context(|| format!("loading base {} (run `lab pretrain` first)", dir.display()))?;
    if model.arch.name() != cfg.arch.name() {
        bail!("{} holds a {} model, config asks for {}", dir.display(), model.arch.name(), cfg.arch.name());
    }
    let hash = extras
        .meta
        .get("base_hash")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .unwrap_or_else(|| base_hash(&model.params));
    let losses = extras
        .meta
        .get("pretrain_losses")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or_default();
    Ok(Base { model, hash, losses })
}

fn cmd_tune(cli: &Cli, cfg: &ExperimentConfig, base: Option<&Path>, exec: Execution) -> Result<()> {
    let env = env_for(cfg)?;
    let dir = base.map(Path::to_path_buf).unwrap_or_else(|| base_dir(&cli.out, cfg));
    let b = load_base(&dir, cfg)?;
    let (record, model) = tune_and_score(cfg, &env, &b.model, Some(&b.hash), &b.losses, exec)?;
    let out = tuned_dir(&cli.out, cfg);
    match cfg.method {
        TuneMethod::None => {}
        TuneMethod::FullFinetune => checkpoint::save(&out, &model, &Extras::default())?,
        _ => checkpoint::save_peft(&out, &model, &Extras::default())?,
    }
    append_records(&cli.out.join(RESULTS_FILE), std::slice::from_ref(&record))?;
    println!(
        "{} {} {} seed {}: val F1 {:.2} (initial {:.2}), test F1 {:.2}, {} steps, trainable {}/{}",
        cfg.arch.name(),
        cfg.size.name(),
        cfg.method.name(),
        cfg.seed,
        100.0 * record.metrics["val_f1"],
        100.0 * record.metrics["val_f1_initial"],
        100.0 * record.metrics["test_f1"],
        record.steps,
        record.params.trainable,
        record.params.base_total
    );
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    cfg: &ExperimentConfig,
    base: Option<&Path>,
    tuned: Option<&Path>,
    show: usize,
    exec: Execution,
) -> Result<()> {
    let env = env_for(cfg)?;
    let dir = base.map(Path::to_path_buf).unwrap_or_else(|| base_dir(&cli.out, cfg));
    let b = load_base(&dir, cfg)?;
    let model = match tuned {
        None => b.model,
        Some(t) => {
            if checkpoint::read_manifest(t)?.base_hash.is_some() {
                checkpoint::load_peft(t, &b.model)?.0
            } else {
                checkpoint::load(t)?.0
            }
        }
    };
    for (name, split) in [("val", &env.task.val), ("test", &env.task.test)] {
        let r = env.evaluate(&model, split, cfg.max_new, exec)?;
        println!("{name} F1 {:.2} over {} questions", 100.0 * r.mean, split.len());
    }
    for ex in env.task.test.iter().take(show) {
        let pred = env.predict(&model, ex, cfg.max_new)?;
        println!("  {} -> {pred:?} (gold {:?})", ex.question, ex.answers[0]);
    }
    Ok(())
}

pub fn append_records(path: &Path, records: &[ResultsRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<ResultsRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{}:{}: bad record", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn tables(cells: &[GridCell]) -> String {
    format!("{}\n{}", render_table(cells, "val_f1"), render_table(cells, "test_f1"))
}

fn cmd_grid(cli: &Cli, suite: &SuiteConfig, exec: Execution) -> Result<()> {
    info!("running {} cells", suite.cells().len());
    let cells = run_comparison(suite, exec)?;
    fs::create_dir_all(&cli.out)?;
    let records: Vec<ResultsRecord> = cells.iter().filter_map(|c| c.record.clone()).collect();
    let results = cli.out.join(RESULTS_FILE);
    if results.exists() {
        fs::remove_file(&results)?;
    }
    append_records(&results, &records)?;
    let text = tables(&cells);
    fs::write(cli.out.join(TABLE_FILE), &text)?;
    fs::write(cli.out.join(SERIES_FILE), plot_series(&cells, "test_f1"))?;
    print!("{text}");
    println!("wrote {} records to {}", records.len(), results.display());
    Ok(())
}

fn cmd_report(suite: &SuiteConfig, path: &Path, metric: &str) -> Result<()> {
    let cells: Vec<GridCell> = read_records(path)?
        .into_iter()
        .map(|r| GridCell {
            config: ExperimentConfig {
                arch: r.arch,
                size: r.size,
                method: r.method,
                seed: r.seed,
                ..suite.base.clone()
            },
            record: Some(r),
        })
        .collect();
    print!("{}", render_table(&cells, metric));
    println!();
    print!("{}", plot_series(&cells, metric));
    println!();
    print!("{}", render_published());
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusDoc>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            docs.push(
                serde_json::from_str(&line)
                    .with_context(|| format!("{}:{}: expected {{id, title, text}}", path.display(), i + 1))?,
            );
        }
    }
    Ok(docs)
}

fn cmd_index_build(suite: &SuiteConfig, corpus: Option<&Path>, index: &Path, dim: usize) -> Result<()> {
    if dim == 0 {
        bail!("--dim must be positive");
    }
    let docs = match corpus {
        Some(p) => read_corpus(p)?,
        None => generate_synthetic_kv_task(suite.base.seed, &suite.base.dataset)?.corpus,
    };
    let mut chunks = Vec::new();
    for d in &docs {
        chunks.extend(chunk_document(&d.id, &d.title, &d.text)?);
    }
    let idx = RetrievalIndex::build(chunks, &HashedBow::new(dim));
    if let Some(dir) = index.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    idx.save(index)?;
    println!("indexed {} chunks from {} documents -> {}", idx.len(), docs.len(), index.display());
    Ok(())
}

fn cmd_index_query(index: &Path, k: usize, text: &str) -> Result<()> {
    let idx = RetrievalIndex::load(index)?;
    let Some(encoder) = HashedBow::from_tag(idx.encoder_tag()) else {
        bail!("unknown encoder `{}`", idx.encoder_tag());
    };
    for (rank, hit) in idx.query(&encoder, text, k)?.iter().enumerate() {
        let c = idx.chunk(hit.id).expect("hit ids come from the index");
        println!("{}\t{:.4}\t{}\t{}", rank + 1, hit.score, c.title, c.text);
    }
    Ok(())
}
