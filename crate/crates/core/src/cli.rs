//! Command-line surface.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, Split};
use crate::data::{self, Sample, Task};
use crate::demo::{self, DemoPool, DemoVariant, Strategy};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::lm::ToyLm;
use crate::model::Model;
use crate::param::Module;
use crate::pretrain::{self, Corpus};
use crate::tokenizer::Tokenizer;
use crate::train::{self, EpochRecord, StepRecord, TrainLog, TrainObserver};
use crate::vision::ImageEncoder;

#[derive(Parser, Debug)]
#[command(name = "mmict", about = "Multimodal in-context tuning on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate train/val/test splits for the configured task.
    GenData(Common),
    /// Pre-train the language model on the text of every generated task.
    PretrainLm(Common),
    /// Tune the hub against the frozen backbones.
    Train(Common),
    /// Evaluate a trained checkpoint.
    Eval(Common),
    /// Train and evaluate every variant x n_e x strategy cell.
    Ablate(Common),
    /// Print the context layout of one sample.
    Inspect {
        #[command(flatten)]
        common: Common,
        /// Position of the sample in the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Print the effective configuration.
    ShowConfig(Common),
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData(c) => gen_data(&load(&c)?),
        Command::PretrainLm(c) => pretrain_lm(&load(&c)?),
        Command::Train(c) => {
            let cfg = load(&c)?;
            let (_, summary) = train_cmd(&cfg)?;
            Ok(summary)
        }
        Command::Eval(c) => {
            let cfg = load(&c)?;
            let report = eval_cmd(&cfg)?;
            Ok(report_table(&[(&cfg, &report)]))
        }
        Command::Ablate(c) => ablate(&load(&c)?),
        Command::Inspect { common, index } => inspect(&load(&common)?, index),
        Command::ShowConfig(c) => Ok(load(&c)?.to_text()),
    }
}

fn load(c: &Common) -> Result<RunConfig> {
    RunConfig::load(c.config.as_deref(), &c.sets)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn gen_data(cfg: &RunConfig) -> Result<String> {
    let splits = data::generate(&cfg.gen_spec())?;
    data::save_splits(&cfg.data_dir, cfg.task, &splits)?;
    Ok(format!(
        "{}: {} train, {} val, {} test samples in {}\n",
        cfg.task,
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        cfg.data_dir.join(cfg.task.name()).display()
    ))
}

fn load_split(cfg: &RunConfig, task: Task, split: Split) -> Result<Vec<Sample>> {
    let path = data::split_path(&cfg.data_dir, task, split.name());
    require(&path, "dataset file")?;
    data::load_samples(&path)
}

fn lm_meta(cfg: &RunConfig, lm: &ToyLm, tasks: &[Task]) -> serde_json::Value {
    serde_json::json!({
        "kind": "lm",
        "lm": lm.config,
        "pretrain": cfg.pretrain_config(),
        "lm_seed": cfg.lm_seed,
        "tasks": tasks.iter().map(|t| t.name()).collect::<Vec<_>>(),
    })
}

pub fn pretrain_lm(cfg: &RunConfig) -> Result<String> {
    let mut owned = Vec::new();
    for task in Task::ALL {
        let path = data::split_path(&cfg.data_dir, task, "train");
        if path.exists() {
            owned.push((task, data::load_samples(&path)?));
        }
    }
    if owned.is_empty() {
        return Err(Error::Usage(format!(
            "no training splits under {}; run gen-data first",
            cfg.data_dir.display()
        )));
    }
    let tasks: Vec<(Task, &[Sample])> = owned.iter().map(|(t, s)| (*t, s.as_slice())).collect();
    let corpus = Corpus::new(&tasks)?;
    let tok = Tokenizer::new();
    let mut lm = ToyLm::new(cfg.lm_config(tok.vocab_size()), cfg.lm_seed);
    let mut log = String::new();
    pretrain::pretrain_lm(&mut lm, &corpus, &cfg.pretrain_config(), &mut |r| {
        log.push_str(&serde_json::to_string(r).expect("json"));
        log.push('\n');
    })?;
    let names: Vec<Task> = owned.iter().map(|(t, _)| *t).collect();
    let ck = Checkpoint::capture(lm_meta(cfg, &lm, &names), |f| lm.visit(f));
    ck.save(&cfg.lm_path)?;
    data::write_atomic(&cfg.out_dir.join("pretrain_log.jsonl"), log.as_bytes())?;
    Ok(format!("language model saved to {}\n", cfg.lm_path.display()))
}

pub fn load_lm(cfg: &RunConfig) -> Result<ToyLm> {
    require(&cfg.lm_path, "language model")?;
    let ck = Checkpoint::load(&cfg.lm_path)?;
    let tok = Tokenizer::new();
    let mut lm = ToyLm::new(cfg.lm_config(tok.vocab_size()), cfg.lm_seed);
    ck.restore(|f| lm.visit_mut(f))?;
    lm.freeze_all();
    Ok(lm)
}

/// A model with a freshly initialized hub around the saved backbones.
pub fn fresh_model(cfg: &RunConfig, lm: ToyLm) -> Result<Model> {
    let tok = Tokenizer::new();
    let encoder = ImageEncoder::new(cfg.grid, cfg.encoder_width, cfg.encoder_seed);
    Model::new(encoder, lm, cfg.hub_config(tok.vocab_size()), cfg.model_seed)
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

pub fn train_log_jsonl(log: &TrainLog) -> String {
    let mut out = String::new();
    let mut epochs = log.epochs.iter().peekable();
    for s in &log.steps {
        while let Some(e) = epochs.next_if(|e| e.epoch < s.epoch) {
            out.push_str(&serde_json::to_string(&LogLine::Epoch(e)).expect("json"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&LogLine::Step(s)).expect("json"));
        out.push('\n');
    }
    for e in epochs {
        out.push_str(&serde_json::to_string(&LogLine::Epoch(e)).expect("json"));
        out.push('\n');
    }
    out
}

pub fn model_checkpoint(cfg: &RunConfig, model: &Model) -> Checkpoint {
    let meta = serde_json::json!({
        "kind": "model",
        "config": cfg.to_text(),
        "backbone_digest": model.backbone_digest(),
        "trainable_digest": model.trainable_digest(),
    });
    Checkpoint::capture(meta, |f| model.visit_trainable(f))
}

/// Overwrites the checkpoint with the trainable state after every epoch.
struct EpochCheckpoints<'a>(&'a RunConfig);

impl TrainObserver for EpochCheckpoints<'_> {
    fn on_epoch(&mut self, _record: &EpochRecord, model: &Model) -> Result<()> {
        model_checkpoint(self.0, model).save(&self.0.checkpoint)
    }
}

/// Trains from the configured data and saved language model, writes the
/// checkpoint and log, and returns the trained model.
pub fn train_cmd(cfg: &RunConfig) -> Result<(Model, String)> {
    let train_set = load_split(cfg, cfg.task, Split::Train)?;
    let mut model = fresh_model(cfg, load_lm(cfg)?)?;
    let log = train::train(&mut model, &train_set, &cfg.episode_config(), &cfg.train, &mut EpochCheckpoints(cfg))?;
    // A step cap can end training mid-epoch.
    model_checkpoint(cfg, &model).save(&cfg.checkpoint)?;
    let log_path = cfg.out_dir.join("train_log.jsonl");
    data::write_atomic(&log_path, train_log_jsonl(&log).as_bytes())?;
    let mut summary = String::new();
    for e in &log.epochs {
        let _ = writeln!(summary, "epoch {:>3}  mean loss {:.5}  steps {}", e.epoch, e.mean_loss, e.steps);
    }
    let _ = writeln!(summary, "checkpoint saved to {}", cfg.checkpoint.display());
    Ok((model, summary))
}

pub fn load_model(cfg: &RunConfig) -> Result<Model> {
    require(&cfg.checkpoint, "checkpoint")?;
    let ck = Checkpoint::load(&cfg.checkpoint)?;
    let mut model = fresh_model(cfg, load_lm(cfg)?)?;
    ck.restore(|f| model.visit_trainable_mut(f))?;
    if let Some(expected) = ck.meta.get("backbone_digest").and_then(|v| v.as_str()) {
        let found = model.backbone_digest();
        if expected != found {
            return Err(Error::Integrity {
                expected: expected.to_string(),
                found,
            });
        }
    }
    Ok(model)
}

pub fn evaluate_model(cfg: &RunConfig, model: &Model) -> Result<EvalReport> {
    let samples = load_split(cfg, cfg.task, cfg.eval_split)?;
    let pool_samples = load_split(cfg, cfg.task, Split::Train)?;
    let pool = DemoPool::new(&pool_samples);
    eval::evaluate(model, &samples, &pool, &cfg.eval_config())
}

pub fn report_jsonl(report: &EvalReport) -> String {
    let mut out = String::new();
    let head = serde_json::json!({"type": "summary", "config": report.config, "metrics": report.metrics});
    out.push_str(&head.to_string());
    out.push('\n');
    for r in &report.records {
        let mut v = serde_json::to_value(r).expect("json");
        v["type"] = "sample".into();
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<EvalReport> {
    let model = load_model(cfg)?;
    let report = evaluate_model(cfg, &model)?;
    data::write_atomic(&cfg.out_dir.join("eval_report.jsonl"), report_jsonl(&report).as_bytes())?;
    Ok(report)
}

pub fn report_table(rows: &[(&RunConfig, &EvalReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<18} {:>4} {:<12} {:<6} {:>8} {:>8}",
        "variant", "n_e", "strategy", "demos", "acc", "bleu4"
    );
    for (cfg, rep) in rows {
        let bleu = rep.metrics.bleu4.map_or("-".to_string(), |b| format!("{:.4}", b));
        let _ = writeln!(
            out,
            "{:<18} {:>4} {:<12} {:<6} {:>8.4} {:>8}",
            cfg.variant.name(),
            cfg.n_e,
            cfg.strategy.to_string(),
            rep.config.with_demos,
            rep.metrics.accuracy,
            bleu
        );
    }
    out
}

/// Every cell trains from the same initial hub and writes its checkpoint
/// and logs under `out_dir/<variant>-ne<n>-<strategy>/`.
pub fn ablate(cfg: &RunConfig) -> Result<String> {
    let mut cells: Vec<(RunConfig, EvalReport)> = Vec::new();
    let mut jsonl = String::new();
    for &variant in &cfg.sweep.variants {
        for &n_e in &cfg.sweep.n_e {
            for &strategy in &cfg.sweep.strategies {
                let mut cell = cfg.clone();
                cell.variant = variant;
                cell.n_e = n_e;
                cell.strategy = strategy;
                let dir = cfg.out_dir.join(cell_name(variant, n_e, strategy));
                cell.checkpoint = dir.join("model.ckpt");
                cell.out_dir = dir;
                let (model, _) = train_cmd(&cell)?;
                let report = evaluate_model(&cell, &model)?;
                data::write_atomic(&cell.out_dir.join("eval_report.jsonl"), report_jsonl(&report).as_bytes())?;
                let row = serde_json::json!({
                    "variant": variant.name(),
                    "n_e": n_e,
                    "strategy": strategy.to_string(),
                    "with_demos": cell.with_demos,
                    "metrics": report.metrics,
                });
                jsonl.push_str(&row.to_string());
                jsonl.push('\n');
                cells.push((cell, report));
            }
        }
    }
    data::write_atomic(&cfg.out_dir.join("ablate.jsonl"), jsonl.as_bytes())?;
    let rows: Vec<(&RunConfig, &EvalReport)> = cells.iter().map(|(c, r)| (c, r)).collect();
    Ok(report_table(&rows))
}

fn cell_name(variant: DemoVariant, n_e: usize, strategy: Strategy) -> String {
    format!("{}-ne{}-{}", variant.name(), n_e, strategy)
}

/// Shows the segment sequence the variant builds for one training sample
/// with demonstrations drawn as in training.
pub fn inspect(cfg: &RunConfig, index: usize) -> Result<String> {
    use rand::SeedableRng;
    let samples = load_split(cfg, cfg.task, Split::Train)?;
    let query = samples
        .get(index)
        .ok_or_else(|| Error::Usage(format!("index {index} out of range for {} samples", samples.len())))?;
    let tok = Tokenizer::new();
    // Layout does not depend on weights, so a small random model suffices.
    let lm = ToyLm::new(cfg.lm_config(tok.vocab_size()), cfg.lm_seed);
    let model = fresh_model(cfg, lm)?;
    let pool = DemoPool::new(&samples);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let n_e = if cfg.variant.uses_demos() { cfg.n_e } else { 0 };
    let episode = train::make_episode(&pool, query, &cfg.episode_config(), n_e, &mut rng)?;
    let plan = demo::plan_context(&model, &episode, cfg.variant, false)?;
    let mut out = String::new();
    let _ = writeln!(out, "variant {}  n_e {}  query {}", cfg.variant.name(), n_e, query.id);
    for (feature, role, rows) in plan.layout() {
        let _ = writeln!(out, "  {:<10} {:<14} {:>3} rows", feature.symbol(), format!("{role:?}"), rows);
    }
    let _ = writeln!(out, "  instruction: {}", episode.instruction);
    let soft = plan.soft.len();
    let _ = writeln!(out, "{soft} soft segments, {} prefix rows, {} token rows", plan.prefix_rows(), plan.instruction.len());
    Ok(out)
}
