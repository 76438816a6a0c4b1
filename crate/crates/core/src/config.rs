//! Run configuration: a flat `key = value` text format with `#` comments.
//! Every key has a default, so a config file only lists what it changes,
//! and command-line `--set key=value` pairs are applied last.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{GenSpec, Task};
use crate::demo::{DemoVariant, Strategy};
use crate::error::{Error, Result};
use crate::eval::{DecodeMode, EvalConfig, GenConfig};
use crate::lm::LmConfig;
use crate::mhub::MhubConfig;
use crate::pretrain::PretrainConfig;
use crate::train::{DemoResample, EpisodeConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub variants: Vec<DemoVariant>,
    pub n_e: Vec<usize>,
    pub strategies: Vec<Strategy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub lm_path: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,

    pub task: Task,
    pub variant: DemoVariant,
    pub n_e: usize,
    pub strategy: Strategy,

    pub frames: usize,
    pub grid: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub data_seed: u64,

    pub encoder_width: usize,
    pub encoder_seed: u64,
    pub lm_width: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_ffn: usize,
    pub max_context: usize,
    pub lm_seed: u64,
    pub hub_blocks: usize,
    pub n_q: usize,
    pub hub_width: usize,
    pub hub_heads: usize,
    pub hub_ffn: usize,
    pub max_text_len: usize,
    pub model_seed: u64,

    pub pretrain: PretrainConfig,
    pub train: TrainConfig,

    pub with_demos: bool,
    pub eval_split: Split,
    pub eval_seed: u64,
    pub gen: GenConfig,

    pub sweep: Sweep,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = LmConfig::new(0);
        let hub = MhubConfig::new(0);
        Self {
            data_dir: "data".into(),
            lm_path: "runs/lm.ckpt".into(),
            checkpoint: "runs/model.ckpt".into(),
            out_dir: "runs".into(),
            task: Task::Describe,
            variant: DemoVariant::Mmict,
            n_e: 2,
            strategy: Strategy::Random,
            frames: 16,
            grid: 4,
            train_samples: 2000,
            val_samples: 200,
            test_samples: 200,
            data_seed: 0,
            encoder_width: hub.encoder_width,
            encoder_seed: 0,
            lm_width: lm.width,
            lm_layers: lm.layers,
            lm_heads: lm.heads,
            lm_ffn: lm.ffn_hidden,
            max_context: lm.max_context,
            lm_seed: 0,
            hub_blocks: hub.blocks,
            n_q: hub.queries,
            hub_width: hub.width,
            hub_heads: hub.heads,
            hub_ffn: hub.ffn_hidden,
            max_text_len: hub.max_text_len,
            model_seed: 0,
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            with_demos: false,
            eval_split: Split::Test,
            eval_seed: 0,
            gen: GenConfig::default(),
            sweep: Sweep {
                variants: vec![DemoVariant::VanillaFt, DemoVariant::Mmict],
                n_e: vec![2],
                strategies: vec![Strategy::Random],
            },
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Usage(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Usage(format!("{key} needs at least one value")));
    }
    Ok(items)
}

fn parse_optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn optional<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn named<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .expect("unit enums serialize as strings")
}

fn from_name<T: for<'de> Deserialize<'de>>(key: &str, value: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::Usage(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// All keys with their current values, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let p = &self.pretrain;
        vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("lm_path", self.lm_path.display().to_string()),
            ("checkpoint", self.checkpoint.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("task", self.task.to_string()),
            ("variant", self.variant.to_string()),
            ("n_e", self.n_e.to_string()),
            ("strategy", self.strategy.to_string()),
            ("n_f", self.frames.to_string()),
            ("grid", self.grid.to_string()),
            ("train_samples", self.train_samples.to_string()),
            ("val_samples", self.val_samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("encoder_width", self.encoder_width.to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("lm_width", self.lm_width.to_string()),
            ("lm_layers", self.lm_layers.to_string()),
            ("lm_heads", self.lm_heads.to_string()),
            ("lm_ffn", self.lm_ffn.to_string()),
            ("max_context", self.max_context.to_string()),
            ("lm_seed", self.lm_seed.to_string()),
            ("hub_blocks", self.hub_blocks.to_string()),
            ("n_q", self.n_q.to_string()),
            ("hub_width", self.hub_width.to_string()),
            ("hub_heads", self.hub_heads.to_string()),
            ("hub_ffn", self.hub_ffn.to_string()),
            ("max_text_len", self.max_text_len.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("pretrain.steps", p.steps.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.warmup_steps", p.warmup_steps.to_string()),
            ("pretrain.max_demos", p.max_demos.to_string()),
            ("pretrain.seed", p.seed.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("base_lr", t.base_lr.to_string()),
            ("warmup_start_lr", t.warmup_start_lr.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("min_lr", t.min_lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("clip_norm", optional(&t.clip_norm)),
            ("demo_resample", named(&t.demo_resample)),
            ("train_seed", t.seed.to_string()),
            ("max_steps", optional(&t.max_steps)),
            ("with_demos", self.with_demos.to_string()),
            ("eval_split", named(&self.eval_split)),
            ("eval_seed", self.eval_seed.to_string()),
            ("decode", named(&self.gen.mode)),
            ("beam_width", self.gen.beam_width.to_string()),
            ("max_new_tokens", self.gen.max_new_tokens.to_string()),
            ("length_penalty", optional(&self.gen.length_penalty)),
            ("sweep.variant", list(&self.sweep.variants)),
            ("sweep.n_e", list(&self.sweep.n_e)),
            ("sweep.strategy", list(&self.sweep.strategies)),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let p = &mut self.pretrain;
        match key {
            "data_dir" => self.data_dir = v.into(),
            "lm_path" => self.lm_path = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "out_dir" => self.out_dir = v.into(),
            "task" => self.task = parse(key, v)?,
            "variant" => self.variant = parse(key, v)?,
            "n_e" => self.n_e = parse(key, v)?,
            "strategy" => self.strategy = parse(key, v)?,
            "n_f" => self.frames = parse(key, v)?,
            "grid" => self.grid = parse(key, v)?,
            "train_samples" => self.train_samples = parse(key, v)?,
            "val_samples" => self.val_samples = parse(key, v)?,
            "test_samples" => self.test_samples = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "encoder_width" => self.encoder_width = parse(key, v)?,
            "encoder_seed" => self.encoder_seed = parse(key, v)?,
            "lm_width" => self.lm_width = parse(key, v)?,
            "lm_layers" => self.lm_layers = parse(key, v)?,
            "lm_heads" => self.lm_heads = parse(key, v)?,
            "lm_ffn" => self.lm_ffn = parse(key, v)?,
            "max_context" => self.max_context = parse(key, v)?,
            "lm_seed" => self.lm_seed = parse(key, v)?,
            "hub_blocks" => self.hub_blocks = parse(key, v)?,
            "n_q" => self.n_q = parse(key, v)?,
            "hub_width" => self.hub_width = parse(key, v)?,
            "hub_heads" => self.hub_heads = parse(key, v)?,
            "hub_ffn" => self.hub_ffn = parse(key, v)?,
            "max_text_len" => self.max_text_len = parse(key, v)?,
            "model_seed" => self.model_seed = parse(key, v)?,
            "pretrain.steps" => p.steps = parse(key, v)?,
            "pretrain.batch_size" => p.batch_size = parse(key, v)?,
            "pretrain.lr" => p.lr = parse(key, v)?,
            "pretrain.warmup_steps" => p.warmup_steps = parse(key, v)?,
            "pretrain.max_demos" => p.max_demos = parse(key, v)?,
            "pretrain.seed" => p.seed = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "base_lr" => t.base_lr = parse(key, v)?,
            "warmup_start_lr" => t.warmup_start_lr = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "min_lr" => t.min_lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse_optional(key, v)?,
            "demo_resample" => t.demo_resample = from_name::<DemoResample>(key, v)?,
            "train_seed" => t.seed = parse(key, v)?,
            "max_steps" => t.max_steps = parse_optional(key, v)?,
            "with_demos" => self.with_demos = parse(key, v)?,
            "eval_split" => self.eval_split = from_name(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "decode" => self.gen.mode = from_name::<DecodeMode>(key, v)?,
            "beam_width" => self.gen.beam_width = parse(key, v)?,
            "max_new_tokens" => self.gen.max_new_tokens = parse(key, v)?,
            "length_penalty" => self.gen.length_penalty = parse_optional(key, v)?,
            "sweep.variant" => self.sweep.variants = parse_list(key, v)?,
            "sweep.n_e" => self.sweep.n_e = parse_list(key, v)?,
            "sweep.strategy" => self.sweep.strategies = parse_list(key, v)?,
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line)
                .map_err(|e| Error::parse(format!("config line {}", i + 1), e))?;
        }
        Ok(())
    }

    /// Defaults, then the optional file, then the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            cfg.apply_text(&crate::data::read_to_string(p)?)?;
        }
        for o in overrides {
            cfg.set_pair(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Usage("n_f must be at least 1".into()));
        }
        if self.grid < 2 {
            return Err(Error::Usage("grid must be at least 2".into()));
        }
        self.gen.validate()?;
        self.hub_config(0).validate()?;
        Ok(())
    }

    pub fn gen_spec(&self) -> GenSpec {
        GenSpec {
            task: self.task,
            train: self.train_samples,
            val: self.val_samples,
            test: self.test_samples,
            frames: self.frames,
            grid: self.grid,
            seed: self.data_seed,
        }
    }

    pub fn lm_config(&self, vocab: usize) -> LmConfig {
        LmConfig {
            vocab,
            width: self.lm_width,
            layers: self.lm_layers,
            heads: self.lm_heads,
            ffn_hidden: self.lm_ffn,
            max_context: self.max_context,
        }
    }

    pub fn hub_config(&self, vocab: usize) -> MhubConfig {
        MhubConfig {
            blocks: self.hub_blocks,
            queries: self.n_q,
            width: self.hub_width,
            heads: self.hub_heads,
            ffn_hidden: self.hub_ffn,
            encoder_width: self.encoder_width,
            lm_width: self.lm_width,
            vocab,
            max_text_len: self.max_text_len,
        }
    }

    /// Pre-training settings with the region sized to the query count.
    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            region: self.n_q,
            ..self.pretrain.clone()
        }
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            task: self.task,
            variant: self.variant,
            n_e: self.n_e,
            strategy: self.strategy,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            task: self.task,
            variant: self.variant,
            n_e: self.n_e,
            strategy: self.strategy,
            with_demos: self.with_demos,
            seed: self.eval_seed,
            gen: self.gen.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let mut cfg = RunConfig::default();
        cfg.set("n_e", "3").unwrap();
        cfg.set("clip_norm", "none").unwrap();
        cfg.set("sweep.n_e", "0,1,2,3,4").unwrap();
        cfg.set("with_demos", "true").unwrap();
        cfg.set("base_lr", "0.00123").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let cfg = RunConfig::load(None, &["with_demos=true".into(), "variant=vanilla-ft".into()]).unwrap();
        assert!(cfg.with_demos);
        assert_eq!(cfg.variant, DemoVariant::VanillaFt);
        assert!(matches!(RunConfig::load(None, &["nope=1".into()]), Err(Error::Usage(_))));
        assert!(RunConfig::load(None, &["n_f=0".into()]).is_err());
        assert!(RunConfig::load(None, &["n_e".into()]).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# header\n\n task = icl-map  # trailing\n").unwrap();
        assert_eq!(cfg.task, Task::IclMap);
    }
}
