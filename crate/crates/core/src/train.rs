//! Optimization of the hub, projection and separator row against the
//! next-token loss of the frozen language model.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Sample, Task};
use crate::demo::{self, ContextPlan, DemoPool, DemoVariant, Episode, Strategy};
use crate::error::{Error, Result};
use crate::lm::LmSequence;
use crate::model::Model;
use crate::param::{ParamId, Parameter};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoResample {
    PerEpoch,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_steps: usize,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub demo_resample: DemoResample,
    pub seed: u64,
    /// Stop after this many optimizer steps, keeping the schedule of the
    /// full run.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 8,
            base_lr: 1e-5,
            warmup_start_lr: 1e-8,
            warmup_steps: 1000,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(1.0),
            demo_resample: DemoResample::PerEpoch,
            seed: 0,
            max_steps: None,
        }
    }
}

/// How training and evaluation episodes are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub task: Task,
    pub variant: DemoVariant,
    pub n_e: usize,
    pub strategy: Strategy,
}

/// Linear warmup followed by cosine decay that reaches the minimum at the
/// last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub start: f64,
    pub base: f64,
    pub min: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, total: usize) -> Result<Self> {
        if cfg.warmup_steps > total {
            return Err(Error::contract(format!(
                "warmup of {} steps exceeds the {total} total steps",
                cfg.warmup_steps
            )));
        }
        if cfg.base_lr <= 0.0 || cfg.warmup_start_lr <= 0.0 || cfg.min_lr < 0.0 {
            return Err(Error::contract("learning rates must be positive and the minimum non-negative"));
        }
        Ok(Self {
            start: cfg.warmup_start_lr,
            base: cfg.base_lr,
            min: cfg.min_lr,
            warmup: cfg.warmup_steps,
            total,
        })
    }

    pub fn final_step(&self) -> usize {
        self.total.saturating_sub(1).max(self.warmup)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            let t = step as f64 / self.warmup as f64;
            return self.start * (1.0 - t) + self.base * t;
        }
        let last = self.final_step();
        if step == self.warmup && last == self.warmup {
            return self.base;
        }
        if step >= last {
            return self.min;
        }
        let progress = (step - self.warmup) as f64 / (last - self.warmup) as f64;
        self.min + (self.base - self.min) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<ParamId, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its stored gradient.
    pub fn step(&mut self, params: &mut [&mut Parameter], lr: f64) -> Result<()> {
        for p in params.iter() {
            if p.trainable() && p.grad().is_none() {
                return Err(Error::contract(format!("trainable parameter {} has no gradient", p.name())));
            }
        }
        self.begin_step();
        for p in params.iter_mut() {
            self.update(p, lr)?;
        }
        Ok(())
    }

    /// Advances the bias-correction counter; call once per optimizer step
    /// before the [`AdamW::update`] calls of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, p: &mut Parameter, lr: f64) -> Result<()> {
        if !p.trainable() {
            return Ok(());
        }
        let g = p
            .take_grad()
            .ok_or_else(|| Error::contract(format!("trainable parameter {} has no gradient", p.name())))?;
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let decay = 1.0 - lr * self.weight_decay;
        let n = g.numel();
        let mo = self.moments.entry(p.id()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        for (i, (x, &gi)) in p.value_mut().data_mut().iter_mut().zip(g.data()).enumerate() {
            mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * gi;
            mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
            let mh = mo.m[i] / c1;
            let vh = mo.v[i] / c2;
            *x = *x * decay - lr * mh / (vh.sqrt() + eps);
        }
        Ok(())
    }
}

/// Scales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Builds an episode for `query`, drawing demonstrations from `pool` when
/// the variant uses them.
pub fn make_episode(
    pool: &DemoPool<'_>,
    query: &Sample,
    cfg: &EpisodeConfig,
    n_e: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    let demos = pool.sample(query, n_e, cfg.strategy, rng)?;
    let instruction = demo::pick_instruction(cfg.task, query, rng);
    Episode::new(demos, query.clone(), instruction)
}

/// Mean over episodes of the mean label-token NLL, computed in one batched
/// pass. Each plan must include the label.
pub fn batch_loss(model: &Model, tape: &mut Tape, episodes: &[&Episode], plans: &[ContextPlan]) -> Result<Var> {
    let prefixes = demo::realize(model, tape, episodes, plans)?;
    let seqs: Vec<LmSequence> = plans
        .iter()
        .zip(&prefixes)
        .map(|(p, &prefix)| LmSequence {
            prefix: Some(prefix),
            tokens: p.tokens(),
        })
        .collect();
    let (logits, lengths) = model.lm.forward(tape, &seqs)?;
    let mut losses = Vec::with_capacity(plans.len());
    let mut offset = 0;
    for (plan, &len) in plans.iter().zip(&lengths) {
        let k = plan.prefix_rows();
        let tokens = plan.tokens();
        let mask = plan.mask();
        // Row r predicts the input at r + 1.
        let mut targets = vec![0; len];
        let mut on = vec![false; len];
        for (j, (&t, &m)) in tokens.iter().zip(&mask).enumerate() {
            let pos = k + j;
            if m && pos > 0 {
                targets[pos - 1] = t;
                on[pos - 1] = true;
            }
        }
        let rows = tape.slice_rows(logits, offset, len)?;
        losses.push(tape.cross_entropy(rows, &targets, &on)?);
        offset += len;
    }
    tape.mean_of(&losses)
}

/// Loss of a single episode under `variant`.
pub fn episode_loss(model: &Model, episode: &Episode, variant: DemoVariant) -> Result<f64> {
    let plan = demo::plan_context(model, episode, variant, true)?;
    let mut tape = Tape::new();
    let loss = batch_loss(model, &mut tape, &[episode], &[plan])?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    pub backbone_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size.max(1))
}

fn epoch_seed(seed: u64, epoch: usize, salt: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03) ^ salt
}

/// Observers receive every step record, and every finished epoch with the
/// model in its end-of-epoch state.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_epoch(&mut self, _record: &EpochRecord, _model: &Model) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub fn train(
    model: &mut Model,
    train_set: &[Sample],
    episodes: &EpisodeConfig,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainLog> {
    if train_set.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let per_epoch = steps_per_epoch(train_set.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let schedule = Schedule::new(cfg, total.max(cfg.warmup_steps))?;
    let mut opt = AdamW::from_config(cfg);
    let backbone = model.backbone_digest();
    let pool = DemoPool::new(train_set);
    let n_e = if episodes.variant.uses_demos() { episodes.n_e } else { 0 };
    let mut log = TrainLog::default();
    let mut fixed: Option<Vec<Episode>> = None;
    let mut step = 0;

    'epochs: for epoch in 0..cfg.epochs {
        let demo_epoch = match cfg.demo_resample {
            DemoResample::PerEpoch => epoch,
            DemoResample::Fixed => 0,
        };
        let eps: Vec<Episode> = match (&fixed, cfg.demo_resample) {
            (Some(e), DemoResample::Fixed) => e.clone(),
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, demo_epoch, 0xde30));
                let e = train_set
                    .iter()
                    .map(|q| make_episode(&pool, q, episodes, n_e, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                if cfg.demo_resample == DemoResample::Fixed {
                    fixed = Some(e.clone());
                }
                e
            }
        };
        let mut order: Vec<usize> = (0..eps.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, 0x5eed)));
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let batch_eps: Vec<&Episode> = batch.iter().map(|&i| &eps[i]).collect();
            let plans = batch_eps
                .iter()
                .map(|e| demo::plan_context(model, e, episodes.variant, true))
                .collect::<Result<Vec<_>>>()?;
            let mut tape = Tape::new();
            let loss = batch_loss(model, &mut tape, &batch_eps, &plans)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: value });
            }
            let grads = tape.backward(loss)?;
            drop(tape);
            let mut flat: Vec<Tensor> = Vec::new();
            model.visit_trainable(&mut |p| {
                if p.trainable() {
                    flat.push(grads.param(p.id()).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape())));
                }
            });
            let norm = clip_gradients(&mut flat, cfg.clip_norm.unwrap_or(f64::INFINITY));
            let lr = schedule.lr_at(step);
            let mut result = Ok(());
            let mut flat = flat.into_iter();
            opt.begin_step();
            model.visit_trainable_mut(&mut |p| {
                if result.is_ok() && p.trainable() {
                    let g = flat.next().expect("one gradient per trainable parameter");
                    result = p.set_grad(g).and_then(|_| opt.update(p, lr));
                }
            });
            result?;
            let record = StepRecord {
                step,
                epoch,
                lr,
                loss: value,
                grad_norm: norm,
            };
            observer.on_step(&record)?;
            log.steps.push(record);
            epoch_loss += value;
            epoch_steps += 1;
            step += 1;
        }
        let digest = model.backbone_digest();
        if digest != backbone {
            return Err(Error::Integrity {
                expected: backbone,
                found: digest,
            });
        }
        let record = EpochRecord {
            epoch,
            mean_loss: epoch_loss / epoch_steps.max(1) as f64,
            steps: epoch_steps,
            backbone_digest: digest,
        };
        observer.on_epoch(&record, model)?;
        log.epochs.push(record);
    }
    Ok(log)
}
