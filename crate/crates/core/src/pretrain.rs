//! Next-token pre-training of the toy language model on synthetic text.
//!
//! Documents are laid out like tuning contexts, with words in place of the
//! soft rows: demonstration texts each followed by `<eoc>`, a region as long
//! as the hub's query set, the instruction, then the label. The region holds
//! what the query features will later need to convey (the object names for
//! captions, the answer for questions, nothing for icl-map), scattered over
//! `<pad>` filler. Region positions are never predicted.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Sample, Task};
use crate::demo::{self, DemoPool, Strategy};
use crate::error::{Error, Result};
use crate::lm::{LmSequence, ToyLm};
use crate::param::Module;
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, EOC, EOS, OBJECT_NAMES, PAD};
use crate::train::{clip_gradients, AdamW, Schedule, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub region: usize,
    pub max_demos: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 100,
            region: 32,
            max_demos: 4,
            seed: 0,
        }
    }
}

/// One training document: tokens plus which positions are predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub tokens: Vec<usize>,
    pub predicted: Vec<bool>,
}

fn region_for(task: Task, sample: &Sample, tok: &Tokenizer, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let mut region = vec![PAD; len];
    let names: Vec<usize> = match task {
        Task::Describe => {
            let mut ids = Vec::new();
            for w in sample.label.split_whitespace() {
                if OBJECT_NAMES.contains(&w) {
                    ids.push(tok.id(w)?);
                }
            }
            ids
        }
        Task::Qa => vec![tok.id(&sample.label)?],
        Task::IclMap => Vec::new(),
    };
    if names.len() > len {
        return Err(Error::contract("region too short for the scene"));
    }
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    slots.truncate(names.len());
    slots.sort_unstable();
    for (slot, id) in slots.into_iter().zip(names) {
        region[slot] = id;
    }
    Ok(region)
}

/// Draws one document from a task's samples.
pub fn make_document(
    task: Task,
    pool: &DemoPool<'_>,
    tok: &Tokenizer,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Document> {
    let query = pool.samples().choose(rng).ok_or_else(|| Error::contract("empty corpus"))?;
    let (strategy, lo) = match task {
        Task::IclMap => (Strategy::OneToMany, 1),
        _ => (Strategy::Random, 0),
    };
    let mut n = rng.random_range(lo..=cfg.max_demos.max(lo));
    let demos = loop {
        match pool.sample(query, n, strategy, rng) {
            Ok(d) => break d,
            Err(Error::Sampling { available, .. }) if available >= lo => n = available,
            Err(e) => return Err(e),
        }
    };
    let mut tokens = Vec::new();
    let mut predicted = Vec::new();
    for d in &demos {
        let t = tok.tokenize(&d.text)?;
        predicted.extend(std::iter::repeat_n(true, t.len() + 1));
        tokens.extend(t);
        tokens.push(EOC);
    }
    let region = region_for(task, query, tok, cfg.region, rng)?;
    predicted.extend(std::iter::repeat_n(false, region.len()));
    tokens.extend(region);
    let instruction = tok.tokenize(&demo::pick_instruction(task, query, rng))?;
    predicted.extend(std::iter::repeat_n(true, instruction.len()));
    tokens.extend(instruction);
    let label = tok.tokenize(&query.label)?;
    predicted.extend(std::iter::repeat_n(true, label.len() + 1));
    tokens.extend(label);
    tokens.push(EOS);
    // The LM returns no logits for its own <bos>, so nothing predicts position 0.
    predicted[0] = false;
    Ok(Document { tokens, predicted })
}

/// Draws documents round-robin over the tasks.
pub struct Corpus<'a> {
    pools: Vec<(Task, DemoPool<'a>)>,
}

impl<'a> Corpus<'a> {
    pub fn new(tasks: &[(Task, &'a [Sample])]) -> Result<Self> {
        let pools: Vec<_> = tasks
            .iter()
            .filter(|(_, s)| !s.is_empty())
            .map(|&(t, s)| (t, DemoPool::new(s)))
            .collect();
        if pools.is_empty() {
            return Err(Error::contract("pre-training corpus is empty"));
        }
        Ok(Self { pools })
    }

    pub fn draw(&self, tok: &Tokenizer, cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<Document> {
        let (task, pool) = self.pools.choose(rng).expect("non-empty");
        make_document(*task, pool, tok, cfg, rng)
    }
}

/// Mean next-token loss over the predicted positions of `docs`.
pub fn documents_loss(lm: &ToyLm, tape: &mut Tape, docs: &[Document]) -> Result<crate::autograd::Var> {
    let seqs: Vec<LmSequence> = docs
        .iter()
        .map(|d| LmSequence {
            prefix: None,
            tokens: d.tokens.clone(),
        })
        .collect();
    let (logits, _) = lm.forward(tape, &seqs)?;
    let mut targets = Vec::new();
    let mut mask = Vec::new();
    for d in docs {
        for i in 0..d.tokens.len() {
            let next = i + 1 < d.tokens.len() && d.predicted[i + 1];
            targets.push(if next { d.tokens[i + 1] } else { 0 });
            mask.push(next);
        }
    }
    tape.cross_entropy(logits, &targets, &mask)
}

pub fn perplexity(lm: &ToyLm, docs: &[Document]) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = documents_loss(lm, &mut tape, docs)?;
    Ok(tape.value(loss).item().exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Trains `lm` in place and freezes it.
pub fn pretrain_lm(
    lm: &mut ToyLm,
    corpus: &Corpus<'_>,
    cfg: &PretrainConfig,
    on_step: &mut dyn FnMut(&PretrainRecord),
) -> Result<()> {
    let tok = Tokenizer::new();
    if tok.vocab_size() != lm.vocab() {
        return Err(Error::contract("language model vocabulary does not match the tokenizer"));
    }
    lm.visit_mut(&mut |p| p.unfreeze());
    let sched_cfg = TrainConfig {
        base_lr: cfg.lr,
        warmup_start_lr: cfg.lr * 1e-3,
        warmup_steps: cfg.warmup_steps.min(cfg.steps),
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let schedule = Schedule::new(&sched_cfg, cfg.steps.max(sched_cfg.warmup_steps))?;
    let mut opt = AdamW::from_config(&sched_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for step in 0..cfg.steps {
        let docs = (0..cfg.batch_size)
            .map(|_| corpus.draw(&tok, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let loss = documents_loss(lm, &mut tape, &docs)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        drop(tape);
        let mut flat: Vec<Tensor> = Vec::new();
        lm.visit(&mut |p| flat.push(grads.param(p.id()).cloned().unwrap_or_else(|| Tensor::zeros(p.value().shape()))));
        clip_gradients(&mut flat, 1.0);
        let lr = schedule.lr_at(step);
        let mut flat = flat.into_iter();
        let mut result = Ok(());
        opt.begin_step();
        lm.visit_mut(&mut |p| {
            let g = flat.next().expect("one gradient per parameter");
            if result.is_ok() {
                result = p.set_grad(g).and_then(|_| opt.update(p, lr));
            }
        });
        result?;
        on_step(&PretrainRecord { step, lr, loss: value });
    }
    lm.freeze_all();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenSpec};
    use crate::lm::LmConfig;

    fn splits(task: Task) -> Vec<Sample> {
        let spec = GenSpec { task, train: 40, val: 0, test: 0, frames: 2, grid: 4, seed: 3 };
        generate(&spec).unwrap().train
    }

    #[test]
    fn documents_mask_region_and_first_position() {
        let tok = Tokenizer::new();
        let samples = splits(Task::Describe);
        let pool = DemoPool::new(&samples);
        let cfg = PretrainConfig { region: 8, ..PretrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let doc = make_document(Task::Describe, &pool, &tok, &cfg, &mut rng).unwrap();
            assert_eq!(doc.tokens.len(), doc.predicted.len());
            assert!(!doc.predicted[0]);
            assert_eq!(*doc.tokens.last().unwrap(), EOS);
            let hidden = doc.predicted.iter().filter(|p| !**p).count();
            assert!(hidden >= 8);
        }
    }

    #[test]
    fn icl_map_documents_always_carry_a_same_group_demo() {
        let tok = Tokenizer::new();
        let samples = splits(Task::IclMap);
        let pool = DemoPool::new(&samples);
        let cfg = PretrainConfig { region: 4, ..PretrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let doc = make_document(Task::IclMap, &pool, &tok, &cfg, &mut rng).unwrap();
            assert!(doc.tokens.contains(&EOC));
        }
    }

    #[test]
    fn zero_steps_leaves_weights_untouched_and_frozen() {
        let tok = Tokenizer::new();
        let samples = splits(Task::Qa);
        let corpus = Corpus::new(&[(Task::Qa, &samples)]).unwrap();
        let mut lm = ToyLm::new(LmConfig::new(tok.vocab_size()), 5);
        let before = lm.token_embedding.value().clone();
        let cfg = PretrainConfig { steps: 0, ..PretrainConfig::default() };
        pretrain_lm(&mut lm, &corpus, &cfg, &mut |_| {}).unwrap();
        assert_eq!(lm.token_embedding.value(), &before);
        let mut any_trainable = false;
        lm.visit(&mut |p| any_trainable |= p.trainable());
        assert!(!any_trainable);
    }

    #[test]
    fn short_run_lowers_held_out_perplexity() {
        let tok = Tokenizer::new();
        let describe = splits(Task::Describe);
        let qa = splits(Task::Qa);
        let corpus = Corpus::new(&[(Task::Describe, &describe), (Task::Qa, &qa)]).unwrap();
        let cfg = PretrainConfig { steps: 40, batch_size: 8, region: 8, warmup_steps: 5, ..PretrainConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let held: Vec<Document> = (0..16).map(|_| corpus.draw(&tok, &cfg, &mut rng).unwrap()).collect();
        let mut config = LmConfig::new(tok.vocab_size());
        config.layers = 2;
        let mut lm = ToyLm::new(config, 7);
        let before = perplexity(&lm, &held).unwrap();
        let mut losses = Vec::new();
        pretrain_lm(&mut lm, &corpus, &cfg, &mut |r| losses.push(r.loss)).unwrap();
        let after = perplexity(&lm, &held).unwrap();
        assert_eq!(losses.len(), 40);
        assert!(after < 0.5 * before, "{before} -> {after}");
    }
}
