//! Decoding and evaluation metrics.

use std::cmp::Ordering;
use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{Sample, Task};
use crate::demo::{self, ContextPlan, DemoPool, DemoVariant, Episode, Strategy};
use crate::error::{Error, Result};
use crate::lm::Decoder;
use crate::model::Model;
use crate::tensor::{log_softmax_row, Tensor};
use crate::tokenizer::EOS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_new_tokens: usize,
    /// Exponent on hypothesis length when ranking beams; `None` is the
    /// plain mean log-probability.
    pub length_penalty: Option<f64>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_width: 5,
            max_new_tokens: 16,
            length_penalty: None,
        }
    }
}

impl GenConfig {
    pub fn greedy() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::contract("beam width must be at least 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::contract("max_new_tokens must be at least 1"));
        }
        Ok(())
    }
}

/// Incremental next-token model. Cloning forks the state.
pub trait StepDecoder: Clone {
    /// Consumes `token` and returns the logits for the following position.
    fn feed(&mut self, token: usize) -> Result<Vec<f64>>;
}

impl StepDecoder for Decoder<'_> {
    fn feed(&mut self, token: usize) -> Result<Vec<f64>> {
        self.push_tokens(&[token])
    }
}

/// A finished decode. `tokens` ends with EOS unless the budget ran out.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    pub fn mean_log_prob(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }
}

fn argmax(row: &[f64]) -> usize {
    // First maximum wins, so ties go to the smaller id.
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_search<D: StepDecoder>(mut state: D, mut logits: Vec<f64>, max_new: usize, eos: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    for step in 0..max_new {
        let t = argmax(&logits);
        log_prob += log_softmax_row(&logits)[t];
        tokens.push(t);
        if t == eos || step + 1 == max_new {
            break;
        }
        logits = state.feed(t)?;
    }
    Ok(Hypothesis { tokens, log_prob })
}

struct Beam<D> {
    tokens: Vec<usize>,
    log_prob: f64,
    done: bool,
    state: Option<(D, Vec<f64>)>,
}

fn rank_score(log_prob: f64, len: usize, penalty: Option<f64>) -> f64 {
    let len = len.max(1) as f64;
    log_prob / penalty.map_or(len, |a| len.powf(a))
}

/// Higher score first, then the lexicographically smaller sequence, which
/// also puts a prefix before its extensions.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

pub fn beam_search<D: StepDecoder>(
    state: D,
    logits: Vec<f64>,
    width: usize,
    max_new: usize,
    eos: usize,
    length_penalty: Option<f64>,
) -> Result<Hypothesis> {
    if width == 0 || max_new == 0 {
        return Err(Error::contract("beam search needs a positive width and budget"));
    }
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        done: false,
        state: Some((state, logits)),
    }];
    for _ in 0..max_new {
        // (parent, token or None to carry a finished beam, log prob, tokens)
        let mut candidates: Vec<(usize, Option<usize>, f64, Vec<usize>)> = Vec::new();
        for (i, b) in beams.iter().enumerate() {
            if b.done {
                candidates.push((i, None, b.log_prob, b.tokens.clone()));
                continue;
            }
            let (_, logits) = b.state.as_ref().expect("live beams keep their state");
            for (t, lp) in log_softmax_row(logits).into_iter().enumerate() {
                let mut tokens = b.tokens.clone();
                tokens.push(t);
                candidates.push((i, Some(t), b.log_prob + lp, tokens));
            }
        }
        candidates.sort_by(|a, b| {
            rank(
                (rank_score(a.2, a.3.len(), length_penalty), &a.3),
                (rank_score(b.2, b.3.len(), length_penalty), &b.3),
            )
        });
        candidates.truncate(width);
        let mut next = Vec::with_capacity(candidates.len());
        for (parent, token, log_prob, tokens) in candidates {
            let Some(t) = token else {
                next.push(Beam {
                    tokens,
                    log_prob,
                    done: true,
                    state: None,
                });
                continue;
            };
            let done = t == eos || tokens.len() == max_new;
            let state = if done {
                None
            } else {
                let (s, _) = beams[parent].state.as_ref().expect("live parent");
                let mut s = s.clone();
                let logits = s.feed(t)?;
                Some((s, logits))
            };
            next.push(Beam {
                tokens,
                log_prob,
                done,
                state,
            });
        }
        beams = next;
        if beams.iter().all(|b| b.done) {
            break;
        }
    }
    let best = beams.into_iter().next().expect("at least one beam");
    Ok(Hypothesis {
        tokens: best.tokens,
        log_prob: best.log_prob,
    })
}

pub fn decode<D: StepDecoder>(state: D, logits: Vec<f64>, gen: &GenConfig, eos: usize) -> Result<Hypothesis> {
    gen.validate()?;
    match gen.mode {
        DecodeMode::Greedy => greedy_search(state, logits, gen.max_new_tokens, eos),
        DecodeMode::Beam => beam_search(state, logits, gen.beam_width, gen.max_new_tokens, eos, gen.length_penalty),
    }
}

/// Lowercase, single spaces, no trailing punctuation.
pub fn normalize_answer(s: &str) -> String {
    let joined = s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    joined
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_string()
}

pub fn exact_match(prediction: &str, label: &str) -> u8 {
    u8::from(normalize_answer(prediction) == normalize_answer(label))
}

fn ngram_counts(words: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with four n-gram orders, uniform weights and no
/// smoothing.
pub fn bleu4(candidates: &[String], references: &[Vec<String>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("BLEU needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract("one reference set per candidate"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            return Err(Error::contract("empty reference set"));
        }
        let c: Vec<&str> = cand.split_whitespace().collect();
        let rs: Vec<Vec<&str>> = refs.iter().map(|r| r.split_whitespace().collect()).collect();
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("non-empty");
        for n in 1..=4 {
            let counts = ngram_counts(&c, n);
            let mut max_ref: HashMap<Vec<String>, usize> = HashMap::new();
            for r in &rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &counts {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let brevity = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(brevity * log_precision.exp())
}

/// Evaluation context for `episode`: the query with its instruction alone
/// when `with_demos` is false, otherwise the episode's demonstrations too
/// (in the fused-text form when the variant has no demonstration format).
pub fn eval_plan(model: &Model, episode: &Episode, variant: DemoVariant, with_demos: bool) -> Result<ContextPlan> {
    if with_demos {
        demo::plan_injected(model, episode, variant, false)
    } else {
        let bare = Episode::new(Vec::new(), episode.query.clone(), episode.instruction.clone())?;
        demo::plan_context(model, &bare, variant, false)
    }
}

fn soft_prefixes(model: &Model, episodes: &[&Episode], plans: &[ContextPlan]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = demo::realize(model, &mut tape, episodes, plans)?;
    Ok(vars.into_iter().map(|v| tape.value(v).clone()).collect())
}

fn decode_plan(model: &Model, prefix: &Tensor, plan: &ContextPlan, gen: &GenConfig) -> Result<Hypothesis> {
    let mut decoder = model.lm.decoder();
    let logits = decoder.prefill(prefix, &plan.instruction)?;
    decode(decoder, logits, gen, EOS)
}

/// Generates the answer text for one episode.
pub fn generate(model: &Model, episode: &Episode, variant: DemoVariant, with_demos: bool, gen: &GenConfig) -> Result<String> {
    let plan = eval_plan(model, episode, variant, with_demos)?;
    let prefix = soft_prefixes(model, &[episode], std::slice::from_ref(&plan))?;
    let hyp = decode_plan(model, &prefix[0], &plan, gen)?;
    Ok(model.tokenizer.detokenize(&hyp.tokens))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub task: Task,
    pub variant: DemoVariant,
    pub n_e: usize,
    pub strategy: Strategy,
    pub with_demos: bool,
    pub seed: u64,
    pub gen: GenConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub prediction: String,
    pub label: String,
    pub correct: u8,
    pub demos: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub bleu4: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub records: Vec<SampleRecord>,
    pub metrics: Metrics,
}

/// Accuracy always; BLEU for caption-style tasks.
pub fn aggregate(task: Task, records: &[SampleRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::contract("no records to aggregate"));
    }
    let accuracy = records.iter().map(|r| r.correct as f64).sum::<f64>() / records.len() as f64;
    let bleu4 = if task.is_qa() {
        None
    } else {
        let cands: Vec<String> = records.iter().map(|r| r.prediction.clone()).collect();
        let refs: Vec<Vec<String>> = records.iter().map(|r| vec![r.label.clone()]).collect();
        Some(bleu4(&cands, &refs)?)
    };
    Ok(Metrics { accuracy, bleu4 })
}

fn sample_seed(seed: u64, id: u64) -> u64 {
    seed ^ id.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

const EVAL_CHUNK: usize = 16;

/// Evaluates every sample in `samples`. Demonstrations, when used, are
/// drawn from `demo_pool`; each sample's draws depend only on the seed and
/// its id.
pub fn evaluate(model: &Model, samples: &[Sample], demo_pool: &DemoPool<'_>, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.gen.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("empty evaluation set"));
    }
    let n_e = if cfg.with_demos { cfg.n_e } else { 0 };
    let mut episodes = Vec::with_capacity(samples.len());
    for s in samples {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, s.id));
        let demos = if n_e > 0 {
            demo_pool.sample(s, n_e, cfg.strategy, &mut rng)?
        } else {
            Vec::new()
        };
        let instruction = demo::pick_instruction(cfg.task, s, &mut rng);
        episodes.push(Episode::new(demos, s.clone(), instruction)?);
    }
    let mut records = Vec::with_capacity(samples.len());
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let refs: Vec<&Episode> = chunk.iter().collect();
        let plans = refs
            .iter()
            .map(|e| eval_plan(model, e, cfg.variant, cfg.with_demos))
            .collect::<Result<Vec<_>>>()?;
        let prefixes = soft_prefixes(model, &refs, &plans)?;
        for ((ep, plan), prefix) in chunk.iter().zip(&plans).zip(&prefixes) {
            let hyp = decode_plan(model, prefix, plan, &cfg.gen)?;
            let prediction = model.tokenizer.detokenize(&hyp.tokens);
            records.push(SampleRecord {
                id: ep.query.id,
                correct: exact_match(&prediction, &ep.query.label),
                prediction,
                label: ep.query.label.clone(),
                demos: ep.demos.iter().map(|d| d.id).collect(),
            });
        }
    }
    let metrics = aggregate(cfg.task, &records)?;
    Ok(EvalReport {
        config: cfg.clone(),
        records,
        metrics,
    })
}
