//! Synthetic multi-modal tasks and their line-delimited storage.
//!
//! * `describe`: a few objects move around the grid; the caption lists them.
//! * `icl-map`: every group hides a private symbol-to-name mapping, so a
//!   query is only solvable from its group's demonstrations.
//! * `qa`: static scenes with questions about single cells.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::OBJECT_NAMES;
use crate::vision::Frame;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub group_id: u64,
    pub frames: Vec<Frame>,
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "describe")]
    Describe,
    #[serde(rename = "icl-map")]
    IclMap,
    #[serde(rename = "qa")]
    Qa,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Describe, Task::IclMap, Task::Qa];

    pub fn name(self) -> &'static str {
        match self {
            Task::Describe => "describe",
            Task::IclMap => "icl-map",
            Task::Qa => "qa",
        }
    }

    pub fn is_qa(self) -> bool {
        self == Task::Qa
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown task {s:?}; expected describe, icl-map or qa")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenSpec {
    pub task: Task,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub frames: usize,
    pub grid: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Phrasings of an icl-map group's word. Each member of a group uses a
/// different one, so one-to-many sampling always has distinct texts.
const MAP_PHRASES: [&str; 8] = [
    "a {}",
    "the {}",
    "see a {}",
    "see the {}",
    "that is a {}",
    "that is the {}",
    "you see a {}",
    "you see the {}",
];

const MAP_TRAIN: usize = 4;
const MAP_VAL: usize = 1;
const MAP_TEST: usize = 3;
const QA_QUESTIONS: usize = 4;

pub fn name_of(symbol: u8) -> &'static str {
    OBJECT_NAMES[symbol as usize - 1]
}

/// Canonical caption: objects sorted by symbol id, joined with "and".
pub fn caption(symbols: &[u8]) -> String {
    let mut s = symbols.to_vec();
    s.sort_unstable();
    s.iter().map(|&x| format!("a {}", name_of(x))).collect::<Vec<_>>().join(" and ")
}

pub fn cell_question(row: usize, col: usize) -> String {
    format!("what is in cell {row} {col} ?")
}

pub fn qa_text(question: &str, answer: &str) -> String {
    format!("Question: {question} Answer: {answer}")
}

fn random_cells(rng: &mut ChaCha8Rng, grid: usize, n: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = (0..grid).flat_map(|r| (0..grid).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells
}

fn scene(rng: &mut ChaCha8Rng, grid: usize, symbols: &[u8]) -> (Frame, Vec<((usize, usize), u8)>) {
    let mut f = Frame::blank(grid);
    let cells = random_cells(rng, grid, symbols.len());
    let placed: Vec<_> = cells.into_iter().zip(symbols.iter().copied()).collect();
    for &((r, c), s) in &placed {
        f.set(r, c, s);
    }
    (f, placed)
}

fn distinct_symbols(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<u8> {
    let mut all: Vec<u8> = (1..=OBJECT_NAMES.len() as u8).collect();
    all.shuffle(rng);
    let n = rng.random_range(lo..=hi);
    all.truncate(n);
    all
}

struct Ids {
    next: u64,
}

impl Ids {
    fn take(&mut self) -> u64 {
        self.next += 1;
        self.next - 1
    }
}

fn describe_sample(rng: &mut ChaCha8Rng, spec: &GenSpec, ids: &mut Ids) -> Sample {
    let symbols = distinct_symbols(rng, 2, 4);
    let frames = (0..spec.frames).map(|_| scene(rng, spec.grid, &symbols).0).collect();
    let label = caption(&symbols);
    let id = ids.take();
    Sample {
        id,
        group_id: id,
        frames,
        text: label.clone(),
        label,
        question: None,
    }
}

fn qa_group(rng: &mut ChaCha8Rng, spec: &GenSpec, ids: &mut Ids) -> Vec<Sample> {
    let symbols = distinct_symbols(rng, 2, 4);
    let (frame, placed) = scene(rng, spec.grid, &symbols);
    let group_id = ids.next;
    let asked = QA_QUESTIONS.min(placed.len());
    placed
        .iter()
        .take(asked)
        .map(|&((r, c), s)| {
            let question = cell_question(r, c);
            let answer = name_of(s).to_string();
            Sample {
                id: ids.take(),
                group_id,
                frames: vec![frame.clone(); spec.frames],
                text: qa_text(&question, &answer),
                label: answer,
                question: Some(question),
            }
        })
        .collect()
}

/// One icl-map group. The group's word cycles through the names with the
/// group index so the label marginal is exactly uniform; the symbol that
/// shows it, and the rest of the private mapping, are random.
fn map_group(rng: &mut ChaCha8Rng, spec: &GenSpec, index: usize, ids: &mut Ids) -> Vec<Sample> {
    let names = OBJECT_NAMES.len();
    let word = index % names;
    let mut mapping: Vec<usize> = (0..names).collect();
    mapping.shuffle(rng);
    let key = rng.random_range(0..names);
    let at = mapping.iter().position(|&m| m == word).expect("permutation");
    mapping.swap(at, key);
    let symbol = key as u8 + 1;
    let name = OBJECT_NAMES[mapping[key]];
    let group_id = ids.next;
    let mut phrases: Vec<usize> = (0..MAP_PHRASES.len()).collect();
    phrases.shuffle(rng);
    phrases
        .into_iter()
        .map(|p| {
            let frames = (0..spec.frames).map(|_| scene(rng, spec.grid, &[symbol]).0).collect();
            Sample {
                id: ids.take(),
                group_id,
                frames,
                text: MAP_PHRASES[p].replace("{}", name),
                label: format!("a {name}"),
                question: None,
            }
        })
        .collect()
}

/// Generates disjoint train/val/test splits from one seed.
///
/// icl-map groups span the splits (4 train, 1 val and 3 test members per
/// group), so evaluation queries meet words they have never been paired
/// with in training only through their own group's demonstrations.
pub fn generate(spec: &GenSpec) -> Result<Splits> {
    if spec.frames == 0 || spec.grid < 2 {
        return Err(Error::Usage("need at least one frame and a grid of at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut ids = Ids { next: 0 };
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    match spec.task {
        Task::Describe => {
            for (n, out) in [(spec.train, &mut splits.train), (spec.val, &mut splits.val), (spec.test, &mut splits.test)] {
                out.extend((0..n).map(|_| describe_sample(&mut rng, spec, &mut ids)));
            }
        }
        Task::Qa => {
            for (n, out) in [(spec.train, &mut splits.train), (spec.val, &mut splits.val), (spec.test, &mut splits.test)] {
                while out.len() < n {
                    out.extend(qa_group(&mut rng, spec, &mut ids));
                }
                out.truncate(n);
            }
        }
        Task::IclMap => {
            let groups = spec
                .train
                .div_ceil(MAP_TRAIN)
                .max(spec.val.div_ceil(MAP_VAL))
                .max(spec.test.div_ceil(MAP_TEST));
            for g in 0..groups {
                let members = map_group(&mut rng, spec, g, &mut ids);
                let mut it = members.into_iter();
                splits.train.extend(it.by_ref().take(MAP_TRAIN));
                splits.val.extend(it.by_ref().take(MAP_VAL));
                splits.test.extend(it.take(MAP_TEST));
            }
            splits.train.truncate(spec.train);
            splits.val.truncate(spec.val);
            splits.test.truncate(spec.test);
        }
    }
    Ok(splits)
}

pub fn to_jsonl(samples: &[Sample]) -> String {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("samples serialize"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str, what: &str) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(line).map_err(|e| Error::parse(format!("{what} line {}", i + 1), e))?;
        if s.label.is_empty() {
            return Err(Error::parse(format!("{what} line {}", i + 1), "empty label"));
        }
        for f in &s.frames {
            f.validate()?;
        }
        if !seen.insert(s.id) {
            return Err(Error::parse(format!("{what} line {}", i + 1), format!("duplicate id {}", s.id)));
        }
        samples.push(s);
    }
    Ok(samples)
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save_samples(path: &Path, samples: &[Sample]) -> Result<()> {
    write_atomic(path, to_jsonl(samples).as_bytes())
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    from_jsonl(&read_to_string(path)?, &path.display().to_string())
}

/// `{dir}/{task}/{split}.jsonl`
pub fn split_path(dir: &Path, task: Task, split: &str) -> std::path::PathBuf {
    dir.join(task.name()).join(format!("{split}.jsonl"))
}

pub fn save_splits(dir: &Path, task: Task, splits: &Splits) -> Result<()> {
    save_samples(&split_path(dir, task, "train"), &splits.train)?;
    save_samples(&split_path(dir, task, "val"), &splits.val)?;
    save_samples(&split_path(dir, task, "test"), &splits.test)
}

pub fn load_splits(dir: &Path, task: Task) -> Result<Splits> {
    Ok(Splits {
        train: load_samples(&split_path(dir, task, "train"))?,
        val: load_samples(&split_path(dir, task, "val"))?,
        test: load_samples(&split_path(dir, task, "test"))?,
    })
}
