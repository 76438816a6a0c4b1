#![allow(dead_code)]

pub mod gradcheck;
pub mod rigged;
pub mod structure;

use mmict::data::{generate, GenSpec, Sample, Splits, Task};
use mmict::lm::{LmConfig, ToyLm};
use mmict::mhub::MhubConfig;
use mmict::model::Model;
use mmict::tokenizer::Tokenizer;
use mmict::vision::ImageEncoder;

/// A small untrained model; fast enough for exhaustive structural checks.
pub fn tiny_model(seed: u64) -> Model {
    let vocab = Tokenizer::new().vocab_size();
    let lm = ToyLm::new(
        LmConfig {
            vocab,
            width: 16,
            layers: 1,
            heads: 2,
            ffn_hidden: 24,
            max_context: 512,
        },
        seed,
    );
    let hub = MhubConfig {
        blocks: 2,
        queries: 4,
        width: 12,
        heads: 2,
        ffn_hidden: 16,
        encoder_width: 8,
        lm_width: 16,
        vocab,
        max_text_len: 32,
    };
    Model::new(ImageEncoder::new(4, 8, seed + 1), lm, hub, seed + 2).unwrap()
}

pub fn splits(task: Task, train: usize, test: usize, frames: usize, seed: u64) -> Splits {
    generate(&GenSpec {
        task,
        train,
        val: 0,
        test,
        frames,
        grid: 4,
        seed,
    })
    .unwrap()
}

pub fn train_set(task: Task, n: usize, seed: u64) -> Vec<Sample> {
    splits(task, n, 0, 2, seed).train
}

/// Two-sentence corpus with pooled n-gram counts worked out by hand:
///   1-grams (5 + 4) / (5 + 6), 2-grams (4 + 1) / (4 + 5),
///   3-grams (3 + 0) / (3 + 4), 4-grams (2 + 0) / (2 + 3).
/// Closest reference lengths are 2 (a tie with 8 goes to the shorter)
/// and 6, so r = 8 < c = 11 and there is no brevity penalty.
pub fn bleu_fixture() -> (Vec<String>, Vec<Vec<String>>, f64) {
    let s = |x: &str| x.to_string();
    let cands = vec![s("a cat and a dog"), s("the dog sat on a mat")];
    let refs = vec![
        vec![s("a cat and a dog and a fox"), s("a dog")],
        vec![s("the cat sat on the mat")],
    ];
    let expected = ((9.0 / 11.0) * (5.0 / 9.0) * (3.0 / 7.0) * (2.0 / 5.0) as f64).powf(0.25);
    (cands, refs, expected)
}
