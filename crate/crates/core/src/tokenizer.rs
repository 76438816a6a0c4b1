//! Closed whitespace vocabulary covering every string the synthetic tasks
//! and instruction templates can produce.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const EOC: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<eoc>"];

/// Names of the visual objects, indexed by `symbol - 1`.
pub const OBJECT_NAMES: [&str; 10] = ["cat", "dog", "bird", "fish", "cow", "pig", "fox", "owl", "bee", "ant"];

pub const IMAGE_TEMPLATES: [&str; 6] = [
    "A short image caption:",
    "A image that shows",
    "Write a short description for the image.",
    "Briefly describe the content of the image.",
    "Use a few words to illustrate what is happening in the image.",
    "Can you briefly explain what you see in the image?",
];

pub const VIDEO_TEMPLATES: [&str; 6] = [
    "A short video caption:",
    "A video that shows",
    "Write a short description for the video.",
    "Briefly describe the content of the video.",
    "Use a few words to illustrate what is happening in the video.",
    "Can you briefly explain what you see in the video?",
];

const EXTRA_WORDS: [&str; 12] = ["a", "and", "Question:", "Answer:", "cell", "0", "1", "2", "3", "?", "the", "see"];

#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut ids = HashMap::new();
        let all = SPECIALS
            .iter()
            .chain(EXTRA_WORDS.iter())
            .chain(OBJECT_NAMES.iter())
            .copied()
            .chain(IMAGE_TEMPLATES.iter().chain(VIDEO_TEMPLATES.iter()).flat_map(|t| t.split_whitespace()));
        for w in all {
            if !ids.contains_key(w) {
                ids.insert(w.to_string(), words.len());
                words.push(w.to_string());
            }
        }
        Self { words, ids }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids.get(word).copied().ok_or_else(|| Error::Lexical(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins words with single spaces, stopping at the first EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn object_token(&self, symbol: u8) -> usize {
        self.ids[OBJECT_NAMES[symbol as usize - 1]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_repeated() {
        let t = Tokenizer::new();
        assert!(t.tokenize("").unwrap().is_empty());
        let ids = t.tokenize("a a a").unwrap();
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| i == ids[0]));
    }

    #[test]
    fn every_word_round_trips() {
        let t = Tokenizer::new();
        for (i, w) in t.words().iter().enumerate() {
            assert_eq!(t.tokenize(w).unwrap(), vec![i]);
            if i != EOS {
                assert_eq!(t.detokenize(&[i]), *w);
            }
        }
    }

    #[test]
    fn specials_are_reserved() {
        let t = Tokenizer::new();
        assert_eq!(t.id("<pad>").unwrap(), PAD);
        assert_eq!(t.id("<bos>").unwrap(), BOS);
        assert_eq!(t.id("<eos>").unwrap(), EOS);
        assert_eq!(t.id("<eoc>").unwrap(), EOC);
    }

    #[test]
    fn unknown_word_is_named() {
        let err = Tokenizer::new().tokenize("a zebra").unwrap_err();
        assert!(matches!(err, Error::Lexical(ref w) if w == "zebra"));
    }

    #[test]
    fn vocabulary_stays_small() {
        let t = Tokenizer::new();
        assert!(t.vocab_size() <= 64, "{}", t.vocab_size());
        for tpl in IMAGE_TEMPLATES.iter().chain(VIDEO_TEMPLATES.iter()) {
            assert_eq!(t.detokenize(&t.tokenize(tpl).unwrap()), *tpl);
        }
    }
}
