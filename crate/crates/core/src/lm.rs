//! Small decoder-only language model that accepts soft embedding rows in
//! front of its token inputs.
//!
//! Every input starts with the `<bos>` token at position 0, as real decoder
//! LMs do. It is part of the model rather than of the caller's input: logits
//! are returned for the caller's rows only and lengths exclude it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnLayout, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, add_in_place, Attention};
use crate::param::{FeedForward, LayerNorm, Linear, Module, Parameter};
use crate::tensor::Tensor;
use crate::tokenizer::BOS;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub max_context: usize,
}

impl LmConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            vocab,
            width: 64,
            layers: 4,
            heads: 4,
            ffn_hidden: 128,
            max_context: 512,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmBlock {
    pub norm1: LayerNorm,
    pub attention: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl Module for LmBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.norm1.visit(f);
        self.attention.visit(f);
        self.norm2.visit(f);
        self.ffn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm1.visit_mut(f);
        self.attention.visit_mut(f);
        self.norm2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct ToyLm {
    pub config: LmConfig,
    pub token_embedding: Parameter,
    pub position_embedding: Parameter,
    pub blocks: Vec<LmBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

/// One sequence of a batched forward pass: optional soft rows followed by
/// token ids.
pub struct LmSequence {
    pub prefix: Option<Var>,
    pub tokens: Vec<usize>,
}

impl ToyLm {
    pub fn new(config: LmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("lm.block{i}");
                LmBlock {
                    norm1: LayerNorm::new(&format!("{p}.norm1"), d),
                    attention: Attention::new(&format!("{p}.attn"), d, d, config.heads, &mut rng),
                    norm2: LayerNorm::new(&format!("{p}.norm2"), d),
                    ffn: FeedForward::new(&format!("{p}.ffn"), d, config.ffn_hidden, &mut rng),
                }
            })
            .collect();
        Self {
            token_embedding: Parameter::randn("lm.token_embedding", &[config.vocab, d], 0.3, &mut rng),
            position_embedding: Parameter::randn("lm.position_embedding", &[config.max_context, d], 0.05, &mut rng),
            blocks,
            final_norm: LayerNorm::new("lm.final_norm", d),
            head: Linear::new("lm.head", d, config.vocab, &mut rng),
            config,
        }
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    /// Frozen token-embedding rows for `tokens`.
    pub fn embed_tokens(&self, tokens: &[usize]) -> Result<Tensor> {
        let table = self.token_embedding.value();
        let d = self.width();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= self.vocab() {
                return Err(Error::contract(format!("token {t} outside a vocabulary of {}", self.vocab())));
            }
            data.extend_from_slice(table.row(t));
        }
        Tensor::new(vec![tokens.len(), d], data)
    }

    /// Logits for every position of every sequence, stacked in order.
    pub fn forward(&self, tape: &mut Tape, seqs: &[LmSequence]) -> Result<(Var, Vec<usize>)> {
        let d = self.width();
        let table = tape.param(&self.token_embedding);
        let positions = tape.param(&self.position_embedding);
        let bos = tape.select_rows(table, &[BOS])?;
        let mut parts = Vec::new();
        let mut position_ids = Vec::new();
        let mut keep = Vec::new();
        let mut lengths = Vec::with_capacity(seqs.len());
        let mut blocks = Vec::with_capacity(seqs.len());
        for s in seqs {
            parts.push(bos);
            let mut len = s.tokens.len();
            if let Some(p) = s.prefix {
                let shape = tape.shape(p);
                if shape.len() != 2 || shape[1] != d {
                    return Err(Error::shape("lm prefix", shape, &[0, d]));
                }
                len += shape[0];
                if shape[0] > 0 {
                    parts.push(p);
                }
            }
            if len == 0 {
                return Err(Error::contract("language model called on empty input"));
            }
            if len + 1 > self.config.max_context {
                return Err(Error::ContextLength {
                    len: len + 1,
                    max: self.config.max_context,
                });
            }
            if !s.tokens.is_empty() {
                parts.push(tape.select_rows(table, &s.tokens)?);
            }
            let start = position_ids.len();
            keep.extend(start + 1..=start + len);
            position_ids.extend(0..=len);
            blocks.push(len + 1);
            lengths.push(len);
        }
        let x = tape.concat_rows(&parts)?;
        let pos = tape.select_rows(positions, &position_ids)?;
        let mut x = tape.add(x, pos)?;
        let layout = AttnLayout::blocks(&blocks, true);
        for block in &self.blocks {
            let h = layers::layer_norm(tape, &block.norm1, x)?;
            let a = block.attention.forward(tape, h, h, &layout)?;
            x = tape.add(x, a)?;
            let h = layers::layer_norm(tape, &block.norm2, x)?;
            let f = layers::feed_forward(tape, &block.ffn, h)?;
            x = tape.add(x, f)?;
        }
        let x = tape.select_rows(x, &keep)?;
        let h = layers::layer_norm(tape, &self.final_norm, x)?;
        Ok((layers::linear(tape, &self.head, h)?, lengths))
    }

    /// Logits for a single soft prefix plus tokens.
    pub fn logits(&self, prefix: &Tensor, tokens: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = tape.constant(prefix.clone());
        let (out, _) = self.forward(
            &mut tape,
            &[LmSequence {
                prefix: Some(p),
                tokens: tokens.to_vec(),
            }],
        )?;
        Ok(tape.value(out).clone())
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            lm: self,
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
        }
    }
}

impl Module for ToyLm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.token_embedding);
        f(&self.position_embedding);
        for b in &self.blocks {
            b.visit(f);
        }
        self.final_norm.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.token_embedding);
        f(&mut self.position_embedding);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.final_norm.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// Incremental decoding state with cached keys and values per block.
#[derive(Clone)]
pub struct Decoder<'a> {
    lm: &'a ToyLm,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl Decoder<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends input rows (before positional embeddings) and returns the
    /// logits of the last one. The first call feeds `<bos>` ahead of them.
    pub fn extend(&mut self, rows: &Tensor) -> Result<Vec<f64>> {
        let lm = self.lm;
        let d = lm.width();
        let (n, w) = rows.require_matrix("decoder input")?;
        if w != d {
            return Err(Error::shape("decoder input", rows.shape(), &[n, d]));
        }
        if n == 0 {
            return Err(Error::contract("decoder extended with no rows"));
        }
        if self.len == 0 {
            let mut data = lm.token_embedding.value().row(BOS).to_vec();
            data.extend_from_slice(rows.data());
            return self.feed(&Tensor::new(vec![n + 1, d], data)?);
        }
        self.feed(rows)
    }

    fn feed(&mut self, rows: &Tensor) -> Result<Vec<f64>> {
        let lm = self.lm;
        let d = lm.width();
        let n = rows.rows();
        let total = self.len + n;
        if total > lm.config.max_context {
            return Err(Error::ContextLength {
                len: total,
                max: lm.config.max_context,
            });
        }
        let mut x = rows.clone();
        let pos = lm.position_embedding.value();
        for (i, row) in x.data_mut().chunks_mut(d).enumerate() {
            for (a, b) in row.iter_mut().zip(pos.row(self.len + i)) {
                *a += b;
            }
        }
        let layout = AttnLayout::single(n, total, true);
        for (l, block) in lm.blocks.iter().enumerate() {
            let h = layers::apply_layer_norm(&block.norm1, &x)?;
            let (k, v) = block.attention.keys_values(&h)?;
            self.keys[l].extend_from_slice(k.data());
            self.values[l].extend_from_slice(v.data());
            let keys = Tensor::new(vec![total, d], self.keys[l].clone())?;
            let values = Tensor::new(vec![total, d], self.values[l].clone())?;
            let a = block.attention.attend(&h, &keys, &values, &layout)?;
            add_in_place(&mut x, &a);
            let h = layers::apply_layer_norm(&block.norm2, &x)?;
            let f = layers::apply_feed_forward(&block.ffn, &h)?;
            add_in_place(&mut x, &f);
        }
        self.len = total;
        let last = Tensor::new(vec![1, d], x.row(n - 1).to_vec())?;
        let h = layers::apply_layer_norm(&lm.final_norm, &last)?;
        Ok(layers::apply_linear(&lm.head, &h)?.into_data())
    }

    pub fn push_tokens(&mut self, tokens: &[usize]) -> Result<Vec<f64>> {
        let rows = self.lm.embed_tokens(tokens)?;
        self.extend(&rows)
    }

    /// Feeds a soft prefix followed by tokens; returns the last logits.
    pub fn prefill(&mut self, prefix: &Tensor, tokens: &[usize]) -> Result<Vec<f64>> {
        let rows = if tokens.is_empty() {
            prefix.clone()
        } else {
            let t = self.lm.embed_tokens(tokens)?;
            let mut data = prefix.data().to_vec();
            data.extend_from_slice(t.data());
            Tensor::new(vec![prefix.rows() + tokens.len(), self.lm.width()], data)?
        };
        self.extend(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny() -> ToyLm {
        ToyLm::new(
            LmConfig {
                vocab: 11,
                width: 8,
                layers: 2,
                heads: 2,
                ffn_hidden: 16,
                max_context: 20,
            },
            5,
        )
    }

    #[test]
    fn bos_only_shape() {
        let lm = tiny();
        let out = lm.logits(&Tensor::zeros(&[0, 8]), &[BOS]).unwrap();
        assert_eq!(out.shape(), &[1, 11]);
    }

    #[test]
    fn causal_mask() {
        let lm = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let prefix = Tensor::randn(&[3, 8], 1.0, &mut rng);
            let tokens: Vec<usize> = (0..6).map(|_| rng.random_range(0..11)).collect();
            let base = lm.logits(&prefix, &tokens).unwrap();
            let j = rng.random_range(0..6);
            let mut changed = tokens.clone();
            changed[j] = (changed[j] + 1) % 11;
            let other = lm.logits(&prefix, &changed).unwrap();
            let cut = (3 + j) * 11;
            assert_eq!(&base.data()[..cut], &other.data()[..cut]);
            assert_ne!(&base.data()[cut..], &other.data()[cut..]);
        }
    }

    #[test]
    fn context_limit() {
        let lm = tiny();
        let err = lm.logits(&Tensor::zeros(&[15, 8]), &[0; 6]).unwrap_err();
        assert!(matches!(err, Error::ContextLength { len: 22, max: 20 }));
    }

    #[test]
    fn rigged_weights_reduce_to_linear_map() {
        let mut lm = tiny();
        lm.visit_mut(&mut |p| {
            let zeros = Tensor::zeros(p.value().shape());
            p.set_value(zeros).unwrap();
        });
        lm.final_norm.gamma.set_value(Tensor::full(&[8], 1.0)).unwrap();
        let mut table = Tensor::zeros(&[11, 8]);
        for t in 0..11 {
            table.data_mut()[t * 8 + t % 8] = 1.0;
        }
        lm.token_embedding.set_value(table).unwrap();
        let mut head = Tensor::zeros(&[8, 11]);
        for j in 0..8 {
            head.data_mut()[j * 11 + j] = 2.0;
        }
        lm.head.weight.set_value(head).unwrap();
        // A one-hot row e_k normalizes to sqrt(7) at k and -1/sqrt(7)
        // elsewhere (eps aside), so the head doubles those values.
        let out = lm.logits(&Tensor::zeros(&[0, 8]), &[3]).unwrap();
        let (mean, var) = (1.0 / 8.0, 7.0 / 64.0);
        let rstd = 1.0 / (var + crate::tensor::LAYER_NORM_EPS).sqrt();
        for j in 0..11 {
            let expect = if j < 8 { 2.0 * ((if j == 3 { 1.0 } else { 0.0 }) - mean) * rstd } else { 0.0 };
            assert!((out.at(0, j) - expect).abs() < 1e-12, "{j}");
        }
    }

    #[test]
    fn decoder_matches_full_forward() {
        let lm = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prefix = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let tokens = [3, 1, 4, 1, 5];
        let full = lm.logits(&prefix, &tokens).unwrap();
        let mut dec = lm.decoder();
        let first = dec.prefill(&prefix, &tokens[..2]).unwrap();
        let row = 5;
        for (a, b) in first.iter().zip(full.row(row)) {
            assert!((a - b).abs() < 1e-10);
        }
        for (i, &t) in tokens[2..].iter().enumerate() {
            let step = dec.push_tokens(&[t]).unwrap();
            for (a, b) in step.iter().zip(full.row(row + 1 + i)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        // Nine rows fed after <bos>.
        assert_eq!(dec.len(), 10);
    }

    #[test]
    fn batched_sequences_do_not_interact() {
        let lm = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p1 = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let p2 = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut tape = Tape::new();
        let v1 = tape.constant(p1.clone());
        let v2 = tape.constant(p2.clone());
        let (out, lengths) = lm
            .forward(
                &mut tape,
                &[
                    LmSequence { prefix: Some(v1), tokens: vec![1, 2] },
                    LmSequence { prefix: Some(v2), tokens: vec![3] },
                ],
            )
            .unwrap();
        assert_eq!(lengths, vec![4, 6]);
        let a = lm.logits(&p1, &[1, 2]).unwrap();
        let b = lm.logits(&p2, &[3]).unwrap();
        let all = tape.value(out);
        assert!(all.data()[..44].iter().zip(a.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(all.data()[44..].iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
