//! Transformer building blocks shared by the language model and the fusion
//! hub, in a taped form for training and a plain form for decoding.

use rand::Rng;

use crate::autograd::{self, AttnLayout, Tape, Var};
use crate::error::Result;
use crate::param::{FeedForward, LayerNorm, Linear, Module, Parameter};
use crate::tensor::{self, gemm, Tensor, LAYER_NORM_EPS};

pub fn linear(tape: &mut Tape, layer: &Linear, x: Var) -> Result<Var> {
    let w = tape.param(&layer.weight);
    let b = tape.param(&layer.bias);
    tape.linear(x, w, Some(b))
}

pub fn layer_norm(tape: &mut Tape, ln: &LayerNorm, x: Var) -> Result<Var> {
    let g = tape.param(&ln.gamma);
    let b = tape.param(&ln.beta);
    tape.layer_norm(x, g, b, LAYER_NORM_EPS)
}

pub fn feed_forward(tape: &mut Tape, ffn: &FeedForward, x: Var) -> Result<Var> {
    let h = linear(tape, &ffn.up, x)?;
    let h = tape.gelu(h);
    linear(tape, &ffn.down, h)
}

pub fn apply_linear(layer: &Linear, x: &Tensor) -> Result<Tensor> {
    let (n, i) = x.require_matrix("linear")?;
    if i != layer.fan_in() {
        return Err(crate::Error::shape("linear", x.shape(), layer.weight.value().shape()));
    }
    let o = layer.fan_out();
    let mut out = Tensor::zeros(&[n, o]);
    for row in out.data_mut().chunks_mut(o.max(1)) {
        row.copy_from_slice(layer.bias.value().data());
    }
    gemm(n, i, o, x.data(), false, layer.weight.value().data(), false, out.data_mut(), 1.0);
    Ok(out)
}

pub fn apply_layer_norm(ln: &LayerNorm, x: &Tensor) -> Result<Tensor> {
    tensor::layer_norm(x, ln.gamma.value(), ln.beta.value(), LAYER_NORM_EPS)
}

pub fn apply_feed_forward(ffn: &FeedForward, x: &Tensor) -> Result<Tensor> {
    let h = tensor::gelu(&apply_linear(&ffn.up, x)?);
    apply_linear(&ffn.down, &h)
}

pub(crate) fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

/// Multi-head attention with separate query, key, value and output maps.
/// Keys and values may come from a source of a different width.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(prefix: &str, width: usize, source_width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::new(&format!("{prefix}.query"), width, width, rng),
            key: Linear::new(&format!("{prefix}.key"), source_width, width, rng),
            value: Linear::new(&format!("{prefix}.value"), source_width, width, rng),
            output: Linear::new(&format!("{prefix}.output"), width, width, rng),
            heads,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, source: Var, layout: &AttnLayout) -> Result<Var> {
        let q = linear(tape, &self.query, x)?;
        let k = linear(tape, &self.key, source)?;
        let v = linear(tape, &self.value, source)?;
        let a = tape.attention(q, k, v, self.heads, layout)?;
        linear(tape, &self.output, a)
    }

    /// Projected keys and values for a source, for caching.
    pub fn keys_values(&self, source: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((apply_linear(&self.key, source)?, apply_linear(&self.value, source)?))
    }

    pub fn attend(&self, x: &Tensor, keys: &Tensor, values: &Tensor, layout: &AttnLayout) -> Result<Tensor> {
        let q = apply_linear(&self.query, x)?;
        let (a, _) = autograd::attention_forward(&q, keys, values, self.heads, layout);
        apply_linear(&self.output, &a)
    }
}

impl Module for Attention {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
    }
}
