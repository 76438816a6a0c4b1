use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

/// A named tensor owned by a model. Frozen parameters never receive a
/// gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
    grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            name: name.into(),
            value: Arc::new(value),
            trainable,
            grad: None,
        }
    }

    /// Weight matrix with N(0, std^2) entries.
    pub fn randn<R: Rng + ?Sized>(
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self::new(name, Tensor::randn(shape, std, rng), true)
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::zeros(shape), true)
    }

    pub fn ones(name: impl Into<String>, shape: &[usize]) -> Self {
        Self::new(name, Tensor::full(shape, 1.0), true)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn freeze(&mut self) {
        self.trainable = false;
        self.grad = None;
    }

    pub fn unfreeze(&mut self) {
        self.trainable = true;
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor) -> Result<()> {
        if value.shape() != self.value.shape() {
            return Err(Error::shape("set_value", self.value.shape(), value.shape()));
        }
        self.value = Arc::new(value);
        Ok(())
    }

    pub(crate) fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set_grad(&mut self, grad: Tensor) -> Result<()> {
        if !self.trainable {
            return Err(Error::contract(format!("{} is frozen and cannot hold a gradient", self.name)));
        }
        if grad.shape() != self.value.shape() {
            return Err(Error::shape("set_grad", self.value.shape(), grad.shape()));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Tensor> {
        self.grad.take()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value().numel());
        n
    }

    fn freeze_all(&mut self) {
        self.visit_mut(&mut |p| p.freeze());
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.clear_grad());
    }
}

/// Affine layer `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self::with_std(prefix, fan_in, fan_out, std, rng)
    }

    pub fn with_std<R: Rng + ?Sized>(
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: Parameter::randn(format!("{prefix}.weight"), &[fan_in, fan_out], std, rng),
            bias: Parameter::zeros(format!("{prefix}.bias"), &[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value().shape()[1]
    }
}

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::ones(format!("{prefix}.gamma"), &[dim]),
            beta: Parameter::zeros(format!("{prefix}.beta"), &[dim]),
        }
    }
}

impl Module for LayerNorm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Two-layer GELU feed-forward stack.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(prefix: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(&format!("{prefix}.up"), dim, hidden, rng),
            down: Linear::new(&format!("{prefix}.down"), hidden, dim, rng),
        }
    }
}

impl Module for FeedForward {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.up.visit(f);
        self.down.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.up.visit_mut(f);
        self.down.visit_mut(f);
    }
}
