//! The full system: frozen encoder and language model, the trainable hub,
//! and the learned separator row placed after each demonstration.

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::lm::ToyLm;
use crate::mhub::{MHub, MhubConfig};
use crate::param::{Module, Parameter};
use crate::tensor::Tensor;
use crate::tokenizer::{Tokenizer, EOC};
use crate::vision::ImageEncoder;

#[derive(Clone, Debug)]
pub struct Model {
    pub tokenizer: Tokenizer,
    pub encoder: ImageEncoder,
    pub lm: ToyLm,
    pub hub: MHub,
    pub eoc: Parameter,
}

impl Model {
    /// Assembles a model around an already trained language model. The
    /// encoder and language model are frozen here, whatever their state.
    pub fn new(mut encoder: ImageEncoder, mut lm: ToyLm, hub_config: MhubConfig, hub_seed: u64) -> Result<Self> {
        encoder.freeze_all();
        lm.freeze_all();
        let hub = MHub::new(hub_config, hub_seed)?;
        let row = lm.token_embedding.value().row(EOC).to_vec();
        let eoc = Parameter::new("eoc", Tensor::new(vec![1, row.len()], row)?, true);
        Ok(Self {
            tokenizer: Tokenizer::new(),
            encoder,
            lm,
            hub,
            eoc,
        })
    }

    /// Parameters that training may change.
    pub fn visit_trainable(&self, f: &mut dyn FnMut(&Parameter)) {
        self.hub.visit(f);
        f(&self.eoc);
    }

    pub fn visit_trainable_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.hub.visit_mut(f);
        f(&mut self.eoc);
    }

    pub fn visit_backbones(&self, f: &mut dyn FnMut(&Parameter)) {
        self.encoder.visit(f);
        self.lm.visit(f);
    }

    /// SHA-256 over names, shapes and value bits of the frozen parameters.
    pub fn backbone_digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit_backbones(&mut |p| digest_param(&mut h, p));
        hex(&h.finalize())
    }

    pub fn trainable_digest(&self) -> String {
        let mut h = Sha256::new();
        self.visit_trainable(&mut |p| digest_param(&mut h, p));
        hex(&h.finalize())
    }
}

impl Module for Model {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.visit_backbones(f);
        self.visit_trainable(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.visit_mut(f);
        self.lm.visit_mut(f);
        self.visit_trainable_mut(f);
    }
}

fn digest_param(h: &mut Sha256, p: &Parameter) {
    h.update(p.name().as_bytes());
    for &d in p.value().shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in p.value().data() {
        h.update(v.to_bits().to_le_bytes());
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
