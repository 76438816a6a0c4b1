//! The fusion hub: learned query tokens and text rows share self-attention,
//! queries read visual features through cross-attention, and each partition
//! has its own feed-forward stack.
//!
//! Every call goes through [`MHub::run`], which evaluates a batch of
//! heterogeneous requests in one pass by stacking their rows and restricting
//! attention to per-request blocks.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{AttnLayout, AttnSegment, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Attention};
use crate::param::{FeedForward, LayerNorm, Linear, Module, Parameter};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhubConfig {
    pub blocks: usize,
    pub queries: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub encoder_width: usize,
    pub lm_width: usize,
    pub vocab: usize,
    pub max_text_len: usize,
}

impl MhubConfig {
    pub fn new(vocab: usize) -> Self {
        Self {
            blocks: 4,
            queries: 32,
            width: 64,
            heads: 4,
            ffn_hidden: 128,
            encoder_width: 32,
            lm_width: 64,
            vocab,
            max_text_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.queries == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::contract(format!(
                "hub needs at least one block and query, and width {} divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MhubBlock {
    pub norm_self: LayerNorm,
    pub self_attention: Attention,
    pub norm_cross: LayerNorm,
    pub cross_attention: Attention,
    pub norm_visual: LayerNorm,
    pub ffn_visual: FeedForward,
    pub norm_text: LayerNorm,
    pub ffn_text: FeedForward,
}

impl MhubBlock {
    fn new(prefix: &str, c: &MhubConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = c.width;
        Self {
            norm_self: LayerNorm::new(&format!("{prefix}.norm_self"), d),
            self_attention: Attention::new(&format!("{prefix}.self_attn"), d, d, c.heads, rng),
            norm_cross: LayerNorm::new(&format!("{prefix}.norm_cross"), d),
            cross_attention: Attention::new(&format!("{prefix}.cross_attn"), d, c.encoder_width, c.heads, rng),
            norm_visual: LayerNorm::new(&format!("{prefix}.norm_visual"), d),
            ffn_visual: FeedForward::new(&format!("{prefix}.ffn_visual"), d, c.ffn_hidden, rng),
            norm_text: LayerNorm::new(&format!("{prefix}.norm_text"), d),
            ffn_text: FeedForward::new(&format!("{prefix}.ffn_text"), d, c.ffn_hidden, rng),
        }
    }

    /// One block over stacked rows. `plan` says which rows attend together,
    /// which rows take the query role and where their visual source lives.
    fn forward(&self, tape: &mut Tape, x: Var, visual: Option<Var>, plan: &BlockPlan) -> Result<Var> {
        let h = layers::layer_norm(tape, &self.norm_self, x)?;
        let a = self.self_attention.forward(tape, h, h, &plan.self_layout)?;
        let h = tape.add(x, a)?;

        let mut outputs = Vec::with_capacity(2);
        if !plan.query_rows.is_empty() {
            let p = tape.select_rows(h, &plan.query_rows)?;
            let o = match visual {
                Some(z) if !plan.cross_layout.segments.is_empty() => {
                    let n = layers::layer_norm(tape, &self.norm_cross, p)?;
                    let c = self.cross_attention.forward(tape, n, z, &plan.cross_layout)?;
                    tape.add(p, c)?
                }
                _ => p,
            };
            let n = layers::layer_norm(tape, &self.norm_visual, o)?;
            let f = layers::feed_forward(tape, &self.ffn_visual, n)?;
            outputs.push(tape.add(o, f)?);
        }
        if !plan.text_rows.is_empty() {
            let r = tape.select_rows(h, &plan.text_rows)?;
            let n = layers::layer_norm(tape, &self.norm_text, r)?;
            let f = layers::feed_forward(tape, &self.ffn_text, n)?;
            outputs.push(tape.add(r, f)?);
        }
        let joined = if outputs.len() == 1 { outputs[0] } else { tape.concat_rows(&outputs)? };
        if plan.identity_order {
            Ok(joined)
        } else {
            tape.select_rows(joined, &plan.restore)
        }
    }
}

impl Module for MhubBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.norm_self.visit(f);
        self.self_attention.visit(f);
        self.norm_cross.visit(f);
        self.cross_attention.visit(f);
        self.norm_visual.visit(f);
        self.ffn_visual.visit(f);
        self.norm_text.visit(f);
        self.ffn_text.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm_self.visit_mut(f);
        self.self_attention.visit_mut(f);
        self.norm_cross.visit_mut(f);
        self.cross_attention.visit_mut(f);
        self.norm_visual.visit_mut(f);
        self.ffn_visual.visit_mut(f);
        self.norm_text.visit_mut(f);
        self.ffn_text.visit_mut(f);
    }
}

/// One hub evaluation inside a batch.
#[derive(Clone, Copy, Debug)]
pub enum HubRequest<'a> {
    /// Queries and text jointly; empty text gives the uni-modal visual
    /// features.
    Fuse { visual: &'a Tensor, text: &'a [usize] },
    /// Text alone, no queries and no visual input.
    Text { text: &'a [usize] },
    /// Text rows in the query role, attending to the visual features.
    VisualText { visual: &'a Tensor, text: &'a [usize] },
}

/// Where a request's outputs ended up in the stacked hidden matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HubRows {
    pub queries: Range<usize>,
    pub text: Range<usize>,
}

pub struct HubBatch {
    pub hidden: Var,
    pub rows: Vec<HubRows>,
}

struct BlockPlan {
    self_layout: AttnLayout,
    cross_layout: AttnLayout,
    query_rows: Vec<usize>,
    text_rows: Vec<usize>,
    restore: Vec<usize>,
    identity_order: bool,
}

/// Visual and textual features from a joint pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionOutput {
    pub visual: Tensor,
    pub text: Tensor,
}

#[derive(Clone, Debug)]
pub struct MHub {
    pub config: MhubConfig,
    pub queries: Parameter,
    pub text_embedding: Parameter,
    pub text_positions: Parameter,
    pub blocks: Vec<MhubBlock>,
    pub out_proj: Linear,
}

impl MHub {
    pub fn new(config: MhubConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let blocks = (0..config.blocks).map(|i| MhubBlock::new(&format!("hub.block{i}"), &config, &mut rng)).collect();
        Ok(Self {
            queries: Parameter::randn("hub.queries", &[config.queries, d], 0.5, &mut rng),
            text_embedding: Parameter::randn("hub.text_embedding", &[config.vocab, d], 0.5, &mut rng),
            text_positions: Parameter::randn("hub.text_positions", &[config.max_text_len, d], 0.1, &mut rng),
            blocks,
            out_proj: Linear::new("hub.out_proj", d, config.lm_width, &mut rng),
            config,
        })
    }

    fn embed_text(&self, tape: &mut Tape, text: &[usize]) -> Result<Var> {
        if text.len() > self.config.max_text_len {
            return Err(Error::ContextLength {
                len: text.len(),
                max: self.config.max_text_len,
            });
        }
        if let Some(&t) = text.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::contract(format!("token {t} outside the hub vocabulary")));
        }
        let table = tape.param(&self.text_embedding);
        let positions = tape.param(&self.text_positions);
        let e = tape.select_rows(table, text)?;
        let idx: Vec<usize> = (0..text.len()).collect();
        let p = tape.select_rows(positions, &idx)?;
        tape.add(e, p)
    }

    fn check_visual(&self, z: &Tensor) -> Result<()> {
        if z.rank() != 2 || z.cols() != self.config.encoder_width {
            return Err(Error::shape("hub visual input", z.shape(), &[0, self.config.encoder_width]));
        }
        Ok(())
    }

    /// Evaluates all requests in one stacked pass.
    pub fn run(&self, tape: &mut Tape, requests: &[HubRequest<'_>]) -> Result<HubBatch> {
        let nq = self.config.queries;
        let mut parts = Vec::new();
        let mut visuals = Vec::new();
        let mut rows = Vec::with_capacity(requests.len());
        let mut block_lengths = Vec::with_capacity(requests.len());
        let mut query_rows = Vec::new();
        let mut text_rows = Vec::new();
        let mut cross = Vec::new();
        let mut offset = 0;
        let mut visual_offset = 0;
        let queries = tape.param(&self.queries);
        for req in requests {
            let (visual, text, with_queries, text_is_query) = match *req {
                HubRequest::Fuse { visual, text } => (Some(visual), text, true, false),
                HubRequest::Text { text } => (None, text, false, false),
                HubRequest::VisualText { visual, text } => (Some(visual), text, false, true),
            };
            if !with_queries && text.is_empty() {
                return Err(Error::contract("text-only hub modes need at least one token"));
            }
            let q_len = if with_queries { nq } else { 0 };
            if with_queries {
                parts.push(queries);
            }
            if !text.is_empty() {
                parts.push(self.embed_text(tape, text)?);
            }
            let q_range = offset..offset + q_len;
            let t_range = offset + q_len..offset + q_len + text.len();
            let role_rows = if text_is_query { t_range.clone() } else { q_range.clone() };
            query_rows.extend(role_rows.clone());
            if !text_is_query {
                text_rows.extend(t_range.clone());
            }
            if let Some(z) = visual {
                self.check_visual(z)?;
                if !role_rows.is_empty() && z.rows() > 0 {
                    cross.push(AttnSegment {
                        q_start: query_rows.len() - role_rows.len(),
                        q_len: role_rows.len(),
                        k_start: visual_offset,
                        k_len: z.rows(),
                    });
                    visuals.push(z);
                    visual_offset += z.rows();
                }
            }
            block_lengths.push(q_len + text.len());
            rows.push(HubRows {
                queries: q_range,
                text: t_range,
            });
            offset += q_len + text.len();
        }
        if parts.is_empty() {
            return Err(Error::contract("hub called with no rows"));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let visual = if visuals.is_empty() {
            None
        } else {
            let width = self.config.encoder_width;
            let mut data = Vec::with_capacity(visual_offset * width);
            for z in &visuals {
                data.extend_from_slice(z.data());
            }
            Some(tape.constant(Tensor::new(vec![visual_offset, width], data)?))
        };

        let mut restore = vec![0; offset];
        for (i, &r) in query_rows.iter().chain(text_rows.iter()).enumerate() {
            restore[r] = i;
        }
        let identity_order = restore.iter().enumerate().all(|(i, &r)| i == r);
        let plan = BlockPlan {
            self_layout: AttnLayout::blocks(&block_lengths, false),
            cross_layout: AttnLayout {
                segments: cross,
                causal: false,
            },
            query_rows,
            text_rows,
            restore,
            identity_order,
        };
        for block in &self.blocks {
            x = block.forward(tape, x, visual, &plan)?;
        }
        Ok(HubBatch { hidden: x, rows })
    }

    /// Maps hub rows into the language model's input space.
    pub fn project_var(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        layers::linear(tape, &self.out_proj, x)
    }

    fn run_one(&self, req: HubRequest<'_>) -> Result<(Tensor, HubRows)> {
        let mut tape = Tape::new();
        let batch = self.run(&mut tape, &[req])?;
        Ok((tape.value(batch.hidden).clone(), batch.rows[0].clone()))
    }

    pub fn fuse(&self, visual: &Tensor, text: &[usize]) -> Result<FusionOutput> {
        let (h, rows) = self.run_one(HubRequest::Fuse { visual, text })?;
        Ok(FusionOutput {
            visual: take_rows(&h, rows.queries)?,
            text: take_rows(&h, rows.text)?,
        })
    }

    pub fn encode_visual(&self, visual: &Tensor) -> Result<Tensor> {
        Ok(self.fuse(visual, &[])?.visual)
    }

    pub fn encode_text(&self, text: &[usize]) -> Result<Tensor> {
        let (h, rows) = self.run_one(HubRequest::Text { text })?;
        take_rows(&h, rows.text)
    }

    pub fn visual_attended_text(&self, visual: &Tensor, text: &[usize]) -> Result<Tensor> {
        let (h, rows) = self.run_one(HubRequest::VisualText { visual, text })?;
        take_rows(&h, rows.text)
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        layers::apply_linear(&self.out_proj, features)
    }

    /// Per-frame visual features concatenated, `frames * queries` rows.
    pub fn extract_frame_level(&self, visual: &Tensor, frames: usize) -> Result<Tensor> {
        if frames == 0 || visual.rows() % frames != 0 {
            return Err(Error::contract(format!("{} visual rows do not split into {frames} frames", visual.rows())));
        }
        let per = visual.rows() / frames;
        let width = visual.cols();
        let mut data = Vec::new();
        for f in 0..frames {
            let z = Tensor::new(vec![per, width], visual.data()[f * per * width..(f + 1) * per * width].to_vec())?;
            data.extend(self.encode_visual(&z)?.into_data());
        }
        Tensor::new(vec![frames * self.config.queries, self.config.width], data)
    }

    /// Applies block `index` to explicit query-partition and text rows.
    pub fn block_forward(&self, index: usize, queries: &Tensor, text: &Tensor, visual: &Tensor) -> Result<(Tensor, Tensor)> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::contract(format!("no hub block {index}")))?;
        let d = self.config.width;
        if queries.cols() != d || (text.numel() > 0 && text.cols() != d) {
            return Err(Error::shape("block_forward", queries.shape(), text.shape()));
        }
        self.check_visual(visual)?;
        let (nq, nt) = (queries.rows(), text.rows());
        let mut tape = Tape::new();
        let mut data = queries.data().to_vec();
        data.extend_from_slice(text.data());
        let x = tape.constant(Tensor::new(vec![nq + nt, d], data)?);
        let z = tape.constant(visual.clone());
        let plan = BlockPlan {
            self_layout: AttnLayout::single(nq + nt, nq + nt, false),
            cross_layout: AttnLayout::single(nq, visual.rows(), false),
            query_rows: (0..nq).collect(),
            text_rows: (nq..nq + nt).collect(),
            restore: (0..nq + nt).collect(),
            identity_order: true,
        };
        let y = block.forward(&mut tape, x, Some(z), &plan)?;
        let y = tape.value(y);
        Ok((take_rows(y, 0..nq)?, take_rows(y, nq..nq + nt)?))
    }
}

pub(crate) fn take_rows(x: &Tensor, range: Range<usize>) -> Result<Tensor> {
    let cols = x.cols();
    Tensor::new(vec![range.len(), cols], x.data()[range.start * cols..range.end * cols].to_vec())
}

impl Module for MHub {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.queries);
        f(&self.text_embedding);
        f(&self.text_positions);
        for b in &self.blocks {
            b.visit(f);
        }
        self.out_proj.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.queries);
        f(&mut self.text_embedding);
        f(&mut self.text_positions);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.out_proj.visit_mut(f);
    }
}
