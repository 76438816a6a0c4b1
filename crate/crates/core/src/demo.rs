//! Episode construction: demonstration sampling, instructions, and the
//! assembly of soft and token segments fed to the language model.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::data::{Sample, Task};
use crate::error::{Error, Result};
use crate::mhub::HubRequest;
use crate::model::Model;
use crate::tensor::Tensor;
use crate::tokenizer::{EOS, IMAGE_TEMPLATES, VIDEO_TEMPLATES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DemoVariant {
    VanillaFt,
    VanillaIctBVt,
    VanillaIctBT,
    VanillaIctET,
    InstructIctEVt,
    InstructIctEV,
    InstructIctET,
    Mmict,
}

impl DemoVariant {
    pub const ALL: [DemoVariant; 8] = [
        DemoVariant::VanillaFt,
        DemoVariant::VanillaIctBVt,
        DemoVariant::VanillaIctBT,
        DemoVariant::VanillaIctET,
        DemoVariant::InstructIctEVt,
        DemoVariant::InstructIctEV,
        DemoVariant::InstructIctET,
        DemoVariant::Mmict,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DemoVariant::VanillaFt => "vanilla-ft",
            DemoVariant::VanillaIctBVt => "vanilla-ict-b-vt",
            DemoVariant::VanillaIctBT => "vanilla-ict-b-t",
            DemoVariant::VanillaIctET => "vanilla-ict-e-t",
            DemoVariant::InstructIctEVt => "instruct-ict-e-vt",
            DemoVariant::InstructIctEV => "instruct-ict-e-v",
            DemoVariant::InstructIctET => "instruct-ict-e-t",
            DemoVariant::Mmict => "mmict",
        }
    }

    /// How demonstrations are encoded; `None` for the demo-free baseline.
    pub fn demo_format(self) -> Option<DemoFormat> {
        match self {
            DemoVariant::VanillaFt => None,
            DemoVariant::VanillaIctBVt => Some(DemoFormat::VisualAndTokens),
            DemoVariant::VanillaIctBT => Some(DemoFormat::Tokens),
            DemoVariant::VanillaIctET => Some(DemoFormat::UniText),
            DemoVariant::InstructIctEVt => Some(DemoFormat::FusedBoth),
            DemoVariant::InstructIctEV => Some(DemoFormat::FusedVisual),
            DemoVariant::InstructIctET => Some(DemoFormat::AttendedText),
            DemoVariant::Mmict => Some(DemoFormat::FusedText),
        }
    }

    pub fn query_format(self) -> QueryFormat {
        match self {
            DemoVariant::VanillaFt | DemoVariant::VanillaIctBVt | DemoVariant::VanillaIctBT | DemoVariant::VanillaIctET => {
                QueryFormat::Visual
            }
            _ => QueryFormat::Fused,
        }
    }

    pub fn uses_demos(self) -> bool {
        self.demo_format().is_some()
    }
}

impl fmt::Display for DemoVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DemoVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DemoVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DemoFormat {
    /// Uni-modal visual features, then the raw paired text.
    VisualAndTokens,
    /// Raw paired text only.
    Tokens,
    /// Paired text through the hub's text-only path.
    UniText,
    /// Text-guided visual features, then visual-guided text features.
    FusedBoth,
    FusedVisual,
    /// Text rows attending the visual features directly.
    AttendedText,
    /// Visual-guided text features.
    FusedText,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QueryFormat {
    /// Uni-modal visual features of the query.
    Visual,
    /// Query features fused with the instruction.
    Fused,
}

/// What a segment of the assembled context holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Feature {
    UniVisual,
    RawText,
    UniText,
    FusedVisual,
    FusedText,
    AttendedText,
    Eoc,
    Instruction,
    Label,
}

impl Feature {
    pub fn symbol(self) -> &'static str {
        match self {
            Feature::UniVisual => "V^a",
            Feature::RawText => "T(t)",
            Feature::UniText => "T^b",
            Feature::FusedVisual => "V^d",
            Feature::FusedText => "T^c",
            Feature::AttendedText => "T^e",
            Feature::Eoc => "EOC",
            Feature::Instruction => "T(t_ins)",
            Feature::Label => "T(y)",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Demo(usize),
    Separator(usize),
    Query,
    Instruction,
    Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Random,
    OneToMany,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Strategy::Random),
            "one-to-many" => Ok(Strategy::OneToMany),
            _ => Err(Error::Usage(format!("unknown strategy {s:?}; expected random or one-to-many"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Random => "random",
            Strategy::OneToMany => "one-to-many",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub demos: Vec<Sample>,
    pub query: Sample,
    pub instruction: String,
}

impl Episode {
    pub fn new(demos: Vec<Sample>, query: Sample, instruction: String) -> Result<Self> {
        if demos.iter().any(|d| d.id == query.id) {
            return Err(Error::contract(format!("sample {} is both query and demonstration", query.id)));
        }
        Ok(Self {
            demos,
            query,
            instruction,
        })
    }
}

/// Samples indexed for demonstration draws.
pub struct DemoPool<'a> {
    samples: &'a [Sample],
    groups: HashMap<u64, Vec<usize>>,
    draws: Cell<usize>,
}

impl<'a> DemoPool<'a> {
    pub fn new(samples: &'a [Sample]) -> Self {
        let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            groups.entry(s.group_id).or_default().push(i);
        }
        Self {
            samples,
            groups,
            draws: Cell::new(0),
        }
    }

    /// Number of `sample` calls so far.
    pub fn draws(&self) -> usize {
        self.draws.get()
    }

    pub fn samples(&self) -> &'a [Sample] {
        self.samples
    }

    /// Draws `n` demonstrations for `query`, never the query itself.
    pub fn sample<R: Rng + ?Sized>(&self, query: &Sample, n: usize, strategy: Strategy, rng: &mut R) -> Result<Vec<Sample>> {
        self.draws.set(self.draws.get() + 1);
        if n == 0 {
            return Ok(Vec::new());
        }
        let candidates: Vec<usize> = match strategy {
            Strategy::Random => (0..self.samples.len()).filter(|&i| self.samples[i].id != query.id).collect(),
            Strategy::OneToMany => self
                .groups
                .get(&query.group_id)
                .map(|g| {
                    g.iter()
                        .copied()
                        .filter(|&i| self.samples[i].id != query.id && self.samples[i].text != query.text)
                        .collect()
                })
                .unwrap_or_default(),
        };
        if candidates.len() < n {
            return Err(Error::Sampling {
                wanted: n,
                available: candidates.len(),
            });
        }
        let picked: Vec<usize> = if strategy == Strategy::Random && candidates.len() > 4 * n {
            // Rejection draws avoid copying a large candidate list.
            let mut chosen: Vec<usize> = Vec::with_capacity(n);
            while chosen.len() < n {
                let i = *candidates.choose(rng).expect("non-empty");
                if !chosen.contains(&i) {
                    chosen.push(i);
                }
            }
            chosen
        } else {
            let mut c = candidates;
            c.shuffle(rng);
            c.truncate(n);
            c
        };
        Ok(picked.into_iter().map(|i| self.samples[i].clone()).collect())
    }
}

/// Instruction text for a query: a caption template (video wording when the
/// sample has several frames) or the question prompt.
pub fn pick_instruction<R: Rng + ?Sized>(task: Task, query: &Sample, rng: &mut R) -> String {
    if task.is_qa() {
        let q = query.question.as_deref().unwrap_or("");
        return format!("Question: {q} Answer:");
    }
    let pool = if query.frames.len() > 1 { &VIDEO_TEMPLATES } else { &IMAGE_TEMPLATES };
    pool.choose(rng).expect("templates").to_string()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentPlan {
    pub feature: Feature,
    pub role: Role,
    pub rows: usize,
}

/// Layout of one context before any features are computed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextPlan {
    pub soft: Vec<SegmentPlan>,
    pub instruction: Vec<usize>,
    pub label: Vec<usize>,
    demo_format: Option<DemoFormat>,
    query_format: QueryFormat,
    demo_text: Vec<Vec<usize>>,
}

impl ContextPlan {
    pub fn prefix_rows(&self) -> usize {
        self.soft.iter().map(|s| s.rows).sum()
    }

    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.instruction.clone();
        t.extend_from_slice(&self.label);
        t
    }

    /// Marks label positions among the token inputs.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.instruction.len()];
        m.extend(std::iter::repeat_n(true, self.label.len()));
        m
    }

    pub fn total_len(&self) -> usize {
        self.prefix_rows() + self.instruction.len() + self.label.len()
    }

    /// Segment kinds in order, token segments included.
    pub fn layout(&self) -> Vec<(Feature, Role, usize)> {
        let mut out: Vec<_> = self.soft.iter().map(|s| (s.feature, s.role, s.rows)).collect();
        out.push((Feature::Instruction, Role::Instruction, self.instruction.len()));
        if !self.label.is_empty() {
            out.push((Feature::Label, Role::Label, self.label.len()));
        }
        out
    }
}

pub fn plan_context(model: &Model, episode: &Episode, variant: DemoVariant, include_label: bool) -> Result<ContextPlan> {
    plan_with(model, episode, variant.demo_format(), variant.query_format(), include_label)
}

/// Context with demonstrations forced into the fused-text format, used to
/// inject demonstrations into a model that was tuned without them.
pub fn plan_injected(model: &Model, episode: &Episode, variant: DemoVariant, include_label: bool) -> Result<ContextPlan> {
    let format = variant.demo_format().or(Some(DemoFormat::FusedText));
    plan_with(model, episode, format, variant.query_format(), include_label)
}

fn plan_with(
    model: &Model,
    episode: &Episode,
    demo_format: Option<DemoFormat>,
    query_format: QueryFormat,
    include_label: bool,
) -> Result<ContextPlan> {
    let tok = &model.tokenizer;
    let nq = model.hub.config.queries;
    let mut soft = Vec::new();
    let mut demo_text = Vec::new();
    if let Some(format) = demo_format {
        for (k, d) in episode.demos.iter().enumerate() {
            let text = tok.tokenize(&d.text)?;
            let l = text.len();
            let role = Role::Demo(k);
            let mut push = |feature, rows| soft.push(SegmentPlan { feature, role, rows });
            match format {
                DemoFormat::VisualAndTokens => {
                    push(Feature::UniVisual, nq);
                    push(Feature::RawText, l);
                }
                DemoFormat::Tokens => push(Feature::RawText, l),
                DemoFormat::UniText => push(Feature::UniText, l),
                DemoFormat::FusedBoth => {
                    push(Feature::FusedVisual, nq);
                    push(Feature::FusedText, l);
                }
                DemoFormat::FusedVisual => push(Feature::FusedVisual, nq),
                DemoFormat::AttendedText => push(Feature::AttendedText, l),
                DemoFormat::FusedText => push(Feature::FusedText, l),
            }
            soft.push(SegmentPlan {
                feature: Feature::Eoc,
                role: Role::Separator(k),
                rows: 1,
            });
            demo_text.push(text);
        }
    }
    soft.push(SegmentPlan {
        feature: match query_format {
            QueryFormat::Visual => Feature::UniVisual,
            QueryFormat::Fused => Feature::FusedVisual,
        },
        role: Role::Query,
        rows: nq,
    });
    let instruction = tok.tokenize(&episode.instruction)?;
    let label = if include_label {
        let mut l = tok.tokenize(&episode.query.label)?;
        if l.is_empty() {
            return Err(Error::contract("empty label"));
        }
        l.push(EOS);
        l
    } else {
        Vec::new()
    };
    Ok(ContextPlan {
        soft,
        instruction,
        label,
        demo_format,
        query_format,
        demo_text,
    })
}

/// Computes the soft prefix of every plan in one hub pass. Returns one
/// `rows x lm_width` variable per plan.
pub fn realize(model: &Model, tape: &mut Tape, episodes: &[&Episode], plans: &[ContextPlan]) -> Result<Vec<Var>> {
    if episodes.len() != plans.len() {
        return Err(Error::contract("one plan per episode"));
    }
    // Visual encodings and request texts must outlive the request list.
    let mut visuals: Vec<Vec<Tensor>> = Vec::with_capacity(plans.len());
    for (ep, plan) in episodes.iter().zip(plans) {
        let mut v = Vec::new();
        if plan.demo_format.is_some_and(|f| f != DemoFormat::Tokens && f != DemoFormat::UniText) {
            for d in &ep.demos {
                v.push(model.encoder.encode_video(&d.frames)?);
            }
        }
        v.push(model.encoder.encode_video(&ep.query.frames)?);
        visuals.push(v);
    }

    enum Source {
        Hub { request: usize, text_part: bool },
        Raw(usize),
        Eoc,
    }
    let mut requests = Vec::new();
    let mut sources: Vec<Vec<Source>> = Vec::with_capacity(plans.len());
    for (p, plan) in plans.iter().enumerate() {
        let vis = &visuals[p];
        let mut src = Vec::with_capacity(plan.soft.len());
        let mut demo_request = HashMap::new();
        for seg in &plan.soft {
            match (seg.role, seg.feature) {
                (_, Feature::Eoc) => src.push(Source::Eoc),
                (Role::Demo(k), Feature::RawText) => src.push(Source::Raw(k)),
                (Role::Demo(k), f) => {
                    let text: &[usize] = &plan.demo_text[k];
                    let request = *demo_request.entry((k, f == Feature::UniVisual)).or_insert_with(|| {
                        requests.push(match f {
                            Feature::UniVisual => HubRequest::Fuse { visual: &vis[k], text: &[] },
                            Feature::UniText => HubRequest::Text { text },
                            Feature::AttendedText => HubRequest::VisualText { visual: &vis[k], text },
                            _ => HubRequest::Fuse { visual: &vis[k], text },
                        });
                        requests.len() - 1
                    });
                    let text_part = matches!(f, Feature::UniText | Feature::AttendedText | Feature::FusedText);
                    src.push(Source::Hub { request, text_part });
                }
                (Role::Query, _) => {
                    let text: &[usize] = match plan.query_format {
                        QueryFormat::Visual => &[],
                        QueryFormat::Fused => &plan.instruction,
                    };
                    requests.push(HubRequest::Fuse {
                        visual: vis.last().expect("query encoding"),
                        text,
                    });
                    src.push(Source::Hub {
                        request: requests.len() - 1,
                        text_part: false,
                    });
                }
                _ => return Err(Error::contract("segment outside the context grammar")),
            }
        }
        sources.push(src);
    }

    let batch = model.hub.run(tape, &requests)?;
    let projected = model.hub.project_var(tape, batch.hidden)?;
    let eoc = tape.param(&model.eoc);
    let mut prefixes = Vec::with_capacity(plans.len());
    for (p, src) in sources.iter().enumerate() {
        let mut parts = Vec::with_capacity(src.len());
        for s in src {
            parts.push(match *s {
                Source::Eoc => eoc,
                Source::Raw(k) => tape.constant(model.lm.embed_tokens(&plans[p].demo_text[k])?),
                Source::Hub { request, text_part } => {
                    let rows = &batch.rows[request];
                    let r = if text_part { rows.text.clone() } else { rows.queries.clone() };
                    tape.slice_rows(projected, r.start, r.len())?
                }
            });
        }
        prefixes.push(tape.concat_rows(&parts)?);
    }
    Ok(prefixes)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SegmentContent {
    Soft(Tensor),
    Tokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub feature: Feature,
    pub role: Role,
    pub content: SegmentContent,
}

impl Segment {
    pub fn rows(&self) -> usize {
        match &self.content {
            SegmentContent::Soft(t) => t.rows(),
            SegmentContent::Tokens(t) => t.len(),
        }
    }
}

/// An assembled context with concrete values.
#[derive(Clone, Debug, PartialEq)]
pub struct LmContext {
    pub segments: Vec<Segment>,
}

pub fn build_context(model: &Model, episode: &Episode, variant: DemoVariant, include_label: bool) -> Result<LmContext> {
    let plan = plan_context(model, episode, variant, include_label)?;
    context_from_plan(model, episode, &plan)
}

pub fn context_from_plan(model: &Model, episode: &Episode, plan: &ContextPlan) -> Result<LmContext> {
    let mut tape = Tape::new();
    let prefix = realize(model, &mut tape, &[episode], std::slice::from_ref(plan))?[0];
    let values = tape.value(prefix);
    let width = values.cols();
    let mut segments = Vec::with_capacity(plan.soft.len() + 2);
    let mut offset = 0;
    for seg in &plan.soft {
        let data = values.data()[offset * width..(offset + seg.rows) * width].to_vec();
        segments.push(Segment {
            feature: seg.feature,
            role: seg.role,
            content: SegmentContent::Soft(Tensor::new(vec![seg.rows, width], data)?),
        });
        offset += seg.rows;
    }
    segments.push(Segment {
        feature: Feature::Instruction,
        role: Role::Instruction,
        content: SegmentContent::Tokens(plan.instruction.clone()),
    });
    if !plan.label.is_empty() {
        segments.push(Segment {
            feature: Feature::Label,
            role: Role::Label,
            content: SegmentContent::Tokens(plan.label.clone()),
        });
    }
    Ok(LmContext { segments })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmInputs {
    pub prefix: Tensor,
    pub tokens: Vec<usize>,
    pub mask: Vec<bool>,
}

/// Soft segments stacked in order, then token segments; only label tokens
/// are marked for the loss.
pub fn context_to_lm_inputs(ctx: &LmContext, width: usize, max_context: usize) -> Result<LmInputs> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    for seg in &ctx.segments {
        match &seg.content {
            SegmentContent::Soft(t) => {
                if t.cols() != width {
                    return Err(Error::shape("context segment", t.shape(), &[t.rows(), width]));
                }
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
            SegmentContent::Tokens(ids) => {
                tokens.extend_from_slice(ids);
                mask.extend(std::iter::repeat_n(seg.feature == Feature::Label, ids.len()));
            }
        }
    }
    let len = rows + tokens.len();
    if len > max_context {
        return Err(Error::ContextLength { len, max: max_context });
    }
    Ok(LmInputs {
        prefix: Tensor::new(vec![rows, width], data)?,
        tokens,
        mask,
    })
}
