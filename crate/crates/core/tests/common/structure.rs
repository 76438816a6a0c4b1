//! Context layouts written out independently of the implementation's
//! format tables.

use mmict::data::Task;
use mmict::demo::{build_context, DemoVariant, Episode, Role};
use mmict::model::Model;

use super::train_set;

/// Segment symbols per demonstration for each variant.
pub fn demo_symbols(v: DemoVariant) -> &'static [&'static str] {
    match v {
        DemoVariant::VanillaFt => &[],
        DemoVariant::VanillaIctBVt => &["V^a", "T(t)"],
        DemoVariant::VanillaIctBT => &["T(t)"],
        DemoVariant::VanillaIctET => &["T^b"],
        DemoVariant::InstructIctEVt => &["V^d", "T^c"],
        DemoVariant::InstructIctEV => &["V^d"],
        DemoVariant::InstructIctET => &["T^e"],
        DemoVariant::Mmict => &["T^c"],
    }
}

pub fn query_symbol(v: DemoVariant) -> &'static str {
    match v {
        DemoVariant::VanillaFt | DemoVariant::VanillaIctBVt | DemoVariant::VanillaIctBT | DemoVariant::VanillaIctET => "V^a",
        _ => "V^d",
    }
}

pub fn episode(n_e: usize) -> Episode {
    let samples = train_set(Task::Describe, 8, 5);
    let demos = samples[1..=n_e].to_vec();
    Episode::new(demos, samples[0].clone(), mmict::tokenizer::VIDEO_TEMPLATES[0].to_string()).unwrap()
}

pub fn tokens(model: &Model, text: &str) -> Vec<usize> {
    model.tokenizer.tokenize(text).unwrap()
}

pub type Layout = Vec<(&'static str, Role, usize)>;

pub fn expected_layout(model: &Model, ep: &Episode, v: DemoVariant) -> Layout {
    let nq = model.hub.config.queries;
    let mut expected = Vec::new();
    if v != DemoVariant::VanillaFt {
        for (k, d) in ep.demos.iter().enumerate() {
            for s in demo_symbols(v) {
                let rows = if s.starts_with('V') { nq } else { tokens(model, &d.text).len() };
                expected.push((*s, Role::Demo(k), rows));
            }
            expected.push(("EOC", Role::Separator(k), 1));
        }
    }
    expected.push((query_symbol(v), Role::Query, nq));
    expected.push(("T(t_ins)", Role::Instruction, tokens(model, &ep.instruction).len()));
    expected.push(("T(y)", Role::Label, tokens(model, &ep.query.label).len() + 1));
    expected
}

/// Layout mismatches over every variant and demonstration count 0..=4.
pub fn grammar_mismatches(model: &Model) -> Vec<String> {
    let mut out = Vec::new();
    for v in DemoVariant::ALL {
        for n_e in 0..=4 {
            let ep = episode(n_e);
            let ctx = build_context(model, &ep, v, true).unwrap();
            let found: Layout = ctx.segments.iter().map(|s| (s.feature.symbol(), s.role, s.rows())).collect();
            let expected = expected_layout(model, &ep, v);
            if found != expected {
                out.push(format!("{} n_e={n_e}: {found:?} != {expected:?}", v.name()));
            }
        }
    }
    out
}
