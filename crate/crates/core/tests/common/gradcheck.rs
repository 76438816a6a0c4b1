//! Analytic gradients against central finite differences, shared by the
//! gradient tests and the acceptance run.

use std::collections::BTreeMap;

use mmict::autograd::{AttnLayout, AttnSegment, Tape, Var};
use mmict::data::Task;
use mmict::demo::{self, DemoPool, DemoVariant, Strategy};
use mmict::param::ParamId;
use mmict::tensor::Tensor;
use mmict::train::{batch_loss, make_episode, EpisodeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const INSTANCES: u64 = 20;

/// Worst relative error and instance count per checked operation.
#[derive(Default, Debug)]
pub struct Worst(pub BTreeMap<&'static str, (f64, u64)>);

impl Worst {
    fn record(&mut self, label: &'static str, err: f64) {
        let e = self.0.entry(label).or_insert((0.0, 0));
        e.0 = e.0.max(err);
        e.1 += 1;
    }

    pub fn failures(&self) -> Vec<String> {
        self.0
            .iter()
            .filter(|(_, (err, n))| !(*err < TOLERANCE) || *n < INSTANCES)
            .map(|(k, (err, n))| format!("{k}: worst {err:e} over {n} instances"))
            .collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Builds the graph on every evaluation, so the closure must be pure.
fn check<F>(w: &mut Worst, label: &'static str, inputs: &[Tensor], build: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let grads = tape.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let (tp, _, op) = eval(&plus);
            let (tm, _, om) = eval(&minus);
            let numeric = (tp.value(op).item() - tm.value(om).item()) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic.data()[j], numeric));
        }
    }
    w.record(label, worst);
}

/// Contracts a tensor to a scalar with fixed random weights, so that every
/// output element influences the checked value differently.
fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::randn(tape.shape(x), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}

fn rand_dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn matmul_and_linear(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k, n) = (rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 1, 4));
        let a = Tensor::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::randn(&[k, n], 1.0, &mut rng);
        let bias = Tensor::randn(&[n], 1.0, &mut rng);
        check(w, "matmul", &[a.clone(), b.clone()], |t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, y, seed)
        });
        check(w, "linear", &[a.clone(), b.clone(), bias.clone()], |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            weighted_sum(t, y, seed)
        });
        check(w, "linear without bias", &[a, b], |t, v| {
            let y = t.linear(v[0], v[1], None).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

pub fn elementwise_and_reductions(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let shape = [rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 1, 5)];
        let a = Tensor::randn(&shape, 1.0, &mut rng);
        let b = Tensor::randn(&shape, 1.0, &mut rng);
        let s: f64 = rng.random_range(-2.0..2.0);
        check(w, "add", &[a.clone(), b.clone()], |t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            weighted_sum(t, y, seed)
        });
        check(w, "mul", &[a.clone(), b.clone()], |t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            weighted_sum(t, y, seed)
        });
        check(w, "scale", &[a.clone()], |t, v| {
            let y = t.scale(v[0], s);
            weighted_sum(t, y, seed)
        });
        check(w, "sum", &[a.clone()], |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.sum(y)
        });
        check(w, "mean", &[a.clone()], |t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.mean(y)
        });
        check(w, "gelu", &[Tensor::randn(&shape, 2.0, &mut rng)], |t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, seed)
        });
    }
}

pub fn softmax_along_each_axis(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let shape = [rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 2, 6)];
        let x = Tensor::randn(&shape, 1.5, &mut rng);
        for axis in 0..2 {
            check(w, "softmax", &[x.clone()], |t, v| {
                let y = t.softmax(v[0], axis).unwrap();
                weighted_sum(t, y, seed)
            });
        }
    }
}

pub fn layer_norm(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, d) = (rand_dim(&mut rng, 1, 4), rand_dim(&mut rng, 2, 6));
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let g = Tensor::randn(&[d], 1.0, &mut rng);
        let b = Tensor::randn(&[d], 1.0, &mut rng);
        check(w, "layer_norm", &[x, g, b], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

pub fn attention_layouts(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let heads = rand_dim(&mut rng, 1, 2);
        let d = heads * rand_dim(&mut rng, 1, 3);
        // Two segments with different query and key extents, plus a
        // causal self-attention block.
        let (q1, k1) = (rand_dim(&mut rng, 1, 3), rand_dim(&mut rng, 1, 4));
        let (q2, k2) = (rand_dim(&mut rng, 1, 3), rand_dim(&mut rng, 1, 4));
        let q = Tensor::randn(&[q1 + q2, d], 1.0, &mut rng);
        let k = Tensor::randn(&[k1 + k2, d], 1.0, &mut rng);
        let v = Tensor::randn(&[k1 + k2, d], 1.0, &mut rng);
        let layout = AttnLayout {
            segments: vec![
                AttnSegment { q_start: 0, q_len: q1, k_start: 0, k_len: k1 },
                AttnSegment { q_start: q1, q_len: q2, k_start: k1, k_len: k2 },
            ],
            causal: false,
        };
        check(w, "cross attention", &[q, k, v], |t, vars| {
            let y = t.attention(vars[0], vars[1], vars[2], heads, &layout).unwrap();
            weighted_sum(t, y, seed)
        });

        let n = rand_dim(&mut rng, 2, 5);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let causal = AttnLayout::blocks(&[1, n - 1], true);
        check(w, "causal attention", &[x], |t, vars| {
            let y = t.attention(vars[0], vars[0], vars[0], heads, &causal).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

pub fn row_operations(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let cols = rand_dim(&mut rng, 1, 4);
        let a = Tensor::randn(&[rand_dim(&mut rng, 1, 3), cols], 1.0, &mut rng);
        let b = Tensor::randn(&[rand_dim(&mut rng, 2, 4), cols], 1.0, &mut rng);
        check(w, "concat_rows", &[a.clone(), b.clone()], |t, v| {
            let y = t.concat_rows(&[v[1], v[0], v[1]]).unwrap();
            weighted_sum(t, y, seed)
        });
        let rows = b.rows();
        let start = rng.random_range(0..rows);
        let len = rng.random_range(1..=rows - start);
        check(w, "slice_rows", &[b.clone()], |t, v| {
            let y = t.slice_rows(v[0], start, len).unwrap();
            weighted_sum(t, y, seed)
        });
        let index: Vec<usize> = (0..5).map(|_| rng.random_range(0..rows)).collect();
        check(w, "select_rows", &[b], |t, v| {
            let y = t.select_rows(v[0], &index).unwrap();
            weighted_sum(t, y, seed)
        });
    }
}

pub fn cross_entropy_with_mask(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (n, vocab) = (rand_dim(&mut rng, 1, 5), rand_dim(&mut rng, 2, 7));
        let logits = Tensor::randn(&[n, vocab], 2.0, &mut rng);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        check(w, "cross_entropy", &[logits], |t, v| t.cross_entropy(v[0], &targets, &mask).unwrap());
    }
}

pub fn composite_graph(w: &mut Worst) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let x = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let weight = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let g = Tensor::randn(&[4], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let targets = vec![0, 3, 1, 2];
        let mask = vec![true, false, true, true];
        check(w, "composite", &[x, weight, g, b], |t, v| {
            let h = t.layer_norm(v[0], v[2], v[3], 1e-5).unwrap();
            let a = t.attention(h, h, h, 2, &AttnLayout::single(4, 4, true)).unwrap();
            let r = t.add(v[0], a).unwrap();
            let f = t.linear(r, v[1], Some(v[3])).unwrap();
            let f = t.gelu(f);
            let logits = t.matmul(f, v[1]).unwrap();
            t.cross_entropy(logits, &targets, &mask).unwrap()
        });
    }
}

/// The full training loss of one episode with respect to trainable
/// parameters, cycling through every variant.
pub fn episode_loss(w: &mut Worst) {
    let coordinates = 8;
    for seed in 0..INSTANCES.max(DemoVariant::ALL.len() as u64 * 3) {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let mut model = super::tiny_model(seed);
        let task = Task::ALL[seed as usize % 3];
        let samples = super::train_set(task, 12, seed);
        let pool = DemoPool::new(&samples);
        let variant = DemoVariant::ALL[seed as usize % DemoVariant::ALL.len()];
        let strategy = if task == Task::IclMap { Strategy::OneToMany } else { Strategy::Random };
        let n_e = rng.random_range(0..=3);
        let cfg = EpisodeConfig { task, variant, n_e, strategy };
        let query = &samples[rng.random_range(0..samples.len())];
        let episode = make_episode(&pool, query, &cfg, n_e, &mut rng).unwrap();
        let plan = demo::plan_context(&model, &episode, variant, true).unwrap();

        let loss_of = |m: &mmict::model::Model| {
            let mut tape = Tape::new();
            let l = batch_loss(m, &mut tape, &[&episode], std::slice::from_ref(&plan)).unwrap();
            (tape, l)
        };
        let (tape, l) = loss_of(&model);
        let grads = tape.backward(l).unwrap();
        drop(tape);

        let mut params: Vec<(ParamId, usize)> = Vec::new();
        model.visit_trainable(&mut |p| params.push((p.id(), p.value().numel())));
        let mut worst = 0.0f64;
        for _ in 0..coordinates {
            let (id, n) = params[rng.random_range(0..params.len())];
            let j = rng.random_range(0..n);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[j]);
            let shift = |m: &mut mmict::model::Model, delta: f64| {
                m.visit_trainable_mut(&mut |p| {
                    if p.id() == id {
                        let mut v = p.value().clone();
                        v.data_mut()[j] += delta;
                        p.set_value(v).unwrap();
                    }
                });
            };
            let base: Vec<f64> = {
                let mut out = Vec::new();
                model.visit_trainable(&mut |p| {
                    if p.id() == id {
                        out = p.value().data().to_vec();
                    }
                });
                out
            };
            shift(&mut model, STEP);
            let (tp, lp) = loss_of(&model);
            let plus = tp.value(lp).item();
            shift(&mut model, -2.0 * STEP);
            let (tm, lm) = loss_of(&model);
            let minus = tm.value(lm).item();
            // Restore the exact original bits.
            model.visit_trainable_mut(&mut |p| {
                if p.id() == id {
                    p.set_value(Tensor::new(p.value().shape().to_vec(), base.clone()).unwrap()).unwrap();
                }
            });
            worst = worst.max(relative_error(analytic, (plus - minus) / (2.0 * STEP)));
        }
        w.record("episode loss", worst);
    }
}

pub fn all() -> Worst {
    let mut w = Worst::default();
    matmul_and_linear(&mut w);
    elementwise_and_reductions(&mut w);
    softmax_along_each_axis(&mut w);
    layer_norm(&mut w);
    attention_layouts(&mut w);
    row_operations(&mut w);
    cross_entropy_with_mask(&mut w);
    composite_graph(&mut w);
    episode_loss(&mut w);
    w
}
