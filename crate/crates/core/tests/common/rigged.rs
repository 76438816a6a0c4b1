//! Hand-tabled decoders for checking search against enumeration.

use std::collections::HashMap;

use mmict::eval::StepDecoder;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EOS: usize = 0;

pub type Table = HashMap<Vec<usize>, Vec<f64>>;

/// Next-token distribution as a function of the generated prefix.
#[derive(Clone)]
pub struct Rigged {
    table: Table,
    prefix: Vec<usize>,
}

impl Rigged {
    fn logits(&self) -> Vec<f64> {
        let p = self.table.get(&self.prefix).expect("every reachable prefix is tabled");
        p.iter().map(|x| x.ln()).collect()
    }
}

impl StepDecoder for Rigged {
    fn feed(&mut self, token: usize) -> mmict::Result<Vec<f64>> {
        self.prefix.push(token);
        Ok(self.logits())
    }
}

pub fn start(table: &Table) -> (Rigged, Vec<f64>) {
    let r = Rigged {
        table: table.clone(),
        prefix: Vec::new(),
    };
    let l = r.logits();
    (r, l)
}

/// Enumerates every sequence that ends at EOS or fills the budget and
/// returns the best by mean log-probability (ties: smaller sequence).
pub fn exhaustive(table: &Table, vocab: usize, max_new: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let probs = &table[&prefix];
        for t in 0..vocab {
            let mut seq = prefix.clone();
            seq.push(t);
            let l = lp + probs[t].ln();
            if t == EOS || seq.len() == max_new {
                let mean = l / seq.len() as f64;
                let better = match &best {
                    None => true,
                    Some((bs, bm)) => mean > *bm || (mean == *bm && seq < *bs),
                };
                if better {
                    best = Some((seq, mean));
                }
            } else {
                stack.push((seq, l));
            }
        }
    }
    best.unwrap()
}

pub fn random_table(rng: &mut ChaCha8Rng, vocab: usize, depth: usize) -> Table {
    let mut table = HashMap::new();
    let mut frontier = vec![Vec::new()];
    for _ in 0..depth {
        let mut next = Vec::new();
        for p in frontier {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
            let z: f64 = raw.iter().sum();
            table.insert(p.clone(), raw.iter().map(|x| x / z).collect());
            for t in 1..vocab {
                let mut q = p.clone();
                q.push(t);
                next.push(q);
            }
        }
        frontier = next;
    }
    table
}

/// Three-token, three-step models built so that greedy decoding, early
/// stopping and full-length answers each matter.
pub fn hand_tables() -> Vec<Table> {
    let mut out = Vec::new();
    // Greedy takes token 1 first, but 2 then EOS is the best sequence.
    let mut a = HashMap::new();
    a.insert(vec![], vec![0.1, 0.5, 0.4]);
    a.insert(vec![1], vec![0.3, 0.35, 0.35]);
    a.insert(vec![2], vec![0.9, 0.05, 0.05]);
    for p in [vec![1, 1], vec![1, 2], vec![2, 1], vec![2, 2]] {
        a.insert(p, vec![0.4, 0.3, 0.3]);
    }
    out.push(a);
    // The best sequence needs all three steps.
    let mut b = HashMap::new();
    b.insert(vec![], vec![0.05, 0.45, 0.5]);
    b.insert(vec![1], vec![0.05, 0.05, 0.9]);
    b.insert(vec![2], vec![0.34, 0.33, 0.33]);
    b.insert(vec![1, 1], vec![0.5, 0.25, 0.25]);
    b.insert(vec![1, 2], vec![0.02, 0.96, 0.02]);
    b.insert(vec![2, 1], vec![0.4, 0.3, 0.3]);
    b.insert(vec![2, 2], vec![0.4, 0.3, 0.3]);
    out.push(b);
    // An early EOS beats every longer continuation.
    let mut c = HashMap::new();
    c.insert(vec![], vec![0.6, 0.2, 0.2]);
    for p in [vec![1], vec![2], vec![1, 1], vec![1, 2], vec![2, 1], vec![2, 2]] {
        c.insert(p, vec![0.34, 0.33, 0.33]);
    }
    out.push(c);
    out
}
