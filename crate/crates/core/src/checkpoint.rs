//! Text checkpoint container.
//!
//! ```text
//! mmict-checkpoint 1
//! meta {"kind":"hub",...}
//! param hub.queries 32x64 3fb999999999999a ...
//! sha256 <digest of every preceding byte>
//! ```
//!
//! Values are the 16-digit hex of their IEEE-754 bits, so loading restores
//! them exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::{read_to_string, write_atomic};
use crate::error::{Error, Result};
use crate::model::hex;
use crate::param::Parameter;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "mmict-checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Free-form metadata, typically the run configuration and digests.
    pub meta: serde_json::Value,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            version: FORMAT_VERSION,
            meta,
            params: Vec::new(),
        }
    }

    pub fn push(&mut self, p: &Parameter) {
        self.params.push((p.name().to_string(), p.value().clone()));
    }

    /// Collects every parameter `visit` yields.
    pub fn capture(meta: serde_json::Value, visit: impl FnOnce(&mut dyn FnMut(&Parameter))) -> Self {
        let mut ck = Self::new(meta);
        visit(&mut |p| ck.push(p));
        ck
    }

    pub fn to_text(&self) -> String {
        let mut body = String::new();
        let _ = writeln!(body, "{MAGIC} {}", self.version);
        let _ = writeln!(body, "meta {}", serde_json::to_string(&self.meta).expect("json"));
        for (name, t) in &self.params {
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let _ = write!(body, "param {name} {}", shape.join("x"));
            for v in t.data() {
                let _ = write!(body, " {:016x}", v.to_bits());
            }
            body.push('\n');
        }
        let digest = hex(&Sha256::digest(body.as_bytes()));
        let _ = writeln!(body, "sha256 {digest}");
        body
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::parse("checkpoint", msg);
        let cut = text.rfind("sha256 ").ok_or_else(|| bad("missing content hash".into()))?;
        let (body, tail) = text.split_at(cut);
        let expected = tail["sha256 ".len()..].trim();
        let found = hex(&Sha256::digest(body.as_bytes()));
        if expected != found {
            return Err(Error::Integrity {
                expected: expected.to_string(),
                found,
            });
        }
        let mut lines = body.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let version: u32 = header
            .strip_prefix(MAGIC)
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("not a checkpoint header: {header:?}")))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_line = lines.next().and_then(|l| l.strip_prefix("meta ")).ok_or_else(|| bad("missing meta line".into()))?;
        let meta = serde_json::from_str(meta_line).map_err(|e| bad(e.to_string()))?;
        let mut params = Vec::new();
        for line in lines {
            let mut parts = line.split(' ');
            if parts.next() != Some("param") {
                return Err(bad(format!("unexpected line {:.40?}", line)));
            }
            let name = parts.next().ok_or_else(|| bad("parameter without a name".into()))?;
            let shape = parts
                .next()
                .ok_or_else(|| bad(format!("{name}: missing shape")))?
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|e| bad(format!("{name}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let data = parts
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|e| bad(format!("{name}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            params.push((name.to_string(), Tensor::new(shape, data)?));
        }
        Ok(Self { version, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&read_to_string(path)?)
    }

    /// Writes stored values into the parameters `visit` yields. Every
    /// visited parameter must be present with a matching shape, and every
    /// stored one must be used.
    pub fn restore(&self, visit: impl FnOnce(&mut dyn FnMut(&mut Parameter))) -> Result<()> {
        let mut by_name: HashMap<&str, &Tensor> = HashMap::with_capacity(self.params.len());
        for (n, t) in &self.params {
            if by_name.insert(n.as_str(), t).is_some() {
                return Err(Error::parse("checkpoint", format!("duplicate parameter {n}")));
            }
        }
        let mut used = 0;
        let mut result = Ok(());
        visit(&mut |p| {
            if result.is_err() {
                return;
            }
            result = match by_name.get(p.name()) {
                Some(t) => {
                    used += 1;
                    p.set_value((*t).clone())
                }
                None => Err(Error::parse("checkpoint", format!("missing parameter {}", p.name()))),
            };
        });
        result?;
        if used != self.params.len() {
            return Err(Error::parse("checkpoint", "unused parameters in file"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({"kind": "test"}));
        let awkward = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e-310, std::f64::consts::PI, f64::MAX];
        ck.params.push(("a.weight".into(), Tensor::new(vec![2, 3], awkward).unwrap()));
        ck.params.push(("b".into(), Tensor::new(vec![1], vec![42.0]).unwrap()));
        ck
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let back = Checkpoint::from_text(&ck.to_text()).unwrap();
        assert_eq!(back.meta, ck.meta);
        for ((n1, t1), (n2, t2)) in ck.params.iter().zip(&back.params) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn tampering_is_detected() {
        let text = sample().to_text();
        let tampered = text.replacen("param b 1 4045", "param b 1 4046", 1);
        assert_ne!(tampered, text);
        assert!(matches!(Checkpoint::from_text(&tampered), Err(Error::Integrity { .. })));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ck = sample();
        let mut a = Parameter::zeros("a.weight", &[2, 3]);
        let mut b = Parameter::zeros("b", &[1]);
        ck.restore(|f| {
            f(&mut a);
            f(&mut b);
        })
        .unwrap();
        assert_eq!(b.value().data(), &[42.0]);
        let mut wrong = Parameter::zeros("b", &[2]);
        assert!(ck.restore(|f| f(&mut wrong)).is_err());
        let mut only_b = Parameter::zeros("b", &[1]);
        assert!(ck.restore(|f| f(&mut only_b)).is_err());
    }
}
