//! Named parameter tensors, the Adam optimiser and the on-disk tensor
//! container shared by checkpoints.
//!
//! Container layout (all integers and floats little-endian):
//!
//! ```text
//! neuralign-tensors 1\n
//! <key> = <value>\n          metadata, zero or more lines, single-line values
//! tensor <name> <rows> <cols>\n   one line per tensor, names sorted
//! end\n
//! <f64 payload of each tensor in header order, row-major>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &str = "neuralign-tensors 1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Deterministic generator for `(seed, stream)`. Streams separate the
/// independent random draws of one run (initialisation, shuffling, dropout).
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Glorot-uniform matrix.
pub fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    /// Panics when `name` is missing: parameter names are fixed by the model
    /// constructors, so a miss is a programming error.
    pub fn tensor(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Var {
        g.param(name, self.tensor(name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Subset whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.tensors.extend(other.tensors);
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
                .collect(),
        }
    }

    pub fn to_tensor_map(&self) -> BTreeMap<String, Array2<f64>> {
        self.tensors.clone()
    }

    pub fn from_tensor_map(tensors: BTreeMap<String, Array2<f64>>) -> Self {
        Self { tensors }
    }

    /// SHA-256 over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update((t.nrows() as u64).to_le_bytes());
            h.update((t.ncols() as u64).to_le_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay or schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Array2<f64>>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self.v.get_mut(name).expect("moment for every parameter");
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            let m = self.m.tensor(name);
            let v = self.v.tensor(name);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }

    pub fn to_tensors(&self, out: &mut BTreeMap<String, Array2<f64>>) {
        for (k, v) in self.m.iter() {
            out.insert(format!("adam.m.{k}"), v.clone());
        }
        for (k, v) in self.v.iter() {
            out.insert(format!("adam.v.{k}"), v.clone());
        }
    }

    pub fn from_tensors(
        config: AdamConfig,
        step: u64,
        tensors: &BTreeMap<String, Array2<f64>>,
    ) -> Self {
        let pick = |prefix: &str| {
            ParamSet::from_tensor_map(
                tensors
                    .iter()
                    .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                    .collect(),
            )
        };
        Self {
            config,
            step,
            m: pick("adam.m."),
            v: pick("adam.v."),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<(String, String)>,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl TensorFile {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("tensor file lacks metadata key {key}")))
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.to_string(), value.to_string()));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{TENSOR_MAGIC}\n");
        for (k, v) in &self.meta {
            if k.contains(['\n', '=']) || v.contains('\n') || k.trim() != k {
                return Err(Error::Format(format!("invalid metadata entry {k:?}")));
            }
            header.push_str(&format!("{k} = {v}\n"));
        }
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("tensor name {name:?} contains whitespace")));
            }
            header.push_str(&format!("tensor {name} {} {}\n", t.nrows(), t.ncols()));
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        for t in self.tensors.values() {
            for v in t.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut next_line = || -> Result<String> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Format("truncated tensor header".into()))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| Error::Format("tensor header is not UTF-8".into()))?
                .to_string();
            pos += nl + 1;
            Ok(line)
        };
        if next_line()? != TENSOR_MAGIC {
            return Err(Error::Format("not a neuralign tensor file".into()));
        }
        let mut file = TensorFile::default();
        let mut shapes = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(Error::Format(format!("bad tensor line {line:?}")));
                }
                let rows: usize = parts[1]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad rows in {line:?}")))?;
                let cols: usize = parts[2]
                    .parse()
                    .map_err(|_| Error::Format(format!("bad cols in {line:?}")))?;
                shapes.push((parts[0].to_string(), rows, cols));
            } else if let Some((k, v)) = line.split_once(" = ") {
                file.meta.push((k.to_string(), v.to_string()));
            } else {
                return Err(Error::Format(format!("bad header line {line:?}")));
            }
        }
        let mut offset = pos;
        for (name, rows, cols) in shapes {
            let n = rows * cols;
            let end = offset + n * 8;
            if end > bytes.len() {
                return Err(Error::Format(format!("payload for {name} truncated")));
            }
            let data: Vec<f64> = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            offset = end;
            let t = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Format(e.to_string()))?;
            file.tensors.insert(name, t);
        }
        if offset != bytes.len() {
            return Err(Error::Format("trailing bytes after tensor payload".into()));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::load(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn adam_with_zero_lr_is_identity() {
        let mut p = ParamSet::new();
        p.insert("w", array![[0.5, -0.25]]);
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::with_lr(0.0), &p);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), array![[3.0, -1.0]]);
        for _ in 0..5 {
            adam.update(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.insert("w", array![[1.0]]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), array![[2.0]]);
        adam.update(&mut p, &g);
        // m̂ = g, v̂ = g², so the step is lr · g / |g|.
        assert!((p.tensor("w")[[0, 0]] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(TensorFile::from_bytes(b"hello\nend\n").is_err());
    }

    proptest! {
        #[test]
        fn tensor_file_round_trip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f64::ANY, 1..24),
            cols in 1usize..4,
        ) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let t = Array2::from_shape_vec((rows, cols), vals[..rows * cols].to_vec()).unwrap();
            let mut f = TensorFile::default();
            f.push_meta("seed", 7);
            f.tensors.insert("a.b".into(), t.clone());
            let back = TensorFile::from_bytes(&f.to_bytes().unwrap()).unwrap();
            let bt = &back.tensors["a.b"];
            prop_assert_eq!(bt.dim(), t.dim());
            for (x, y) in bt.iter().zip(t.iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            prop_assert_eq!(back.meta("seed"), Some("7"));
        }
    }
}
