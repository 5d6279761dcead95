//! Named parameter storage, the Adam optimizer, and the checkpoint archive.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic     4 bytes  "POGC"
//! version   u32      CHECKPOINT_VERSION
//! meta_len  u32      length of the JSON config echo that follows
//! meta      bytes    UTF-8 JSON
//! count     u32      number of named arrays
//! repeated count times, sorted by name:
//!   name_len u16, name bytes (UTF-8)
//!   kind     u8      0 = trainable parameter, 1 = buffer (running statistic)
//!   ndim     u8, dims u32 x ndim
//!   data     f32 x product(dims)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"POGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Parameter names starting with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<String> {
        self.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, steps: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update. Parameters without a gradient entry are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else { continue };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
            for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Serialized model: a JSON config echo plus every named array.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        let mut arrays: Vec<(&String, u8, &Tensor)> = self
            .store
            .params()
            .map(|(n, t)| (n, 0u8, t))
            .chain(self.store.buffers().map(|(n, t)| (n, 1u8, t)))
            .collect();
        arrays.sort_by(|a, b| a.0.cmp(b.0));
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, kind, tensor) in arrays {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            out.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in tensor.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::MalformedFile { path: path.to_path_buf(), reason: reason.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated header"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let meta_len = r.u32().ok_or_else(|| bad("truncated meta"))? as usize;
        let meta = std::str::from_utf8(r.take(meta_len).ok_or_else(|| bad("truncated meta"))?)
            .map_err(|_| bad("meta is not UTF-8"))?
            .to_string();
        let count = r.u32().ok_or_else(|| bad("truncated array count"))?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16().ok_or_else(|| bad("truncated name"))? as usize;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(|| bad("truncated name"))?)
                .map_err(|_| bad("name is not UTF-8"))?
                .to_string();
            let kind = r.u8().ok_or_else(|| bad("truncated kind"))?;
            let ndim = r.u8().ok_or_else(|| bad("truncated dims"))? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32().ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len * 4).ok_or_else(|| bad("truncated array data"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let tensor = Tensor::from_vec(&shape, data);
            match kind {
                0 => store.insert(name, tensor),
                1 => store.insert_buffer(name, tensor),
                _ => return Err(bad("unknown array kind")),
            }
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("b.weight", Tensor::from_vec(&[2, 2], vec![1.0, -0.5, 0.25, 3.0]));
        s.insert("a.bias", Tensor::from_vec(&[1], vec![0.1]));
        s.insert_buffer("a.bn.running_var", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        s
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let ck = Checkpoint { meta: "{\"k\":1}".into(), store: sample_store() };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.store.buffer("a.bn.running_var").unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let mut bytes = Checkpoint { meta: String::new(), store: sample_store() }.to_bytes();
        bytes[4] = 9;
        match Checkpoint::from_bytes(&bytes, Path::new("mem")) {
            Err(Error::CheckpointVersionMismatch { found: 9, expected: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = sample_store();
        let mut grads = BTreeMap::new();
        grads.insert("a.bias".to_string(), Tensor::from_vec(&[1], vec![2.0]));
        let mut adam = Adam::default();
        adam.step(&mut store, &grads, 0.01);
        // First Adam step moves by lr in the sign direction.
        assert!((store.get("a.bias").unwrap().data()[0] - 0.09).abs() < 1e-9);
        assert_eq!(store.get("b.weight").unwrap().data()[0], 1.0);
    }
}
