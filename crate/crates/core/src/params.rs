//! Named parameter sets, the checkpoint container and the Adam optimizer.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `MFLOWCKP` |
//! | 4     | u32 format version (1) |
//! | 4     | u32 metadata length `m` |
//! | m     | UTF-8 metadata (the resolved run configuration) |
//! | 4     | u32 tensor count |
//! | ...   | per tensor: u32 name length, name bytes, u32 rank, rank × u64 extents, row-major f64 payload |

use std::path::Path;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MFLOWCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered, named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Places every tensor on `graph`, as trainable leaves or as constants.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Vec<Var<'g>> {
        self.tensors
            .iter()
            .map(|t| if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) })
            .collect()
    }

    /// Gradients for bound vars, zeros where nothing flowed.
    pub fn collect_grads(vars: &[Var<'_>], grads: &Gradients) -> Vec<Tensor> {
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    /// Copies values from `entries` with `prefix` followed by this store's names.
    pub fn load_from(&mut self, entries: &[(String, Tensor)], prefix: &str) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Input(format!("checkpoint lacks tensor `{key}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::shape("load_checkpoint", format!("`{key}` is {:?}, model expects {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.iter().map(|(n, t)| (format!("{prefix}{n}"), t.clone())).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse { offset: 0, detail: "bad checkpoint magic".into() });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse { offset: 8, detail: format!("unsupported checkpoint version {version}") });
        }
        let meta_len = r.u32()? as usize;
        let at = r.pos;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Parse { offset: at, detail: "metadata is not UTF-8".into() })?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Parse { offset: at, detail: "tensor name is not UTF-8".into() })?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n > 0);
            let numel = numel.ok_or_else(|| Error::Parse { offset: at, detail: format!("invalid extents {shape:?} for `{name}`") })?;
            let payload = r.take(numel.checked_mul(8).ok_or_else(|| r.truncated())?)?;
            let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse { offset: r.pos, detail: "trailing bytes after last tensor".into() });
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self) -> Error {
        Error::Parse { offset: self.pos, detail: "truncated payload".into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| self.truncated())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Adaptive-moment gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gi), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.learning_rate * (*mi / bc1) / ((*vi / bc2).sqrt() + self.epsilon);
            }
        }
    }

    /// Moments and step counter as checkpoint entries.
    pub fn export(&self, prefix: &str, names: &[String]) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}step"), Tensor::scalar(self.step as f64))];
        for (n, (m, v)) in names.iter().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("{prefix}m/{n}"), m.clone()));
            out.push((format!("{prefix}v/{n}"), v.clone()));
        }
        out
    }

    pub fn restore(&mut self, entries: &[(String, Tensor)], prefix: &str, names: &[String]) -> Result<()> {
        let find = |key: String| {
            entries
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Input(format!("checkpoint lacks optimizer entry `{key}`")))
        };
        self.step = find(format!("{prefix}step"))?.item() as u64;
        for (i, n) in names.iter().enumerate() {
            self.m[i] = find(format!("{prefix}m/{n}"))?;
            self.v[i] = find(format!("{prefix}v/{n}"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            metadata: "[motionnet]\nlevels = 3\n".into(),
            tensors: vec![
                ("a".into(), Tensor::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b/c".into(), Tensor::scalar(-3.25)),
            ],
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = ParamStore::new();
        p.push("w", Tensor::new([2], vec![1.0, 1.0]).unwrap());
        let mut opt = Adam::new(0.1, &p);
        opt.update(&mut p, &[Tensor::new([2], vec![2.0, -2.0]).unwrap()]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
    }
}
