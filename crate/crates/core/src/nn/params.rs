//! Named parameter tensors and the `EDR1` checkpoint format.
//!
//! Checkpoint layout (little-endian): magic `EDR1`, `u32` tensor count, then
//! per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u64`
//! dimensions and the values as 32-bit floats.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EDR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let id = self.tensors.len();
        self.by_name.insert(name.to_owned(), id);
        self.names.push(name.to_owned());
        self.tensors.push(tensor);
        ParamId(id)
    }

    /// Adds a `rows × cols` weight drawn uniformly from `±1/sqrt(rows)`.
    pub fn add_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| round_f32(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor { rows, cols, data })
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Rounds every value to the nearest 32-bit float so a checkpoint round
    /// trip is lossless.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = round_f32(*v));
        }
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.iter() {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(2);
            buf.extend_from_slice(&(t.rows as u64).to_le_bytes());
            buf.extend_from_slice(&(t.cols as u64).to_le_bytes());
            for v in &t.data {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let count = u32::from_le_bytes(r.array()?);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?
                .to_owned();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u64::from_le_bytes(r.array()?) as usize);
            }
            let (rows, cols) = match dims[..] {
                [] => (1, 1),
                [n] => (1, n),
                [a, b] => (a, b),
                _ => return Err(Error::format(at, format!("unsupported rank {rank}"))),
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format(at, "tensor too large"))?;
            let bytes = r.take(n.checked_mul(4).ok_or_else(|| Error::format(at, "tensor too large"))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            if store.by_name.contains_key(&name) {
                return Err(Error::format(at, format!("duplicate tensor `{name}`")));
            }
            store.insert(&name, Tensor { rows, cols, data });
        }
        if r.pos != buf.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes in checkpoint"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Replaces every value with the same-named tensor from `path`. Names and
    /// shapes must match exactly.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = Self::from_bytes(&fs::read(path)?)?;
        self.copy_from(&loaded)
    }

    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let Some(&j) = other.by_name.get(name) else {
                return Err(Error::Config(format!("checkpoint lacks tensor `{name}`")));
            };
            if other.tensors[j].shape() != self.tensors[i].shape() {
                return Err(Error::Config(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    other.tensors[j].shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i].data.clone_from(&other.tensors[j].data);
        }
        Ok(())
    }
}

pub(crate) fn round_f32(v: f64) -> f64 {
    f64::from(v as f32)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format(self.pos as u64, "truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    tensors: Vec<Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }
}
