//! Named trainable parameters, non-trainable buffers, and the flat archive
//! used to persist both.
//!
//! Archive layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "GASTCKPT"
//! version u32      ARCHIVE_VERSION
//! count   u32
//! entry*  name_len u32, name utf-8, dtype u8 (1 = f32, 2 = f64),
//!         rank u32, dims u64 * rank, values (dtype-sized) * product(dims)
//! ```

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"GASTCKPT";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<S> {
    pub name: String,
    pub value: Tensor<S>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
    buffers: Vec<Buffer<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
        }
    }

    fn check_unique(&self, name: &str) -> Result<()> {
        if self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name) {
            return Err(Error::contract(alloc::format!("duplicate parameter name `{name}`")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        self.check_unique(&name)?;
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<BufferId> {
        let name = name.into();
        self.check_unique(&name)?;
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<S> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<S> {
        &mut self.buffers[id.0].value
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(S::ZERO);
        }
    }

    /// Adds `grad` onto the stored gradient of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[S]) {
        for (a, &b) in self.params[id.0].grad.data_mut().iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub fn scale_grads(&mut self, s: S) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Every parameter and buffer as named tensors, parameters first.
    pub fn to_entries(&self) -> Vec<(String, Tensor<S>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .chain(self.buffers.iter().map(|b| (b.name.clone(), b.value.clone())))
            .collect()
    }

    /// Overwrites values from named entries. Every parameter and buffer must be
    /// present with a matching shape; extra entries are ignored.
    pub fn load_entries(&mut self, entries: &[(String, Tensor<S>)]) -> Result<()> {
        let lookup = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let slots = self
            .params
            .iter_mut()
            .map(|p| (&p.name, &mut p.value))
            .chain(self.buffers.iter_mut().map(|b| (&b.name, &mut b.value)));
        for (name, value) in slots {
            let t = lookup(name).ok_or_else(|| Error::Format(alloc::format!("missing entry `{name}`")))?;
            if t.shape() != value.shape() {
                return Err(Error::Format(alloc::format!(
                    "entry `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    value.shape()
                )));
            }
            *value = t.clone();
        }
        Ok(())
    }
}

/// He-normal initialization for a convolution weight `[Cout, Cin, k...]`.
pub fn kaiming_normal<S: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    let fan_in: usize = shape[1..].iter().product();
    let std = libm::sqrt(2.0 / fan_in as f64);
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| S::from_f64(normal.sample(rng)))
}

pub fn encode_archive<S: Real>(entries: &[(String, Tensor<S>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ARCHIVE_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of archive".to_string()))?;
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

/// Decodes an archive, converting stored values into `S`.
pub fn decode_archive<S: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != ARCHIVE_MAGIC {
        return Err(Error::Format("bad magic".to_string()));
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(Error::Format(alloc::format!("unsupported archive version {version}")));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not utf-8".to_string()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<S> = match dtype {
            <f32 as Real>::DTYPE => r.take(n * 4)?.chunks(4).map(|c| S::from_f64(f32::read_le(c) as f64)).collect(),
            <f64 as Real>::DTYPE => r.take(n * 8)?.chunks(8).map(|c| S::from_f64(f64::read_le(c))).collect(),
            other => return Err(Error::Format(alloc::format!("unknown dtype tag {other}"))),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(alloc::format!("entry `{name}`: {e}")))?;
        entries.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after last entry".to_string()));
    }
    Ok(entries)
}
