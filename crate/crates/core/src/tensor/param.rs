//! Named trainable parameters and their binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "GIUDA1"
//! repeated until end of file:
//!     u32 name length, name bytes (UTF-8)
//!     u32 rank, rank × u64 extents
//!     product(extents) × f64 values, row-major
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{ensure, Error, Result};
use crate::tensor::graph::Gradients;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"GIUDA1";

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step_count: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        ensure!(
            self.find(&name).is_none(),
            "duplicate parameter name `{name}`"
        );
        self.params.push(Parameter::new(name, value));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the parameter gradients of one backward pass into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            let shape = p.value.shape();
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &e in shape {
                w.write_all(&(e as u64).to_le_bytes())?;
            }
            for &x in p.value.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses a checkpoint into fresh parameters (optimizer state zeroed).
    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        if cur.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("missing GIUDA1 magic".into()));
        }
        let mut store = ParamStore::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let shape = (0..rank)
                .map(|_| cur.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            store
                .add(name, value)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add(
            "enc.0.weight",
            Tensor::matrix(2, 3, vec![1.0, -0.0, 1e-300, f64::MAX, 0.1, -7.25]).unwrap(),
        )
        .unwrap();
        s.add(
            "enc.0.bias",
            Tensor::vector(vec![0.5, 0.25, -0.125]).unwrap(),
        )
        .unwrap();
        s
    }

    #[test]
    fn checkpoint_bytes_follow_the_layout() {
        let mut s = ParamStore::new();
        s.add("b", Tensor::vector(vec![1.5]).unwrap()).unwrap();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let mut expect = b"GIUDA1".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'b');
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut buf = Vec::new();
        sample().write_checkpoint(&mut buf).unwrap();
        assert!(ParamStore::read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ParamStore::read_checkpoint(&bad[..]).is_err());
        assert!(ParamStore::read_checkpoint(&b""[..]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample();
        assert!(s.add("enc.0.bias", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn fresh_parameters_have_zero_moments() {
        let s = sample();
        for p in s.iter() {
            assert!(p.m.data().iter().chain(p.v.data()).all(|&x| x == 0.0));
            assert_eq!(p.grad.shape(), p.value.shape());
            assert_eq!(p.step_count, 0);
        }
    }
}
