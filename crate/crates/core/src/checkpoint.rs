//! The CAPCTL1 tensor container shared by captioner and matcher checkpoints.
//!
//! Layout (little endian): magic `CAPCTL1`, format version `u8`, tensor
//! count `u32`; per tensor a `u16` name length, the UTF-8 name, a `u8` rank,
//! `u32` extents and row-major `f32` data; a CRC32 of everything before it
//! closes the file.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, ParamSet, Real, Tensor};

pub const MAGIC: &[u8; 7] = b"CAPCTL1";
pub const FORMAT_VERSION: u8 = 1;

const VOCAB_HASH_KEY: &str = "meta/vocab_hash";
const OPTIM_STEP_KEY: &str = "optim/step";

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Ordered list of named `f32` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Adds or replaces an entry; replaced entries keep their position.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.len() > u16::MAX as usize {
            return format_err(format!("tensor name length {} out of range", name.len()));
        }
        if tensor.shape().len() > u8::MAX as usize
            || tensor.shape().iter().any(|&d| d > u32::MAX as usize)
        {
            return format_err(format!(
                "tensor {name:?} shape {:?} not representable",
                tensor.shape()
            ));
        }
        let tensor = Tensor::from_shared(tensor.shape().to_vec(), tensor.shared());
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = tensor,
            None => self.entries.push((name, tensor)),
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no entry {name:?}")))
    }

    pub fn set_meta(&mut self, name: &str, value: f64) -> Result<()> {
        self.insert(name, Tensor::scalar(value as f32))
    }

    pub fn meta(&self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.numel() != 1 {
            return format_err(format!("{name:?} is not a scalar"));
        }
        Ok(f64::from(t.item()))
    }

    /// Integer metadata; the stored value must be a whole number.
    pub fn meta_u64(&self, name: &str) -> Result<u64> {
        let v = self.meta(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return format_err(format!("{name:?} = {v} is not a non-negative integer"));
        }
        Ok(v as u64)
    }

    /// Stores a 64-bit hash exactly as four 16-bit chunks.
    pub fn set_vocab_hash(&mut self, hash: u64) -> Result<()> {
        let chunks = (0..4)
            .map(|i| ((hash >> (16 * i)) & 0xffff) as f32)
            .collect();
        self.insert(VOCAB_HASH_KEY, Tensor::new(vec![4], chunks)?)
    }

    pub fn vocab_hash(&self) -> Result<u64> {
        let t = self.require(VOCAB_HASH_KEY)?;
        if t.numel() != 4 {
            return format_err("vocabulary hash must hold 4 chunks");
        }
        Ok(t.data()
            .iter()
            .enumerate()
            .fold(0u64, |h, (i, &c)| h | ((c as u64) << (16 * i))))
    }

    /// Copies every parameter under its own name.
    pub fn insert_params<F: Real>(&mut self, params: &ParamSet<F>) -> Result<()> {
        for (_, name, t) in params.iter() {
            self.insert(name, t.cast::<f32>())?;
        }
        Ok(())
    }

    /// Parameters whose names start with `prefix`, in stored order.
    pub fn params_with_prefix(&self, prefix: &str) -> Result<ParamSet<f32>> {
        let mut p = ParamSet::new();
        for (name, t) in self.entries.iter().filter(|(n, _)| n.starts_with(prefix)) {
            p.insert(name.clone(), t.clone())?;
        }
        Ok(p)
    }

    /// Stores Adam moments as `optim/m/<param>` and `optim/v/<param>`.
    pub fn insert_adam(&mut self, params: &ParamSet<f32>, adam: &Adam<f32>) -> Result<()> {
        let (m, v) = adam.moments();
        for ((_, name, t), (mi, vi)) in params.iter().zip(m.iter().zip(v)) {
            self.insert(
                format!("optim/m/{name}"),
                Tensor::new(t.shape().to_vec(), mi.clone())?,
            )?;
            self.insert(
                format!("optim/v/{name}"),
                Tensor::new(t.shape().to_vec(), vi.clone())?,
            )?;
        }
        self.set_meta(OPTIM_STEP_KEY, adam.step_count() as f64)
    }

    /// Restores Adam state for `params` when present.
    pub fn adam(&self, params: &ParamSet<f32>, config: AdamConfig) -> Result<Option<Adam<f32>>> {
        if self.get(OPTIM_STEP_KEY).is_none() {
            return Ok(None);
        }
        let step = self.meta_u64(OPTIM_STEP_KEY)?;
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (_, name, t) in params.iter() {
            for (kind, out) in [("m", &mut m), ("v", &mut v)] {
                let s = self.require(&format!("optim/{kind}/{name}"))?;
                if s.shape() != t.shape() {
                    return format_err(format!("optimizer state for {name:?} has the wrong shape"));
                }
                out.push(s.data().to_vec());
            }
        }
        Ok(Some(Adam::from_state(config, step, m, v)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 1 + 4 + 4 {
            return format_err("checkpoint truncated");
        }
        let (body, footer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return format_err("checkpoint checksum mismatch");
        }
        if &body[..MAGIC.len()] != MAGIC {
            return format_err("not a CAPCTL1 checkpoint");
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return format_err(format!("unsupported checkpoint version {version}"));
        }
        let count = r.u32()?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if ckpt.get(&name).is_some() {
                return format_err(format!("duplicate tensor {name:?}"));
            }
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            ckpt.insert(name, t)?;
        }
        if r.pos != body.len() {
            return format_err("trailing bytes after the last tensor");
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return format_err("checkpoint truncated");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.insert(
            "a/w",
            Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.0]).unwrap(),
        )
        .unwrap();
        c.set_meta("meta/beta_dim", 4.0).unwrap();
        c.set_vocab_hash(0xdead_beef_0123_4567).unwrap();
        c
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.vocab_hash().unwrap(), 0xdead_beef_0123_4567);
        assert_eq!(back.meta_u64("meta/beta_dim").unwrap(), 4);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..7], b"CAPCTL1");
        assert_eq!(bytes[7], FORMAT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 3);
        assert_eq!(&bytes[14..17], b"a/w");
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = sample().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut c = sample();
        c.set_meta("a/w", 1.0).unwrap();
        assert_eq!(c.names().next(), Some("a/w"));
        assert_eq!(c.len(), 3);
    }
}
