//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SPGN" | u32 version | u32 config length | config text (UTF-8)
//! | u32 record count | records (weights)
//! | u32 record count | records (EMA shadow)
//! | u32 CRC32 of every preceding byte
//! record = u32 name length | name | u8 dtype (0 = f32, 1 = f64)
//!        | u32 rank | u32 extent × rank | raw element bytes
//! ```
//!
//! Optimizer moments for resuming live in a sibling file with magic "SPGO"
//! and the same framing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{DType, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPGN";
pub const OPTIMIZER_MAGIC: &[u8; 4] = b"SPGO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S: Scalar> {
    /// Resolved run configuration, stored verbatim.
    pub config: String,
    pub weights: ParamStore<S>,
    pub ema: ParamStore<S>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        put_u32(&mut body, self.config.len() as u32);
        body.extend_from_slice(self.config.as_bytes());
        write_records(&mut body, &self.weights);
        write_records(&mut body, &self.ema);
        frame(CHECKPOINT_MAGIC, body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(unframe(CHECKPOINT_MAGIC, bytes)?);
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("config block is not UTF-8"))?;
        let weights = read_records(&mut r)?;
        let ema = read_records(&mut r)?;
        r.finish()?;
        Ok(Checkpoint { config, weights, ema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// CRC32 trailer, used as a short content identifier.
    pub fn id(&self) -> u32 {
        let bytes = self.to_bytes();
        u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap())
    }
}

/// Training progress needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<S: Scalar> {
    pub step: u64,
    pub adam_step: u64,
    pub best_val: f64,
    pub best_step: u64,
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&self.step.to_le_bytes());
        body.extend_from_slice(&self.adam_step.to_le_bytes());
        body.extend_from_slice(&self.best_val.to_bits().to_le_bytes());
        body.extend_from_slice(&self.best_step.to_le_bytes());
        write_records(&mut body, &self.m);
        write_records(&mut body, &self.v);
        frame(OPTIMIZER_MAGIC, body)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(unframe(OPTIMIZER_MAGIC, bytes)?);
        let step = r.u64()?;
        let adam_step = r.u64()?;
        let best_val = f64::from_bits(r.u64()?);
        let best_step = r.u64()?;
        let m = read_records(&mut r)?;
        let v = read_records(&mut r)?;
        r.finish()?;
        Ok(OptimizerState { step, adam_step, best_val, best_step, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn frame(magic: &[u8; 4], body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(magic);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

fn unframe<'a>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < 12 {
        return Err(corrupt("file too short"));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(corrupt(format!("CRC mismatch (stored {stored:08x}, computed {actual:08x})")));
    }
    if &payload[..4] != magic {
        return Err(corrupt(format!("bad magic {:?}", String::from_utf8_lossy(&payload[..4]))));
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {version}")));
    }
    Ok(&payload[8..])
}

fn write_records<S: Scalar>(out: &mut Vec<u8>, store: &ParamStore<S>) {
    put_u32(out, store.len() as u32);
    for (name, t) in store.iter() {
        put_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        out.push(S::DTYPE.tag());
        put_u32(out, t.rank() as u32);
        for &d in t.shape() {
            put_u32(out, d as u32);
        }
        for &v in t.data() {
            v.write_le(out);
        }
    }
}

fn read_records<S: Scalar>(r: &mut Reader<'_>) -> Result<ParamStore<S>> {
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("record name is not UTF-8"))?;
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| corrupt(format!("unknown dtype tag in `{name}`")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| corrupt("record too large"))?)?;
        let data: Vec<S> = match dtype {
            DType::F32 if S::DTYPE == DType::F32 => raw.chunks_exact(4).map(S::read_le).collect(),
            DType::F64 if S::DTYPE == DType::F64 => raw.chunks_exact(8).map(S::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| S::from_f64(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| S::from_f64(f64::read_le(c))).collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| corrupt(format!("record `{name}`: {e}")))?;
        if store.get(&name).is_some() {
            return Err(corrupt(format!("duplicate record `{name}`")));
        }
        store.insert(name, t);
    }
    Ok(store)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(corrupt(format!("{} trailing bytes", self.bytes.len() - self.pos)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn sample() -> Checkpoint<f32> {
        let mut rng = RngState::new(3);
        let weights: ParamStore<f32> =
            [("a.w".to_string(), rng.normal_tensor(&[2, 3])), ("b".to_string(), rng.normal_tensor(&[4]))].into_iter().collect();
        let ema = weights.iter().map(|(k, v)| (k.clone(), v.scale(0.5))).collect();
        Checkpoint { config: "[model]\nbase_channels = 8\n".into(), weights, ema }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"SPGN");
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn every_single_byte_flip_is_detected() {
        let bytes = sample().to_bytes();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(Checkpoint::<f32>::from_bytes(&bad).is_err(), "flip at {i} undetected");
        }
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn optimizer_state_round_trip() {
        let c = sample();
        let s = OptimizerState { step: 17, adam_step: 17, best_val: 0.25, best_step: 10, m: c.weights.clone(), v: c.ema.clone() };
        assert_eq!(OptimizerState::<f32>::from_bytes(&s.to_bytes()).unwrap(), s);
        assert!(Checkpoint::<f32>::from_bytes(&s.to_bytes()).is_err());
    }
}
