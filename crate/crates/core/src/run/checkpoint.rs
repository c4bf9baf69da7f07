//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MXLR" | u32 version | u64 meta length | meta JSON
//! repeated: u32 name length | name | u8 dtype | u8 ndim | u32 dims[ndim] | payload
//! ```

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::TaskKind;
use crate::error::{CheckpointError, Result};
use crate::model::{AdapterSet, FrozenBase};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"MXLR";
pub const VERSION: u32 = 1;

/// One tensor record as stored, payload still encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn decode<T: Scalar>(&self) -> Result<Tensor<T>, CheckpointError> {
        if self.dtype != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                found: self.dtype.code(),
                expected: T::DTYPE.code(),
            });
        }
        let data = self.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(self.shape.clone(), data).map_err(|_| CheckpointError::TensorShape {
            name: self.name.clone(),
            found: self.shape.clone(),
            expected: vec![],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawCheckpoint {
    pub version: u32,
    pub meta_json: String,
    pub tensors: Vec<RawTensor>,
}

pub fn encode<T: Scalar>(meta_json: &str, tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(meta_json.as_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.code());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
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
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = r.u64("metadata length")?;
    let meta_len = usize::try_from(meta_len).map_err(|_| CheckpointError::Truncated("metadata"))?;
    let meta = r.take(meta_len, "metadata")?;
    let meta_json = String::from_utf8(meta.to_vec()).map_err(|_| CheckpointError::Truncated("metadata"))?;
    let mut tensors = Vec::new();
    while r.remaining() > 0 {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| CheckpointError::Truncated("tensor name"))?;
        let code = r.u8("dtype")?;
        let dtype = DType::from_code(code).ok_or(CheckpointError::UnknownDType(code))?;
        let ndim = r.u8("ndim")? as usize;
        let shape = (0..ndim).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or(CheckpointError::Truncated("payload"))?;
        let payload = r.take(numel, "payload")?.to_vec();
        tensors.push(RawTensor { name, dtype, shape, payload });
    }
    Ok(RawCheckpoint { version, meta_json, tensors })
}

/// What a checkpoint describes beyond its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub run: RunConfig,
    /// Tasks each adapter set was trained on, in set order.
    pub sets: Vec<Vec<TaskKind>>,
    pub steps: usize,
}

/// A frozen base with its trained adapter sets.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub base: Arc<FrozenBase<T>>,
    pub sets: Vec<AdapterSet<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_string(&self.meta).expect("meta serializes");
        let mut tensors = self.base.named_tensors();
        for (i, set) in self.sets.iter().enumerate() {
            tensors.extend(set.named_params().into_iter().map(|(n, t)| (format!("sets.{i}.{n}"), t)));
        }
        encode(&meta, &tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let raw = decode(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&raw.meta_json)?;
        meta.run.validate()?;
        if meta.run.precision.dtype() != T::DTYPE {
            return Err(CheckpointError::DTypeMismatch {
                found: meta.run.precision.dtype().code(),
                expected: T::DTYPE.code(),
            }
            .into());
        }
        let mut pool: std::collections::BTreeMap<&str, &RawTensor> = std::collections::BTreeMap::new();
        for t in &raw.tensors {
            if pool.insert(t.name.as_str(), t).is_some() {
                return Err(CheckpointError::UnexpectedTensor(t.name.clone()).into());
            }
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<T>> {
            let raw = pool.remove(name).ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
            if raw.shape != shape {
                return Err(CheckpointError::TensorShape {
                    name: name.to_string(),
                    found: raw.shape.clone(),
                    expected: shape.to_vec(),
                }
                .into());
            }
            Ok(raw.decode()?)
        };
        let cfg = &meta.run.model;
        let base = Arc::new(FrozenBase::from_named(cfg, &mut take)?);
        let mut sets = Vec::with_capacity(meta.sets.len());
        for i in 0..meta.sets.len() {
            let mut set = AdapterSet::init(cfg, 0, meta.run.optimizer())?;
            let names: Vec<(String, Vec<usize>)> =
                set.named_params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
            for ((name, shape), slot) in names.iter().zip(set.params_mut()) {
                *slot = take(&format!("sets.{i}.{name}"), shape)?;
            }
            sets.push(set);
        }
        if let Some(name) = pool.keys().next() {
            return Err(CheckpointError::UnexpectedTensor(name.to_string()).into());
        }
        Ok(Self { meta, base, sets })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Reads only the metadata, to pick the precision before a full load.
pub fn read_meta(bytes: &[u8]) -> Result<CheckpointMeta> {
    let raw = decode(bytes)?;
    Ok(serde_json::from_str(&raw.meta_json)?)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip() {
        let a = Tensor::<f32>::from_f64(vec![2, 3], &[1.0, -2.0, 3.5, 0.0, 1e-3, 7.0]).unwrap();
        let b = Tensor::<f32>::from_f64(vec![1], &[4.0]).unwrap();
        let bytes = encode("{}", &[("a".into(), &a), ("b".into(), &b)]);
        let raw = decode(&bytes).unwrap();
        assert_eq!(raw.meta_json, "{}");
        assert_eq!(raw.tensors.len(), 2);
        assert_eq!(raw.tensors[0].decode::<f32>().unwrap(), a);
        assert!(matches!(raw.tensors[0].decode::<f64>(), Err(CheckpointError::DTypeMismatch { .. })));
        let again = encode("{}", &[("a".into(), &a), ("b".into(), &b)]);
        assert_eq!(bytes, again);
    }

    #[test]
    fn corruption_is_named() {
        let a = Tensor::<f64>::zeros(vec![4]);
        let bytes = encode("{}", &[("a".into(), &a)]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic { .. })));
        for cut in [2, 6, 13, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(CheckpointError::Truncated(_))), "cut {cut}");
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode(&v), Err(CheckpointError::UnsupportedVersion(9))));
        let mut d = bytes;
        let dtype_at = 4 + 4 + 8 + 2 + 4 + 1;
        d[dtype_at] = 7;
        assert!(matches!(decode(&d), Err(CheckpointError::UnknownDType(7))));
    }
}
