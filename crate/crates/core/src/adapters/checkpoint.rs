//! `OPT1` adapter container.
//!
//! ```text
//! magic "OPT1" | version u16 | meta_len u32 | meta JSON
//! repeated: name_len u32 | name | dtype u8 | rank u8 | dims u32×rank | payload
//! ```
//! All integers little-endian. dtype 0 is fp32; dtype 1 (fp64) is used only
//! when a tensor holds values fp32 cannot represent exactly, so every load is
//! bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{LoraSet, ScaleMap};
use crate::backbone::UNetContext;
use crate::tensor::{ParamStore, Tensor};
use crate::vcm::VcmParams;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OPT1";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
    pub scale_map: ScaleMap,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

/// LoRA factors plus tuned VCM tensors.
#[derive(Debug, Clone)]
pub struct AdapterCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamStore,
}

impl AdapterCheckpoint {
    /// Packs `lora` and the named VCM tensors.
    pub fn new(lora: &LoraSet, vcm: &VcmParams, vcm_names: &[String], meta: CheckpointMeta) -> Result<Self> {
        let mut tensors = lora.params().clone();
        for name in vcm_names {
            let t = vcm
                .store()
                .get_arc(name)
                .ok_or_else(|| Error::config(format!("unknown VCM tensor {name}")))?;
            tensors.insert_arc(name.clone(), t.clone());
        }
        Ok(Self { meta, tensors })
    }

    /// Rebuilds the LoRA set against `ctx`'s registry.
    pub fn lora_set(&self, ctx: &UNetContext) -> Result<LoraSet> {
        LoraSet::from_params(ctx, self.meta.rank, self.meta.alpha, self.tensors.filter_prefix("lora."))
    }

    /// Overwrites the VCM tensors stored in the checkpoint.
    pub fn apply_vcm(&self, vcm: &mut VcmParams) -> Result<()> {
        let stored = self.tensors.filter_prefix("vcm.");
        for (name, t) in stored.iter() {
            let cur = vcm
                .store()
                .get(name)
                .ok_or_else(|| Error::config(format!("checkpoint tensor {name} unknown to VCM")))?;
            if cur.shape() != t.shape() {
                return Err(Error::dim(format!("checkpoint tensor {name} has shape {:?}", t.shape())));
            }
        }
        vcm.store_mut().extend(&stored);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_container(&self.meta, &self.tensors)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (meta, tensors) = decode_container(bytes, origin)?;
        Ok(Self { meta, tensors })
    }
}

/// Serializes any metadata record plus named tensors into the container.
pub(crate) fn encode_container<M: Serialize>(meta: &M, tensors: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(meta).map_err(|e| Error::config(e.to_string()))?;
    push_len(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    for (name, t) in tensors.iter() {
        push_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        let exact = t.iter().all(|&v| (v as f32) as f64 == v || v.is_nan());
        out.push(if exact { DTYPE_F32 } else { DTYPE_F64 });
        let rank = u8::try_from(t.ndim()).map_err(|_| Error::dim("tensor rank above 255"))?;
        out.push(rank);
        for &d in t.shape() {
            push_len(&mut out, d)?;
        }
        for &v in t.iter() {
            if exact {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub(crate) fn decode_container<M: DeserializeOwned>(bytes: &[u8], origin: &Path) -> Result<(M, ParamStore)> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4)? != MAGIC {
        return Err(Error::format(origin, "bad magic"));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("two bytes"));
    if version != VERSION {
        return Err(Error::format(origin, format!("unsupported version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta: M = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::format(origin, format!("metadata: {e}")))?;
    let mut tensors = ParamStore::new();
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            DTYPE_F32 => r
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DTYPE_F64 => r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            other => return Err(Error::format(origin, format!("unknown dtype tag {other}"))),
        };
        let t: Tensor = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims");
        tensors.insert(name, t);
    }
    Ok((meta, tensors))
}

pub fn save_checkpoint(path: &Path, ckpt: &AdapterCheckpoint) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<AdapterCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    AdapterCheckpoint::from_bytes(&bytes, path)
}

fn push_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::dim("length exceeds u32"))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.origin, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }
}
