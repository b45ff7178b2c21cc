//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "CDFD"  u32 version  u64 blob length  blob (canonical JSON)
//! repeated: u32 name length, name (UTF-8), u8 dtype, u32 rank,
//!           u64 dims[rank], f32 payload
//! ```
//!
//! The blob holds the configuration, the completed step count and whether
//! optimiser moments follow. Parameter records come in store order; moment
//! records are named `adam.m.<param>` and `adam.v.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, Model, TrainState};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CDFD";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: DetectorConfig,
    step: u64,
    optimizer: bool,
}

/// A model and, for training checkpoints, its optimiser state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub state: Option<TrainState>,
}

fn record(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn write_checkpoint(model: &Model, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        step: state.map_or(0, |s| s.step),
        optimizer: state.is_some(),
    };
    let blob = crate::json::to_string(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    for (name, t) in model.params.iter() {
        record(&mut out, name, t);
    }
    if let Some(s) = state {
        for (kind, ts) in [("m", &s.m), ("v", &s.v)] {
            for (name, t) in model.params.names().iter().zip(ts) {
                record(&mut out, &format!("adam.{kind}.{name}"), t);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Parse(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Parse("record name is not UTF-8".into()))?;
        let dtype = self.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Parse(format!(
                "record {name}: unknown dtype {dtype}"
            )));
        }
        let rank = self.u32()? as usize;
        let dims = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let payload = self.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| Error::Parse("record too large".into()))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok((name, Tensor::new(&dims, data)?))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let blob_len = r.u64()? as usize;
    let blob = std::str::from_utf8(r.take(blob_len)?)
        .map_err(|_| Error::Parse("config blob is not UTF-8".into()))?;
    let header: Header =
        serde_json::from_str(blob).map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;

    // The configuration determines the expected names and shapes.
    let mut model = Model::init(header.config)?;
    let names: Vec<String> = model.params.names().to_vec();
    let expect = |r: &mut Reader<'_>, name: &str, shape: &[usize]| -> Result<Tensor> {
        let (got, t) = r.record()?;
        if got != name || t.shape() != shape {
            return Err(Error::Parse(format!(
                "record {got} {:?} where {name} {shape:?} was expected",
                t.shape()
            )));
        }
        Ok(t)
    };
    let shapes: Vec<Vec<usize>> = model
        .params
        .tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    for (i, name) in names.iter().enumerate() {
        model.params.tensors_mut()[i] = expect(&mut r, name, &shapes[i])?;
    }
    let state = if header.optimizer {
        let mut s = TrainState::new(&model.params);
        s.step = header.step;
        for (kind, slot) in [("m", &mut s.m), ("v", &mut s.v)] {
            for (i, name) in names.iter().enumerate() {
                slot[i] = expect(&mut r, &format!("adam.{kind}.{name}"), &shapes[i])?;
            }
        }
        Some(s)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Parse(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint { model, state })
}

pub fn save_checkpoint(path: &Path, model: &Model, state: Option<&TrainState>) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, write_checkpoint(model, state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    read_checkpoint(&bytes)
}
