//! Binary checkpoint: magic `GSEG`, `u32` version, length-prefixed config
//! text, tensor count, tensors, trailing CRC-32 of everything before it.
//! All integers are little-endian.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::config::{parse_pairs, TrainConfig};
use super::{TrainError, TrainState};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"GSEG";
pub const VERSION: u32 = 1;

const KEY_EPOCH: &str = "epoch";
const KEY_ADAM_STEP: &str = "adam_step";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

/// Serializes weights, optimizer moments, config and progress.
pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut text = state.config.to_text();
    text.push_str(&format!("{KEY_EPOCH} = {}\n{KEY_ADAM_STEP} = {}\n", state.epoch, state.adam.step));
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
    for (i, p) in state.params.iter().enumerate() {
        tensors.push((format!("w/{}", p.name), &p.value));
        tensors.push((format!("m/{}", p.name), &state.adam.m[i]));
        tensors.push((format!("v/{}", p.name), &state.adam.v[i]));
    }
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dtype_code(f32::DTYPE));
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        out.extend_from_slice(&f32::to_le_bytes_vec(t.data()));
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(LittleEndian::read_u64(self.take(8)?))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
    }
}

/// Parses and verifies a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<TrainState, TrainError> {
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(CheckpointError::Version(version).into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = LittleEndian::read_u32(tail);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let mut r = Reader { bytes: body, at: 8 };
    let text = r.string()?;
    let mut epoch = None;
    let mut adam_step = None;
    let mut config_text = String::new();
    for (k, v) in parse_pairs(&text)? {
        let parse = |v: &str| v.parse::<u64>().map_err(|_| CheckpointError::Malformed(format!("{k} = {v}")));
        match k.as_str() {
            KEY_EPOCH => epoch = Some(parse(&v)? as usize),
            KEY_ADAM_STEP => adam_step = Some(parse(&v)?),
            _ => config_text.push_str(&format!("{k} = {v}\n")),
        }
    }
    let config = TrainConfig::from_text(&config_text)?;
    let (Some(epoch), Some(adam_step)) = (epoch, adam_step) else {
        return Err(CheckpointError::Malformed("missing progress fields".into()).into());
    };

    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let code = r.take(1)?[0];
        if code != dtype_code(f32::DTYPE) {
            return Err(CheckpointError::Malformed(format!("{name}: dtype code {code}")).into());
        }
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(CheckpointError::Malformed(format!("{name}: rank {rank}")).into());
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::Truncated)?;
        let t = Tensor::new(shape, f32::from_le_bytes_slice(r.take(n)?))?;
        match name.split_once('/') {
            Some(("w", p)) => {
                params.insert(p, t)?;
            }
            Some(("m", _)) => m.push(t),
            Some(("v", _)) => v.push(t),
            _ => return Err(CheckpointError::Malformed(format!("tensor name {name:?}")).into()),
        }
    }
    if r.at != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()).into());
    }
    if m.len() != params.len() || v.len() != params.len() {
        return Err(CheckpointError::Malformed("optimizer state does not match weights".into()).into());
    }
    let mut adam = AdamState::new(&params);
    adam.step = adam_step;
    adam.m = m;
    adam.v = v;
    Ok(TrainState {
        config,
        params,
        adam,
        epoch,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(state)).map_err(|e| TrainError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
    decode(&bytes)
}
