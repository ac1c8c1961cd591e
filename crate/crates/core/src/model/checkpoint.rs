//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//! magic `FAV1`, 32-byte SHA-256 of the canonical model config, blob count,
//! then per blob: name length, UTF-8 name, rank, extents, `f32` values.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::train::{AdamW, TrainState};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"FAV1";

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(cfg.canonical().as_bytes()).into()
}

/// `u64` as four 16-bit chunks, each exact in `f32`.
fn split_u64(v: u64) -> [f64; 4] {
    [0, 16, 32, 48].map(|s| ((v >> s) & 0xffff) as f64)
}

fn join_u64(chunks: &[f64]) -> Result<u64> {
    let mut v = 0u64;
    for (i, &c) in chunks.iter().enumerate() {
        if !(0.0..65536.0).contains(&c) || c.fract() != 0.0 {
            return Err(Error::Format(format!("corrupt integer chunk {c}")));
        }
        v |= (c as u64) << (16 * i);
    }
    Ok(v)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len())?;
    for &e in t.shape() {
        put_u32(out, e)?;
    }
    for &v in t.data() {
        let f = v as f32;
        if f as f64 != v {
            return Err(Error::Format(format!("{name} holds a value not representable in f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let store = &state.model.store;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&config_digest(&state.model.cfg));
    put_u32(&mut out, 3 * store.len() + 2)?;
    for p in store.iter() {
        put_blob(&mut out, &p.name, &p.value)?;
    }
    for (p, (m, v)) in store.iter().zip(state.m.iter().zip(&state.v)) {
        put_blob(&mut out, &format!("adam.m.{}", p.name), m)?;
        put_blob(&mut out, &format!("adam.v.{}", p.name), v)?;
    }
    let counters: Vec<f64> = split_u64(state.epoch).into_iter().chain(split_u64(state.step)).collect();
    put_blob(&mut out, "train.counters", &Tensor::new(vec![8], counters)?)?;
    put_blob(&mut out, "train.seed", &Tensor::new(vec![4], split_u64(state.seed).to_vec())?)?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn blob(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("blob name is not UTF-8".into()))?;
        let rank = self.u32()?;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("{name}: extents overflow")))?;
        let raw = self.take(count.checked_mul(4).ok_or_else(|| Error::Format(format!("{name}: extents overflow")))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Restores a state written by [`to_bytes`]. The config must match the one
/// the checkpoint was written with.
pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig, optimizer: AdamW) -> Result<TrainState> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint: bad magic".into()));
    }
    if r.take(32)? != config_digest(cfg) {
        return Err(Error::Format("checkpoint was written for a different model config".into()));
    }
    let blobs = r.u32()?;
    let mut state = TrainState::new(cfg, 0, optimizer)?;
    let names: Vec<String> = state.model.store.iter().map(|p| p.name.clone()).collect();
    let expected = 3 * names.len() + 2;
    if blobs != expected {
        return Err(Error::Format(format!("checkpoint holds {blobs} blobs, expected {expected}")));
    }
    let mut seen = BTreeSet::new();
    for _ in 0..blobs {
        let (name, t) = r.blob()?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate blob `{name}`")));
        }
        let slot = if let Some(rest) = name.strip_prefix("adam.m.") {
            names.iter().position(|n| n == rest).map(|i| &mut state.m[i])
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            names.iter().position(|n| n == rest).map(|i| &mut state.v[i])
        } else if name == "train.counters" && t.len() == 8 {
            state.epoch = join_u64(&t.data()[..4])?;
            state.step = join_u64(&t.data()[4..])?;
            continue;
        } else if name == "train.seed" && t.len() == 4 {
            state.seed = join_u64(t.data())?;
            continue;
        } else {
            state.model.store.id(&name).map(|id| &mut state.model.store.get_mut(id).value)
        };
        let slot = slot.ok_or_else(|| Error::Format(format!("unexpected blob `{name}`")))?;
        if slot.shape() != t.shape() {
            return Err(Error::Format(format!(
                "blob `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after the last blob".into()));
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)?)?;
    Ok(())
}

pub fn load(path: &Path, cfg: &ModelConfig, optimizer: AdamW) -> Result<TrainState> {
    from_bytes(&fs::read(path)?, cfg, optimizer)
}
