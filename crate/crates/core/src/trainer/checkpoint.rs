//! Archive layout, all integers little-endian:
//!
//! ```text
//! "TULIPCK1"  u32 version  u32 count
//! count × { u32 name_len, name, u8 dtype, u32 rank, rank × u64 extent, u64 offset }
//! zero padding to a 64-byte boundary, then each payload at its offset (64-byte aligned)
//! u32 CRC32 of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Params;
use crate::tensor::{numel, DType, Real, Tensor};
use crate::views::TeacherState;

use super::config::TrainConfig;
use super::optim::AdamState;
use super::step::TrainState;

pub const MAGIC: &[u8; 8] = b"TULIPCK1";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

/// One stored array with its raw little-endian payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn real<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for v in t.data() {
            match T::DTYPE {
                DType::F32 => bytes.extend((v.f64() as f32).to_le_bytes()),
                _ => bytes.extend(v.f64().to_le_bytes()),
            }
        }
        Self { name: name.into(), dtype: T::DTYPE, shape: t.shape().to_vec(), bytes }
    }

    pub fn u64s(name: impl Into<String>, values: &[u64]) -> Self {
        let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { name: name.into(), dtype: DType::U64, shape: vec![values.len()], bytes }
    }

    pub fn text(name: impl Into<String>, s: &str) -> Self {
        Self { name: name.into(), dtype: DType::U8, shape: vec![s.len()], bytes: s.as_bytes().to_vec() }
    }

    pub fn to_real<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!("{}: stored as {:?}, expected {:?}", self.name, self.dtype, T::DTYPE)));
        }
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.bytes.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            _ => self.bytes.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        };
        Ok(Tensor::new(self.shape.clone(), data)?)
    }

    pub fn to_u64s(&self) -> Result<Vec<u64>> {
        if self.dtype != DType::U64 {
            return Err(Error::Checkpoint(format!("{}: expected u64 values", self.name)));
        }
        Ok(self.bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn to_text(&self) -> Result<String> {
        String::from_utf8(self.bytes.clone()).map_err(|_| Error::Checkpoint(format!("{}: not UTF-8", self.name)))
    }
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes entries in the given order.
pub fn encode(entries: &[Entry]) -> Vec<u8> {
    let mut header = Vec::new();
    header.extend(MAGIC);
    header.extend(VERSION.to_le_bytes());
    header.extend((entries.len() as u32).to_le_bytes());
    let manifest_len: usize = entries.iter().map(|e| 4 + e.name.len() + 1 + 4 + 8 * e.shape.len() + 8).sum();
    let mut offset = align(header.len() + manifest_len);
    for e in entries {
        header.extend((e.name.len() as u32).to_le_bytes());
        header.extend(e.name.as_bytes());
        header.push(e.dtype.code());
        header.extend((e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            header.extend((d as u64).to_le_bytes());
        }
        header.extend((offset as u64).to_le_bytes());
        offset = align(offset + e.bytes.len());
    }
    let mut out = header;
    for e in entries {
        out.resize(align(out.len()), 0);
        out.extend(&e.bytes);
    }
    out.resize(align(out.len()), 0);
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("manifest runs past the end of the file".into()))?;
        let s = &self.buf[self.pos..end];
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

/// Parses and verifies an archive. Checks the CRC before looking at anything else.
pub fn decode(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch (truncated or corrupted file)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name not UTF-8".into()))?;
        let dtype = DType::from_code(r.take(1)?[0]).ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        let size = shape.iter().try_fold(dtype.size(), |a, &d| a.checked_mul(d));
        let end = size.and_then(|s| offset.checked_add(s)).filter(|&e| e <= body.len() && offset % ALIGN == 0);
        let end = end.ok_or_else(|| Error::Checkpoint(format!("{name}: payload outside the file")))?;
        out.push(Entry { name, dtype, shape, bytes: body[offset..end].to_vec() });
    }
    Ok(out)
}

pub fn save_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode(entries))?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_entries(path: &Path) -> Result<Vec<Entry>> {
    decode(&std::fs::read(path)?)
}

/// Student, teacher, both Adam moments, the step and seed, and the config text.
pub fn state_entries<T: Real>(state: &TrainState<T>, cfg: &TrainConfig) -> Vec<Entry> {
    let mut out = vec![Entry::text("meta.config", &cfg.to_text()), Entry::u64s("meta.step", &[state.step, state.adam.t, cfg.seed])];
    let mut add = |prefix: &str, p: &Params<T>| {
        out.extend(p.iter().map(|(k, t)| Entry::real(format!("{prefix}{k}"), t)));
    };
    add("student.", &state.params);
    add("teacher.", &state.teacher.params);
    add("adam.m.", &state.adam.m);
    add("adam.v.", &state.adam.v);
    out
}

pub fn save_checkpoint<T: Real>(path: &Path, state: &TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    save_entries(path, &state_entries(state, cfg))
}

/// Restores a state and its config, checking every tensor against the shapes a fresh
/// model of that config would have.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(TrainState<T>, TrainConfig)> {
    state_from_entries(&load_entries(path)?)
}

pub fn state_from_entries<T: Real>(entries: &[Entry]) -> Result<(TrainState<T>, TrainConfig)> {
    let find = |n: &str| entries.iter().find(|e| e.name == n).ok_or_else(|| Error::Checkpoint(format!("missing {n}")));
    let cfg = TrainConfig::from_text(&find("meta.config")?.to_text()?)?;
    let meta = find("meta.step")?.to_u64s()?;
    let [step, adam_t, _seed] = meta[..] else { return Err(Error::Checkpoint("meta.step must hold 3 values".into())) };
    let reference: TrainState<T> = TrainState::new(&cfg)?;
    let read = |prefix: &str, like: &Params<T>| -> Result<Params<T>> {
        let mut p = Params::new();
        for (k, t) in like.iter() {
            let e = find(&format!("{prefix}{k}"))?;
            if e.shape != t.shape() || numel(&e.shape) * e.dtype.size() != e.bytes.len() {
                return Err(Error::Checkpoint(format!("{prefix}{k}: shape {:?}, expected {:?}", e.shape, t.shape())));
            }
            p.insert(k.clone(), e.to_real()?);
        }
        Ok(p)
    };
    let expected = 2 + 2 * reference.params.len() + reference.teacher.params.len() + reference.params.len();
    if entries.len() != expected {
        return Err(Error::Checkpoint(format!("{} entries, expected {expected}", entries.len())));
    }
    let state = TrainState {
        step,
        params: read("student.", &reference.params)?,
        teacher: TeacherState { params: read("teacher.", &reference.teacher.params)? },
        adam: AdamState { m: read("adam.m.", &reference.params)?, v: read("adam.v.", &reference.params)?, t: adam_t },
    };
    Ok((state, cfg))
}
