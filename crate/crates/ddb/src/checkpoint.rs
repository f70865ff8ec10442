//! Little-endian checkpoint container.
//!
//! Layout: magic `DDBCKPT\0`, u32 version, arch descriptor, RNG state
//! (u64 seed, u64 stream, u128 word position), u32 round, length-prefixed
//! stage tag, u32 record count, then per record a length-prefixed name,
//! u32 rank, u64 dims and the f64 payload.

use std::path::Path;

use ddb_core::model::{Arch, SegModel};
use ddb_core::{RngState, Tensor};

use crate::error::{format_err, PathContext, Result};

pub const MAGIC: [u8; 8] = *b"DDBCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub params: Vec<(String, Tensor)>,
    pub rng: RngState,
    pub round: u32,
    pub stage: String,
}

impl Checkpoint {
    pub fn from_model(model: &SegModel, rng: RngState, round: u32, stage: &str) -> Self {
        Self {
            arch: model.arch().clone(),
            params: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            rng,
            round,
            stage: stage.to_string(),
        }
    }

    pub fn model(&self) -> Result<SegModel> {
        Ok(SegModel::from_params(self.arch.clone(), self.params.clone())?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(&MAGIC);
        w.u32(VERSION);
        w.u32(self.arch.in_channels as u32);
        w.u32(self.arch.widths.len() as u32);
        for &c in &self.arch.widths {
            w.u32(c as u32);
        }
        w.u32(self.arch.kernel as u32);
        w.u32(self.arch.stride as u32);
        w.u32(self.arch.classes as u32);
        w.u64(self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u32(self.round);
        w.str(&self.stage);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            for &v in t.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.0
    }

    /// `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(format_err(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("unsupported checkpoint version {version}")));
        }
        let in_channels = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let widths = (0..depth).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let (kernel, stride, classes) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let arch = Arch { in_channels, widths, kernel, stride, classes };
        let seed = r.u64()?;
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let round = r.u32()?;
        let stage = r.str()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| format_err(path, "shape overflow"))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| format_err(path, "shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(&shape, data).map_err(|e| format_err(path, e.to_string()))?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(format_err(path, "trailing bytes after the last record"));
        }
        Ok(Self { arch, params, rng: RngState { seed, stream, word_pos }, round, stage })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).at(path)?, path)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.path, format!("truncated at byte {}", self.pos)))?;
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

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| format_err(self.path, "name is not UTF-8"))
    }
}
