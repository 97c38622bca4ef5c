//! Binary checkpoints.
//!
//! Layout (all integers little-endian, all floats f64 bit patterns, so a
//! save/load cycle is bit-exact and resumed runs continue identically):
//!
//! ```text
//! "FQFC"  magic
//! u32     format version (1)
//! u64     config length, then that many bytes of run-config TOML
//! u64     training step
//! u128    training RNG word position
//! u8      auxiliary-encoder frozen flag
//! u64     optimizer step count
//! u64     parameter count, then per parameter:
//!         u64 name length, name bytes, u8 frozen, u64 rank, u64×rank dims,
//!         f64×numel values
//! u64     optimizer entry count, then per entry:
//!         u64 name length, name bytes, u64 buffer count,
//!         per buffer: u64 length, f64×length values
//! ```

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FQFC";
const VERSION: u32 = 1;

/// One saved parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Everything needed to reconstruct a training run mid-flight.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub step: u64,
    pub rng_word_pos: u128,
    pub aux_frozen: bool,
    pub opt_step: u64,
    pub params: Vec<SavedParam>,
    pub opt_state: Vec<(String, Vec<Vec<f64>>)>,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
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

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} overflows")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.usize()?;
        if n > 1 << 20 {
            return Err(Error::Checkpoint(format!("implausible string length {n}")));
        }
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF8 string".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &ckpt.config_text);
    put_u64(&mut out, ckpt.step);
    out.extend_from_slice(&ckpt.rng_word_pos.to_le_bytes());
    out.push(ckpt.aux_frozen as u8);
    put_u64(&mut out, ckpt.opt_step);
    put_u64(&mut out, ckpt.params.len() as u64);
    for p in &ckpt.params {
        put_str(&mut out, &p.name);
        out.push(p.frozen as u8);
        put_u64(&mut out, p.shape.len() as u64);
        for &d in &p.shape {
            put_u64(&mut out, d as u64);
        }
        let numel: usize = p.shape.iter().product();
        if numel != p.values.len() {
            return Err(Error::Checkpoint(format!(
                "param {} has {} values for shape {:?}",
                p.name,
                p.values.len(),
                p.shape
            )));
        }
        put_f64s(&mut out, &p.values);
    }
    put_u64(&mut out, ckpt.opt_state.len() as u64);
    for (name, buffers) in &ckpt.opt_state {
        put_str(&mut out, name);
        put_u64(&mut out, buffers.len() as u64);
        for b in buffers {
            put_u64(&mut out, b.len() as u64);
            put_f64s(&mut out, b);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut r = Reader { buf: &raw, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let config_len = r.usize()?;
    let config_text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Checkpoint("non-UTF8 config".into()))?;
    let step = r.u64()?;
    let rng_word_pos = r.u128()?;
    let aux_frozen = r.u8()? != 0;
    let opt_step = r.u64()?;
    let n_params = r.usize()?;
    let mut params = Vec::with_capacity(n_params.min(1 << 16));
    for _ in 0..n_params {
        let name = r.string()?;
        let frozen = r.u8()? != 0;
        let rank = r.usize()?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("param {name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let numel: usize = shape.iter().product();
        let values = r.f64s(numel)?;
        params.push(SavedParam {
            name,
            frozen,
            shape,
            values,
        });
    }
    let n_opt = r.usize()?;
    let mut opt_state = Vec::with_capacity(n_opt.min(1 << 16));
    for _ in 0..n_opt {
        let name = r.string()?;
        let n_buffers = r.usize()?;
        if n_buffers > 4 {
            return Err(Error::Checkpoint(format!(
                "optimizer entry {name}: {n_buffers} buffers"
            )));
        }
        let mut buffers = Vec::with_capacity(n_buffers);
        for _ in 0..n_buffers {
            let len = r.usize()?;
            buffers.push(r.f64s(len)?);
        }
        opt_state.push((name, buffers));
    }
    if r.pos != raw.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after checkpoint payload",
            raw.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_text,
        step,
        rng_word_pos,
        aux_frozen,
        opt_step,
        params,
        opt_state,
    })
}
