//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! magic `DGQA`, u32 version, length-prefixed model-config JSON, u64 rng
//! seed, u128 rng word position, then length-prefixed entries of
//! `(key, kind, shape, f64 values)`, then an optional optimizer section.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{DgiqaModel, ModelConfig};
use crate::nn::ParamKind;
use crate::scalar::Scalar;
use crate::training::AdamW;

const MAGIC: &[u8; 4] = b"DGQA";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub key: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    /// `(key, m, v)` per learnable tensor.
    pub moments: Vec<(String, Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub entries: Vec<CheckpointEntry>,
    pub optimizer: Option<OptimizerState>,
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.out.write_all(&[v])?)
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }
    fn u128(&mut self, v: u128) -> Result<()> {
        Ok(self.out.write_all(&v.to_le_bytes())?)
    }
    fn bytes(&mut self, v: &[u8]) -> Result<()> {
        self.u32(v.len() as u32)?;
        Ok(self.out.write_all(v)?)
    }
    fn values(&mut self, v: &[f64]) -> Result<()> {
        for x in v {
            self.out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
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
    fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn values(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Serializes the model (and optionally optimizer state) to `path`.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &DgiqaModel<S>,
    rng_seed: u64,
    rng_word_pos: u128,
    optimizer: Option<&AdamW<S>>,
) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = Writer {
        out: std::io::BufWriter::new(file),
    };
    w.out.write_all(MAGIC)?;
    w.u32(VERSION)?;
    let config = serde_json::to_vec(&model.config).expect("config serializes");
    w.bytes(&config)?;
    w.u64(rng_seed)?;
    w.u128(rng_word_pos)?;

    let mut entries: Vec<(String, ParamKind, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit(&mut |name, kind, t| {
        let values = t.values().iter().map(|v| v.as_f64()).collect();
        entries.push((name.to_string(), kind, t.shape().to_vec(), values));
    });
    w.u32(entries.len() as u32)?;
    for (key, kind, shape, values) in &entries {
        w.bytes(key.as_bytes())?;
        w.u8(match kind {
            ParamKind::Learnable => 0,
            ParamKind::Buffer => 1,
        })?;
        w.u32(shape.len() as u32)?;
        for &d in shape {
            w.u64(d as u64)?;
        }
        w.values(values)?;
    }

    match optimizer {
        None => w.u8(0)?,
        Some(opt) => {
            w.u8(1)?;
            let (step, moments) = opt.state();
            w.u64(step)?;
            w.u32(moments.len() as u32)?;
            for (key, m, v) in &moments {
                w.bytes(key.as_bytes())?;
                w.u64(m.len() as u64)?;
                let m64: Vec<f64> = m.iter().map(|x| x.as_f64()).collect();
                let v64: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
                w.values(&m64)?;
                w.values(&v64)?;
            }
        }
    }
    w.out.flush()?;
    Ok(())
}

/// Parses a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let config: ModelConfig = serde_json::from_slice(r.blob()?)
        .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;
    let rng_seed = r.u64()?;
    let rng_word_pos = r.u128()?;
    let n_entries = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let key = String::from_utf8(r.blob()?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 key".into()))?;
        let kind = match r.u8()? {
            0 => ParamKind::Learnable,
            1 => ParamKind::Buffer,
            k => return Err(Error::Checkpoint(format!("unknown entry kind {k}"))),
        };
        let ndims = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.values(numel)?;
        entries.push(CheckpointEntry {
            key,
            kind,
            shape,
            values,
        });
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let n = r.u32()? as usize;
            let mut moments = Vec::with_capacity(n);
            for _ in 0..n {
                let key = String::from_utf8(r.blob()?.to_vec())
                    .map_err(|_| Error::Checkpoint("non-utf8 key".into()))?;
                let numel = r.u64()? as usize;
                let m = r.values(numel)?;
                let v = r.values(numel)?;
                moments.push((key, m, v));
            }
            Some(OptimizerState { step, moments })
        }
        k => return Err(Error::Checkpoint(format!("unknown optimizer flag {k}"))),
    };
    Ok(Checkpoint {
        version,
        config,
        rng_seed,
        rng_word_pos,
        entries,
        optimizer,
    })
}

/// Rebuilds a model from a checkpoint: init from the embedded config, then
/// overwrite every tensor. Keys must match the model exactly, both ways.
pub fn restore_model<S: Scalar>(ckpt: &Checkpoint) -> Result<DgiqaModel<S>> {
    let model = DgiqaModel::init(ckpt.config.clone(), 0)?;
    let mut by_key: std::collections::HashMap<&str, &CheckpointEntry> =
        ckpt.entries.iter().map(|e| (e.key.as_str(), e)).collect();
    let mut missing = Vec::new();
    model.visit(&mut |name, _, t| match by_key.remove(name) {
        Some(entry) => {
            if entry.shape != t.shape() {
                missing.push(format!(
                    "{name}: shape {:?} in file vs {:?} in model",
                    entry.shape,
                    t.shape()
                ));
                return;
            }
            t.set_values(entry.values.iter().map(|&v| S::of_f64(v)).collect());
        }
        None => missing.push(format!("{name}: absent from file")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "incompatible checkpoint: {}",
            missing.join("; ")
        )));
    }
    if !by_key.is_empty() {
        let extra: Vec<&str> = by_key.keys().copied().collect();
        return Err(Error::Checkpoint(format!(
            "unconsumed checkpoint keys: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}
