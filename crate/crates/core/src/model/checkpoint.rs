//! `UNW1` parameter files.
//!
//! ```text
//! "UNW1" | u32 count | count x (u16 name_len, name, u8 ndim, u32 dims.., f32 payload)
//!        | u32 config_len | config (key=value lines)
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::unet::{ModelConfig, ModelParams, Param};
use super::ModelError;
use crate::rolls::InstrumentVocab;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"UNW1";
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a UNW1 checkpoint")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint predicts {ckpt} instruments ({ckpt_id}) but the vocabulary has {vocab} ({vocab_id})")]
    VocabMismatch { ckpt: usize, ckpt_id: String, vocab: usize, vocab_id: String },
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    }
}

/// Parameters plus the optimizer step they were saved at.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub step: u64,
}

impl<T: Scalar> Checkpoint<T> {
    /// Fails unless the output layer matches `vocab`.
    pub fn check_vocab(&self, vocab: &InstrumentVocab) -> Result<(), CheckpointError> {
        let cfg = self.params.config();
        if cfg.n_instruments != vocab.len() || cfg.vocab_id != vocab.id() {
            return Err(CheckpointError::VocabMismatch {
                ckpt: cfg.n_instruments,
                ckpt_id: cfg.vocab_id.clone(),
                vocab: vocab.len(),
                vocab_id: vocab.id().to_string(),
            });
        }
        Ok(())
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ModelParams<T>, step: u64, mut w: W) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.tensors().len() as u32).to_le_bytes())?;
    for (name, p) in params.tensors() {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[p.shape.len() as u8])?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(p.data.len() * 4);
        for v in &p.data {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    let config = format!("{}step={step}\n", params.config().to_text());
    w.write_all(&(config.len() as u32).to_le_bytes())?;
    w.write_all(config.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>, CheckpointError> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let mut b2 = [0; 2];
        r.read_exact(&mut b2)?;
        let mut name = vec![0; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        let mut nd = [0; 1];
        r.read_exact(&mut nd)?;
        let shape = (0..nd[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= MAX_ELEMENTS);
        let len = len.ok_or_else(|| CheckpointError::Format(format!("tensor {name} is too large")))?;
        let mut raw = vec![0; len * 4];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(4).map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
        if tensors.insert(name.clone(), Param { shape, data }).is_some() {
            return Err(CheckpointError::Format(format!("duplicate tensor {name}")));
        }
    }
    let mut text = vec![0; read_u32(&mut r)? as usize];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|_| CheckpointError::Format("config is not UTF-8".into()))?;
    if r.read(&mut [0; 1])? != 0 {
        return Err(CheckpointError::Format("trailing bytes after config".into()));
    }
    let config = ModelConfig::from_text(&text)?;
    let step = text
        .lines()
        .find_map(|l| l.strip_prefix("step="))
        .map(|s| s.trim().parse().map_err(|_| CheckpointError::Format("bad step".into())))
        .transpose()?
        .unwrap_or(0);
    Ok(Checkpoint { params: ModelParams::from_tensors(config, tensors)?, step })
}

pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, step: u64, path: &Path) -> Result<(), CheckpointError> {
    write_checkpoint(params, step, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path).map_err(CheckpointError::Io)?))
}
