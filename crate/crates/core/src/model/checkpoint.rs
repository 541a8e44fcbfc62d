//! Binary checkpoint files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "HSEGCKPT"                      8 bytes
//! version                         u16
//! in_channels, num_classes        u16, u16
//! depth                           u8
//! base_channels                   u16
//! skip                            u8 (0|1)
//! parameter count n               u64
//! parameters                      n × f32
//! adam t                          u64
//! adam lr, beta1, beta2, eps      4 × f64
//! adam first moments              n × f32
//! adam second moments             n × f32
//! epoch                           u32
//! validation loss                 f64
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{AdamState, Architecture, SegModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSEGCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error("checkpoint architecture is inconsistent: {0}")]
    Architecture(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything needed to resume or evaluate a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub adam: AdamState,
    pub epoch: u32,
    pub val_loss: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let arch = self.model.architecture();
        let n = self.model.num_params();
        let mut out = Vec::with_capacity(64 + 12 * n);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(arch.in_channels as u16).to_le_bytes());
        out.extend_from_slice(&(arch.num_classes as u16).to_le_bytes());
        out.push(arch.depth as u8);
        out.extend_from_slice(&(arch.base_channels as u16).to_le_bytes());
        out.push(u8::from(arch.skip));
        out.extend_from_slice(&(n as u64).to_le_bytes());
        put_f32s(&mut out, self.model.params());
        out.extend_from_slice(&self.adam.t.to_le_bytes());
        for v in [self.adam.lr, self.adam.beta1, self.adam.beta2, self.adam.eps] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_f32s(&mut out, &self.adam.m);
        put_f32s(&mut out, &self.adam.v);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.val_loss.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let arch = Architecture {
            in_channels: r.u16()?.into(),
            num_classes: r.u16()?.into(),
            depth: r.u8()?.into(),
            base_channels: r.u16()?.into(),
            skip: match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(CheckpointError::Architecture(format!("skip flag {other}"))),
            },
        };
        let n = r.u64()? as usize;
        let expected = SegModel::zeroed(arch).map_err(|e| CheckpointError::Architecture(e.to_string()))?.num_params();
        if n != expected {
            return Err(CheckpointError::Architecture(format!("{n} parameters stored, architecture needs {expected}")));
        }
        let params = r.f32s(n)?;
        let t = r.u64()?;
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let m = r.f32s(n)?;
        let v = r.f32s(n)?;
        let epoch = r.u32()?;
        let val_loss = r.f64()?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let model = SegModel::from_params(arch, params).map_err(|e| CheckpointError::Architecture(e.to_string()))?;
        Ok(Self { model, adam: AdamState { m, v, t, lr, beta1, beta2, eps }, epoch, val_loss })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(self.bytes.len()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
