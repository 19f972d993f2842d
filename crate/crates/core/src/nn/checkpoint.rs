//! Binary parameter checkpoints.
//!
//! Layout: 4 magic bytes, `u32` version, `u32`-length-prefixed JSON config,
//! `u32` parameter count, then per parameter a length-prefixed UTF-8 name,
//! `u32` rows, `u32` cols and `rows * cols` little-endian `f64` values in
//! column-major order.

use std::io::{Read, Write};

use serde_json::Value;

use super::tape::{Mat, ParamSet};
use crate::error::{Error, Result};

pub const BELIEF_MAGIC: [u8; 4] = *b"DTCB";
pub const POLICY_MAGIC: [u8; 4] = *b"DTCP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Several named parameter groups under one config block.
pub fn write_checkpoint<W: Write>(mut w: W, magic: [u8; 4], config: &Value, groups: &[(&str, &ParamSet)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let cfg = serde_json::to_vec(config)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    let total: usize = groups.iter().map(|(_, ps)| ps.len()).sum();
    put_u32(&mut out, total as u32);
    for (prefix, ps) in groups {
        for (name, value) in ps.names().iter().zip(ps.values()) {
            let full = format!("{prefix}/{name}");
            put_u32(&mut out, full.len() as u32);
            out.extend_from_slice(full.as_bytes());
            put_u32(&mut out, value.nrows() as u32);
            put_u32(&mut out, value.ncols() as u32);
            for x in value.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

/// Parsed checkpoint contents.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: Value,
    pub params: Vec<(String, Mat)>,
}

pub fn read_checkpoint<R: Read>(mut r: R, magic: [u8; 4]) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(&magic)
        )));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = u32_at(take(4)?) as usize;
    let config: Value = serde_json::from_slice(take(cfg_len)?)?;
    let n = u32_at(take(4)?) as usize;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u32_at(take(4)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rows = u32_at(take(4)?) as usize;
        let cols = u32_at(take(4)?) as usize;
        let raw = take(rows * cols * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push((name, Mat::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint { config, params })
}

impl Checkpoint {
    pub fn check_config(&self, expected: &Value) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint has {}, expected {}",
                self.config, expected
            )));
        }
        Ok(())
    }

    /// Copies the group `prefix` into `target`, checking names and shapes.
    pub fn restore(&self, prefix: &str, target: &mut ParamSet) -> Result<()> {
        let prefixed = format!("{prefix}/");
        let group: Vec<&(String, Mat)> = self
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(&prefixed))
            .collect();
        if group.len() != target.len() {
            return Err(Error::Checkpoint(format!(
                "group {prefix} has {} parameters, model expects {}",
                group.len(),
                target.len()
            )));
        }
        for (i, (name, value)) in group.into_iter().enumerate() {
            let expected = format!("{prefixed}{}", target.names()[i]);
            if name != &expected {
                return Err(Error::Checkpoint(format!("expected {expected}, found {name}")));
            }
            let slot = &mut target.values_mut()[i];
            if slot.shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, model expects {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            slot.copy_from(value);
        }
        Ok(())
    }
}
