//! `RVLCKPT1` checkpoints.
//!
//! Layout (little-endian): the 8-byte magic, a `u64`-length-prefixed UTF-8
//! config block, a `u64` record count, then per record a `u32`-length name,
//! `u32` rank, `u64` dims and `f64` values. Records hold every parameter,
//! `adam.m.<name>`, `adam.v.<name>` and `state.step`. Sampling state needs no
//! record: it is derived from the config seed and the step.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::config::Config;
use super::corpus::SyntheticCorpus;
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RVLCKPT1";
pub const STEP_RECORD: &str = "state.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut records: Vec<(String, Tensor)> = t.model.store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        for (i, (n, _)) in t.model.store.iter().enumerate() {
            records.push((format!("adam.m.{n}"), t.optim.m[i].clone()));
        }
        for (i, (n, _)) in t.model.store.iter().enumerate() {
            records.push((format!("adam.v.{n}"), t.optim.v[i].clone()));
        }
        records.push((STEP_RECORD.into(), Tensor::scalar(t.step as f64)));
        Self {
            config: t.model.config.clone(),
            records,
        }
    }

    pub fn step(&self) -> Result<u64> {
        let t = self.get(STEP_RECORD)?;
        Ok(t.item() as u64)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("checkpoint has no record {name}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err(0, "bad magic, expected RVLCKPT1"));
        }
        let len = r.u64()? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err(at, "config block is not UTF-8"))?;
        let config = Config::parse(text).map_err(|e| r.err(at, &e.to_string()))?;
        let count = r.u64()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let at = r.pos;
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| r.err(at, "record name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let size = size
                .filter(|s| s.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| r.err(at, &format!("record {name} has implausible shape {shape:?}")))?;
            let at = r.pos;
            let raw = r.take(size * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| r.err(at, &format!("record {name}: {e}")))?;
            records.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes"));
        }
        Ok(Self { config, records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?, &path.display().to_string())
    }

    /// Rebuilds a trainer whose next step continues exactly where this one
    /// stopped.
    pub fn restore(&self, corpus: &SyntheticCorpus) -> Result<Trainer> {
        let mut t = Trainer::new(&self.config, corpus)?;
        let by_name: HashMap<&str, &Tensor> = self.records.iter().map(|(n, v)| (n.as_str(), v)).collect();
        let names: Vec<String> = t.model.store.iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            for (prefix, slot) in [("", 0), ("adam.m.", 1), ("adam.v.", 2)] {
                let key = format!("{prefix}{n}");
                let src = by_name
                    .get(key.as_str())
                    .ok_or_else(|| Error::invalid(format!("checkpoint has no record {key}")))?;
                let dst = match slot {
                    0 => &mut t.model.store.tensors_mut()[i],
                    1 => &mut t.optim.m[i],
                    _ => &mut t.optim.v[i],
                };
                if src.shape() != dst.shape() {
                    return Err(Error::Shape {
                        op: "checkpoint restore",
                        lhs: dst.shape().to_vec(),
                        rhs: src.shape().to_vec(),
                    });
                }
                *dst = (*src).clone();
            }
        }
        t.step = self.step()?;
        t.optim.t = t.step;
        Ok(t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, msg: &str) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(e) => {
                let s = &self.bytes[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(self.err(self.pos, &format!("truncated: needed {n} more bytes"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
