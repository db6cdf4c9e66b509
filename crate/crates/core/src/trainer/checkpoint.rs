//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "MEMUCKPT"
//! version    u32
//! epoch      u64      epochs completed
//! step       u64      optimizer steps taken
//! best_val   f64      best validation GAME(0) so far, NaN if none
//! config     u32 length + UTF-8 JSON
//! config_sha 32 bytes SHA-256 of the JSON
//! tensors    u32 count, then per tensor:
//!            u32 name length + UTF-8 name, u32 rank, rank × u64 dims, f64 data
//! ```
//!
//! Optimizer moments are stored as ordinary tensors named `adam.m.<param>` and
//! `adam.v.<param>`, with the step count in the one-element `adam.t`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

use super::adam::Adam;
use super::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MEMUCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub step: u64,
    pub best_val: Option<f64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        epoch: u64,
        step: u64,
        best_val: Option<f64>,
        params: &ParamStore,
        adam: Option<&Adam>,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(a) = adam {
            tensors.push(("adam.t".into(), Tensor::scalar(a.t as f64)));
            for (kind, moments) in [("m", &a.m), ("v", &a.v)] {
                for ((_, n, _), t) in params.iter().zip(moments) {
                    tensors.push((format!("adam.{kind}.{n}"), t.clone()));
                }
            }
        }
        Checkpoint {
            config: config.clone(),
            epoch,
            step,
            best_val,
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Parameter tensors only (optimizer state stripped).
    pub fn params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (n, t) in &self.tensors {
            if !n.starts_with("adam.") {
                store.add(n.clone(), t.clone())?;
            }
        }
        Ok(store)
    }

    /// Restores optimizer moments for `params`, if the checkpoint carries them.
    pub fn adam(&self, params: &ParamStore) -> Result<Option<Adam>> {
        let Some(t) = self.tensor("adam.t") else { return Ok(None) };
        let c = &self.config;
        let mut adam = Adam::new(params, c.lr, c.beta1, c.beta2, c.eps);
        adam.t = t.item() as u64;
        for (kind, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            for ((_, n, p), slot) in params.iter().zip(moments.iter_mut()) {
                let name = format!("adam.{kind}.{n}");
                let src = self
                    .tensor(&name)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
                if src.shape() != p.shape() {
                    return Err(Error::dim(format!("{name}: shape {:?} vs {:?}", src.shape(), p.shape())));
                }
                *slot = src.clone();
            }
        }
        Ok(Some(adam))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.best_val.unwrap_or(f64::NAN).to_le_bytes());
        let json = serde_json::to_string(&self.config).expect("config serialises");
        write_str(&mut out, &json);
        out.extend_from_slice(&Sha256::digest(json.as_bytes()));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            write_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err(0, "not a checkpoint (bad magic)"));
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(r.err(at, &format!("unsupported format version {version}")));
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let best = r.f64()?;
        let at = r.pos;
        let json = r.string()?;
        let digest = r.take(32)?;
        if digest != Sha256::digest(json.as_bytes()).as_slice() {
            return Err(r.err(at, "config hash mismatch"));
        }
        let config: TrainConfig =
            serde_json::from_str(&json).map_err(|e| r.err(at, &format!("config: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.err(r.pos, "tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint {
            config,
            epoch,
            step,
            best_val: if best.is_nan() { None } else { Some(best) },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, message: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, &format!("unexpected end of file reading {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(at, "invalid UTF-8"))
    }
}
