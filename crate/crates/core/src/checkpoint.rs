//! Versioned binary checkpoints.
//!
//! Layout (little-endian): magic `DLAB`, u32 format version, u64 header
//! length, the header as canonical JSON, then every tensor as raw f64 in
//! manifest order. Manifest offsets count bytes from the start of the data
//! section.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::optim::{OptimState, OptimizerKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DLAB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    config_hash: String,
    step: u64,
    /// Batches and masks are keyed by `(seed, step)`, so the step is the
    /// only generator cursor a resume needs.
    rng_next_step: u64,
    best_val_loss: Option<f64>,
    best_step: Option<u64>,
    optimizer: OptimizerKind,
    manifest: Vec<Entry>,
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ModelParams,
    pub optim: OptimState,
    pub best_val_loss: Option<f64>,
    pub best_step: Option<u64>,
}

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &[usize], &[f64])> {
        let mut out: Vec<(String, &[usize], &[f64])> = Vec::new();
        for (n, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.push((n.clone(), t.shape(), t.data()));
        }
        for (prefix, bufs) in [("opt.m.", &self.optim.m), ("opt.v.", &self.optim.v)] {
            for ((n, t), b) in self.params.names().iter().zip(self.params.tensors()).zip(bufs) {
                out.push((format!("{prefix}{n}"), t.shape(), b));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let mut offset = 0u64;
        let manifest = tensors
            .iter()
            .map(|(name, shape, data)| {
                let e = Entry {
                    name: name.clone(),
                    shape: shape.to_vec(),
                    offset,
                };
                offset += 8 * data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            step: self.step,
            rng_next_step: self.step + 1,
            best_val_loss: self.best_val_loss,
            best_step: self.best_step,
            optimizer: self.config.train.optimizer,
            manifest,
        };
        let json = serde_json::to_value(&header).expect("header serializes");
        let json = serde_json::to_string(&json).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        for (_, _, data) in &tensors {
            for x in data.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses and fully validates a checkpoint; nothing is returned unless
    /// every check passes.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |why: String| Error::Checkpoint(why);
        if bytes.len() < 16 {
            return Err(bad("file too short".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("stored config hash does not match stored config".into()));
        }
        let data = &bytes[16 + hlen..];

        let mut expected_offset = 0u64;
        let mut arrays = Vec::with_capacity(header.manifest.len());
        for e in &header.manifest {
            if e.offset != expected_offset {
                return Err(bad(format!("tensor {} at unexpected offset {}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = data
                .get(start..start + 8 * n)
                .ok_or_else(|| bad(format!("tensor {} truncated", e.name)))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_offset += 8 * n as u64;
            arrays.push((e.name.clone(), e.shape.clone(), values));
        }
        if expected_offset as usize != data.len() {
            return Err(bad(format!(
                "{} trailing bytes after tensor data",
                data.len() as i64 - expected_offset as i64
            )));
        }

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, shape, values) in arrays {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                m.push((rest.to_string(), values));
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                v.push((rest.to_string(), values));
            } else {
                params.push((name, Tensor::new(&shape, values)?));
            }
        }
        let params = ModelParams::from_named(&header.config.model, params)?;
        let check = |bufs: &[(String, Vec<f64>)], label: &str| -> Result<()> {
            if bufs.len() != params.len() {
                return Err(bad(format!("{} {label} buffers for {} parameters", bufs.len(), params.len())));
            }
            for ((n, b), (pn, t)) in bufs.iter().zip(params.names().iter().zip(params.tensors())) {
                if n != pn || b.len() != t.numel() {
                    return Err(bad(format!("{label} buffer {n} does not match parameter {pn}")));
                }
            }
            Ok(())
        };
        check(&m, "first-moment")?;
        match header.optimizer {
            OptimizerKind::Adamw => check(&v, "second-moment")?,
            OptimizerKind::SgdMomentum if !v.is_empty() => {
                return Err(bad("SGD checkpoint carries second moments".into()))
            }
            OptimizerKind::SgdMomentum => {}
        }
        Ok(Self {
            config: header.config,
            step: header.step,
            params,
            optim: OptimState {
                m: m.into_iter().map(|(_, b)| b).collect(),
                v: v.into_iter().map(|(_, b)| b).collect(),
            },
            best_val_loss: header.best_val_loss,
            best_step: header.best_step,
        })
    }

    /// Writes through a temporary file and renames, so a failed write never
    /// leaves a truncated checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("bin.tmp");
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.encode())?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// `ckpt/step-N.bin` files in `dir`, sorted by step.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-"))
            .and_then(|n| n.strip_suffix(".bin"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(step) = step {
            out.push((step, path));
        }
    }
    out.sort();
    Ok(out)
}

pub fn checkpoint_path(run_dir: &Path, step: u64) -> PathBuf {
    run_dir.join("ckpt").join(format!("step-{step}.bin"))
}
