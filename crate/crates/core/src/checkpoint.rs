//! Model checkpoints.
//!
//! Layout: magic `CFPCKPT1`, little-endian `u64` header length, JSON header,
//! then every parameter in name order as little-endian `f64`. The header
//! records a model kind tag, the hash of the configuration that produced
//! the model, the parameter fingerprint, tensor shapes and a free-form
//! model description used to rebuild the architecture.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sorted_vars, tensor_from_f64, to_f64_vec, Parameterized};

const MAGIC: &[u8; 8] = b"CFPCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config_hash: String,
    pub fingerprint: String,
    pub tensors: Vec<(String, Vec<usize>)>,
    pub model: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config_hash: &str,
    model_desc: serde_json::Value,
    model: &dyn Parameterized,
) -> Result<CheckpointHeader> {
    let vars = sorted_vars(model.varmap());
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config_hash: config_hash.to_string(),
        fingerprint: model.fingerprint()?,
        tensors: vars.iter().map(|(n, v)| (n.clone(), v.dims().to_vec())).collect(),
        model: model_desc,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Validation(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, v) in &vars {
        for x in to_f64_vec(v.as_tensor())? {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    Ok(header)
}

fn read(path: &Path) -> Result<(CheckpointHeader, Vec<u8>)> {
    let buf = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Dependency(format!("checkpoint {} not found", path.display())),
        _ => Error::io(path, e),
    })?;
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg,
    };
    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(bad("not a checkpoint".into()));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes")) as usize;
    let json = buf.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(json).map_err(|e| bad(e.to_string()))?;
    let payload = buf[16 + hlen..].to_vec();
    let expected: usize = header.tensors.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    if payload.len() != 8 * expected {
        return Err(bad(format!("payload has {} bytes, expected {}", payload.len(), 8 * expected)));
    }
    Ok((header, payload))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read(path)?.0)
}

/// Loads parameters into `model`. A kind mismatch is a dependency error; a
/// config hash mismatch is too unless `expected_hash` is `None`.
pub fn load_checkpoint(
    path: &Path,
    kind: &str,
    expected_hash: Option<&str>,
    model: &dyn Parameterized,
) -> Result<CheckpointHeader> {
    let (header, payload) = read(path)?;
    if header.kind != kind {
        return Err(Error::Dependency(format!(
            "{} holds a `{}` model, expected `{kind}`",
            path.display(),
            header.kind
        )));
    }
    if let Some(h) = expected_hash {
        if header.config_hash != h {
            return Err(Error::Dependency(format!(
                "{} was produced under config {}, current config is {h}",
                path.display(),
                header.config_hash
            )));
        }
    }
    let vars = sorted_vars(model.varmap());
    let layout: Vec<(String, Vec<usize>)> = vars.iter().map(|(n, v)| (n.clone(), v.dims().to_vec())).collect();
    if layout != header.tensors {
        return Err(Error::Dependency(format!(
            "{} parameter layout does not match the model architecture",
            path.display()
        )));
    }
    let mut at = 0;
    for (_, var) in &vars {
        let n = var.elem_count();
        let vals: Vec<f64> = payload[at..at + 8 * n]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        var.set(&tensor_from_f64(vals, var.dims(), var.dtype())?)?;
        at += 8 * n;
    }
    if model.fingerprint()? != header.fingerprint {
        return Err(Error::Contract(format!(
            "{} fingerprint does not survive loading at the model dtype",
            path.display()
        )));
    }
    Ok(header)
}
