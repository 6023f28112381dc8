//! Flat binary checkpoint format with a JSON sidecar manifest.
//!
//! Record layout, repeated per tensor in parameter order:
//!   u32 name length | UTF-8 name | u32 rank | u32 dims... | raw LE floats
//! Floats are f64 or f32 per the writer's [`CheckpointDtype`]; the manifest
//! (`<path>.manifest.json`) lists names, shapes, and the dtype so readers
//! never guess. Round-trip at f64 is bitwise exact.

use super::params::ParamSet;
use super::{Result, TensorError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointDtype {
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "f32")]
    F32,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: CheckpointDtype,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

fn io_err(context: &str, e: std::io::Error) -> TensorError {
    TensorError::Invalid { op: "checkpoint", msg: format!("{context}: {e}") }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest.json");
    std::path::PathBuf::from(os)
}

pub fn save_params(path: &Path, params: &ParamSet, dtype: CheckpointDtype) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    for (name, shape, values) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            CheckpointDtype::F64 => {
                for &v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            CheckpointDtype::F32 => {
                for &v in values {
                    buf.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| io_err("create", e))?;
    f.write_all(&buf).map_err(|e| io_err("write", e))?;

    let manifest = Manifest {
        dtype,
        tensors: params
            .iter()
            .map(|(name, shape, _)| ManifestEntry { name: name.to_string(), shape: shape.to_vec() })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::Invalid { op: "checkpoint", msg: e.to_string() })?;
    fs::write(manifest_path(path), json).map_err(|e| io_err("write manifest", e))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet> {
    let manifest: Manifest = {
        let text = fs::read_to_string(manifest_path(path)).map_err(|e| io_err("read manifest", e))?;
        serde_json::from_str(&text)
            .map_err(|e| TensorError::Invalid { op: "checkpoint", msg: format!("manifest: {e}") })?
    };

    let mut f = fs::File::open(path).map_err(|e| io_err("open", e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| io_err("read", e))?;

    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > buf.len() {
            return Err(TensorError::Invalid {
                op: "checkpoint",
                msg: format!("truncated file at byte {off}"),
            });
        }
        let s = &buf[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let take_u32 = |off: &mut usize| -> Result<u32> {
        let b = take(off, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    let mut out = ParamSet::new();
    for expect in &manifest.tensors {
        let name_len = take_u32(&mut off)? as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|e| TensorError::Invalid { op: "checkpoint", msg: format!("name: {e}") })?;
        let rank = take_u32(&mut off)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut off)? as usize);
        }
        if name != expect.name || shape != expect.shape {
            return Err(TensorError::Invalid {
                op: "checkpoint",
                msg: format!(
                    "manifest mismatch: file has {name} {shape:?}, manifest says {} {:?}",
                    expect.name, expect.shape
                ),
            });
        }
        let count: usize = shape.iter().product();
        let values = match manifest.dtype {
            CheckpointDtype::F64 => {
                let raw = take(&mut off, count * 8)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                    .collect()
            }
            CheckpointDtype::F32 => {
                let raw = take(&mut off, count * 4)?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect()
            }
        };
        out.insert(&name, &shape, values);
    }
    if off != buf.len() {
        return Err(TensorError::Invalid {
            op: "checkpoint",
            msg: format!("{} trailing bytes after last manifest tensor", buf.len() - off),
        });
    }
    Ok(out)
}
