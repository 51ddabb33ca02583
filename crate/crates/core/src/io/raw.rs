//! Raw voxel block + JSON sidecar.
//!
//! `<name>.f32` or `<name>.u16` holds little-endian values with x fastest,
//! then y, then z, then channel. `<name>.json` carries the geometry.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Payload, PayloadKind, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub payload: String,
    pub channels: usize,
    #[serde(default)]
    pub normalized: bool,
}

/// `(sidecar, data block)` paths for any of `<name>.json`, `<name>.f32`, `<name>.u16`.
pub fn raw_paths(path: &Path, kind: PayloadKind) -> (PathBuf, PathBuf) {
    let base = path.with_extension("");
    let data_ext = if kind == PayloadKind::Labels { "u16" } else { "f32" };
    (base.with_extension("json"), base.with_extension(data_ext))
}

pub fn write_raw(v: &Volume, path: &Path) -> Result<()> {
    let (json_path, data_path) = raw_paths(path, v.kind());
    let sidecar = Sidecar {
        dims: v.dims(),
        spacing_mm: v.spacing(),
        origin_mm: v.origin(),
        payload: v.kind().tag().to_string(),
        channels: v.channels(),
        normalized: v.is_normalized(),
    };
    let n = v.len();
    let bytes: Vec<u8> = match v.payload() {
        Payload::Scalar(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Payload::Labels(d) => d.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Payload::ProbStack { data, .. } => data.iter().flat_map(|x| x.to_le_bytes()).collect(),
        Payload::Vector3(d) => {
            let mut out = Vec::with_capacity(12 * n);
            for c in 0..3 {
                for vec in d {
                    out.extend_from_slice(&vec[c].to_le_bytes());
                }
            }
            out
        }
    };
    fs::write(&data_path, bytes).map_err(|e| Error::io(&data_path, e))?;
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn read_raw(path: &Path, expected: PayloadKind) -> Result<Volume> {
    let json_path = path.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sc: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Header { path: json_path.clone(), reason: e.to_string() })?;
    let kind = PayloadKind::from_tag(&sc.payload).ok_or_else(|| Error::Header {
        path: json_path.clone(),
        reason: format!("unknown payload tag {:?}", sc.payload),
    })?;
    if kind != expected {
        return Err(Error::PayloadMismatch { expected: expected.to_string(), found: kind.to_string() });
    }
    let (_, data_path) = raw_paths(path, kind);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let n = sc.dims.iter().product::<usize>();
    let channels = match kind {
        PayloadKind::Scalar | PayloadKind::Labels => 1,
        PayloadKind::Vector3 => 3,
        PayloadKind::ProbStack => sc.channels,
    };
    if sc.channels != channels {
        return Err(Error::Header {
            path: json_path,
            reason: format!("{kind} cannot have {} channels", sc.channels),
        });
    }
    let width = if kind == PayloadKind::Labels { 2 } else { 4 };
    if bytes.len() != n * channels * width {
        return Err(Error::Header {
            path: data_path,
            reason: format!("expected {} bytes, found {}", n * channels * width, bytes.len()),
        });
    }
    let floats = || -> Vec<f32> {
        bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect()
    };
    let payload = match kind {
        PayloadKind::Scalar => Payload::Scalar(floats()),
        PayloadKind::Labels => {
            Payload::Labels(bytes.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect())
        }
        PayloadKind::ProbStack => Payload::ProbStack { channels, data: floats() },
        PayloadKind::Vector3 => {
            let f = floats();
            Payload::Vector3((0..n).map(|i| [f[i], f[n + i], f[2 * n + i]]).collect())
        }
    };
    Ok(Volume::new(sc.dims, sc.spacing_mm, sc.origin_mm, payload)?.with_normalized(sc.normalized))
}
