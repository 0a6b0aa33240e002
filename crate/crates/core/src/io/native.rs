//! Native format: a raw little-endian `float32` payload plus a JSON sidecar.
//!
//! Scalars store one value per voxel; fields store three interleaved
//! components per voxel. Both are x-fastest. The sidecar lives next to the
//! payload with `.json` appended (`brain.raw` → `brain.raw.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarKind, ScalarVolume, VectorField};

use super::{Volume, VolumeKind};

pub const FORMAT_NAME: &str = "brainage-raw";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub format: String,
    pub version: u32,
    pub kind: VolumeKind,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
    pub dtype: String,
    pub byte_order: String,
}

/// `(payload, sidecar)` paths for either of the two file names.
pub fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let text = path.to_string_lossy();
    match text.strip_suffix(".json") {
        Some(stem) => (PathBuf::from(stem), path.to_path_buf()),
        None => (path.to_path_buf(), PathBuf::from(format!("{text}.json"))),
    }
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Malformed(format!("native: {}", msg.into()))
}

pub fn decode(sidecar: &[u8], payload: &[u8]) -> Result<Volume> {
    let meta: Sidecar = serde_json::from_slice(sidecar)?;
    if meta.format != FORMAT_NAME {
        return Err(Error::UnsupportedFormat(format!("native: format {:?} (expected {FORMAT_NAME:?})", meta.format)));
    }
    if meta.version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!("native: version {} (expected {FORMAT_VERSION})", meta.version)));
    }
    if meta.dtype != "float32" {
        return Err(Error::UnsupportedFormat(format!("native: dtype {:?} (only float32)", meta.dtype)));
    }
    if meta.byte_order != "little" {
        return Err(Error::UnsupportedFormat(format!("native: byte_order {:?} (only little)", meta.byte_order)));
    }
    let geometry = GridGeometry::new(meta.dims, meta.spacing, meta.origin)?;
    let components = if meta.kind.is_field() { 3 } else { 1 };
    let expected = geometry.len().checked_mul(4 * components).ok_or_else(|| malformed("payload size overflows"))?;
    if payload.len() != expected {
        return Err(malformed(format!("payload has {} bytes, sidecar implies {expected}", payload.len())));
    }
    let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let volume = match meta.kind {
        VolumeKind::Intensity => Volume::Scalar(ScalarVolume::new(geometry, values, ScalarKind::Intensity)?),
        VolumeKind::Labels => {
            Volume::Scalar(ScalarVolume::new(geometry, values, ScalarKind::Labels).map_err(|e| match e {
                Error::InvalidArgument(m) => malformed(m),
                other => other,
            })?)
        }
        kind => {
            let vectors = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            Volume::Field(VectorField::new(geometry, vectors)?, kind)
        }
    };
    Ok(volume)
}

/// Pretty-printed sidecar JSON and payload bytes.
pub fn encode(volume: &Volume) -> Result<(String, Vec<u8>)> {
    let geometry = *volume.geometry();
    let meta = Sidecar {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        kind: volume.kind(),
        dims: geometry.dims,
        spacing: geometry.spacing,
        origin: geometry.origin,
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let payload: Vec<u8> = match volume {
        Volume::Scalar(s) => s.values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        Volume::Field(f, _) => f.vectors.iter().flatten().flat_map(|v| v.to_le_bytes()).collect(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    Ok((json, payload))
}
