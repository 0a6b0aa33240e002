//! Reading and writing volumes and vector fields.
//!
//! Two formats are supported: single-file NIfTI-1 (`.nii`) and a native
//! layout of a raw little-endian `float32` payload (`.raw`) next to a JSON
//! sidecar (`.raw.json`). Decoders work on byte slices and never panic on
//! malformed input.

pub mod native;
pub mod nifti;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, ScalarKind, ScalarVolume, VectorField};

/// What a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Labels,
    Svf,
    Displacement,
}

impl VolumeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VolumeKind::Intensity => "intensity",
            VolumeKind::Labels => "labels",
            VolumeKind::Svf => "svf",
            VolumeKind::Displacement => "displacement",
        }
    }

    pub fn is_field(self) -> bool {
        matches!(self, VolumeKind::Svf | VolumeKind::Displacement)
    }
}

/// A decoded file: a scalar volume or a tagged vector field.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Field(VectorField, VolumeKind),
}

impl Volume {
    pub fn kind(&self) -> VolumeKind {
        match self {
            Volume::Scalar(s) => match s.kind {
                ScalarKind::Intensity => VolumeKind::Intensity,
                ScalarKind::Labels => VolumeKind::Labels,
            },
            Volume::Field(_, kind) => *kind,
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        match self {
            Volume::Scalar(s) => &s.geometry,
            Volume::Field(f, _) => &f.geometry,
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(s) => Ok(s),
            Volume::Field(_, kind) => {
                Err(Error::InvalidArgument(format!("expected a scalar volume, found a {} field", kind.as_str())))
            }
        }
    }

    pub fn into_field(self) -> Result<VectorField> {
        match self {
            Volume::Field(f, _) => Ok(f),
            Volume::Scalar(s) => Err(Error::InvalidArgument(format!(
                "expected a vector field, found a {} volume",
                Volume::Scalar(s).kind().as_str()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Nifti,
    Native,
}

impl Format {
    /// `.nii` is NIfTI; `.raw` and `.raw.json` are native.
    pub fn from_path(path: &Path) -> Result<Format> {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".nii") {
            Ok(Format::Nifti)
        } else if name.ends_with(".raw") || name.ends_with(".raw.json") {
            Ok(Format::Native)
        } else if name.ends_with(".nii.gz") {
            Err(Error::UnsupportedFormat(format!("{}: compressed NIfTI is not supported", path.display())))
        } else {
            Err(Error::UnsupportedFormat(format!("{}: unknown extension (expected .nii or .raw)", path.display())))
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::Nifti => "nii",
            Format::Native => "raw",
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nifti" | "nii" => Ok(Format::Nifti),
            "native" | "raw" => Ok(Format::Native),
            other => Err(Error::InvalidArgument(format!("unknown format {other:?} (expected nifti or native)"))),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a volume, choosing the format from the extension.
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    match Format::from_path(path)? {
        Format::Nifti => nifti::decode(&read_bytes(path)?),
        Format::Native => {
            let (payload, sidecar) = native::paths(path);
            if !sidecar.exists() {
                return Err(Error::MissingSidecar(sidecar));
            }
            native::decode(&read_bytes(&sidecar)?, &read_bytes(&payload)?)
        }
    }
}

/// Writes a volume in `format`. The path's extension is used as given; for
/// the native format the sidecar goes next to it with `.json` appended.
pub fn write_volume(volume: &Volume, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    match format {
        Format::Nifti => write_bytes(path, &nifti::encode(volume)?),
        Format::Native => {
            let (payload_path, sidecar_path) = native::paths(path);
            let (sidecar, payload) = native::encode(volume)?;
            write_bytes(&payload_path, &payload)?;
            write_bytes(&sidecar_path, sidecar.as_bytes())
        }
    }
}

/// [`write_volume`] with the format taken from the extension.
pub fn write_volume_auto(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let format = Format::from_path(path.as_ref())?;
    write_volume(volume, path, format)
}

pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    read_volume(path)?.into_scalar()
}

pub fn read_field(path: impl AsRef<Path>) -> Result<VectorField> {
    read_volume(path)?.into_field()
}

/// `dir/stem.<ext>` for a format.
pub fn output_path(dir: &Path, stem: &str, format: Format) -> PathBuf {
    dir.join(format!("{stem}.{}", format.extension()))
}
