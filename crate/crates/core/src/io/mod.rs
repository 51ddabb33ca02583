//! Reading and writing volumes: single-file NIfTI-1 (optionally gzipped) and
//! a raw little-endian block with a JSON sidecar.

mod nifti;
mod raw;

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{PayloadKind, Volume};

pub use nifti::{read_nifti, write_nifti, NiftiAffine};
pub use raw::{raw_paths, read_raw, write_raw, Sidecar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VolumeFormat {
    Nifti { gzip: bool },
    Raw,
}

impl VolumeFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Unsupported(format!("no file name in {}", path.display())))?
            .to_ascii_lowercase();
        if name.ends_with(".nii.gz") {
            Ok(VolumeFormat::Nifti { gzip: true })
        } else if name.ends_with(".nii") {
            Ok(VolumeFormat::Nifti { gzip: false })
        } else if name.ends_with(".json") || name.ends_with(".f32") || name.ends_with(".u16") {
            Ok(VolumeFormat::Raw)
        } else {
            Err(Error::Unsupported(format!(
                "cannot infer volume format of {} (expected .nii, .nii.gz, .json, .f32 or .u16)",
                path.display()
            )))
        }
    }
}

/// Reads a volume, reorients it to canonical RAS order and checks that the
/// stored payload can be represented as `expected`.
pub fn read_volume(path: impl AsRef<Path>, expected: PayloadKind) -> Result<Volume> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti { .. } => read_nifti(path, expected),
        VolumeFormat::Raw => read_raw(path, expected),
    }
}

/// Writes a volume in the format implied by the path extension.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match VolumeFormat::from_path(path)? {
        VolumeFormat::Nifti { gzip } => write_nifti(v, path, gzip),
        VolumeFormat::Raw => write_raw(v, path),
    }
}
