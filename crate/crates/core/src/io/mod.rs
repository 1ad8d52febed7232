//! On-disk formats: PFM float maps, binary PGM/PPM images, the dataset
//! layout with its manifest, and network checkpoints.
//!
//! Every writer goes through [`write_atomic`], so a reader never observes a
//! half-written file.

mod checkpoint;
mod dataset;
mod header;
mod pfm;
mod pnm;

use std::path::Path;

use crate::error::{Error, Result};

pub use checkpoint::{decode_tensors, encode_tensors, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use dataset::{
    ingest_external_disparity, read_sample, write_sample, Manifest, ManifestEntry, SampleRecord, BASELINE_FILE,
};
pub use pfm::{decode_pfm, encode_pfm, read_pfm, write_pfm};
pub use pnm::{decode_pnm, encode_pnm, quantize, read_mask, read_pnm, write_mask, write_pnm};

/// Write `bytes` to a sibling temporary file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidParameter(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(format!("writing {}", tmp.display()), e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}
