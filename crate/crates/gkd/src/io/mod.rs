//! On-disk formats: model checkpoints, portable gray/pixmap images,
//! heatmap exports, and the metrics log.
//!
//! Every writer goes through a temporary file in the target directory and a
//! final rename, so a crash never leaves a half-written artifact under the
//! real name. Nothing here records wall-clock time — reruns of the same
//! configuration produce byte-identical files.

mod checkpoint;
mod image;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use image::{export_heatmap, read_pgm, write_pgm, write_ppm, GrayImage};
pub use metrics::{read_metrics, MetricsLog};

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path` atomically (temp file + rename).
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
