//! Line-oriented JSON metrics log.
//!
//! One JSON object per line. The first record of a run echoes the full
//! configuration so a log is self-describing; subsequent records carry numbers.
//! Floats are written as `{:.16e}` (17 significant digits), which converts
//! back to the identical f64, and no record contains wall-clock time, so a
//! repeated run writes a byte-identical log.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Creates (or truncates) the log file.
    pub fn create(path: &Path) -> Result<MetricsLog> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    /// Writes `{"kind": kind, "config": <cfg as JSON>}`.
    pub fn echo_config<T: Serialize>(&mut self, kind: &str, cfg: &T) -> Result<()> {
        let body = serde_json::to_string(cfg)
            .map_err(|e| Error::format(&self.path, format!("config encode: {e}")))?;
        let line = format!("{{\"kind\":{},\"config\":{}}}\n", json_string(kind), body);
        self.out.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.flush()
    }

    /// Writes one record: `kind`, integer fields, then float fields in the
    /// given order.
    pub fn record(&mut self, kind: &str, ints: &[(&str, i64)], floats: &[(&str, f64)]) -> Result<()> {
        let mut line = format!("{{\"kind\":{}", json_string(kind));
        for (name, v) in ints {
            line.push_str(&format!(",{}:{v}", json_string(name)));
        }
        for (name, v) in floats {
            if !v.is_finite() {
                return Err(Error::invalid("metrics", format!("field {name} is not finite: {v}")));
            }
            line.push_str(&format!(",{}:{v:.16e}", json_string(name)));
        }
        line.push_str("}\n");
        self.out.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always encode")
}

/// Parses a metrics log back into JSON values, one per line.
pub fn read_metrics(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(path, format!("bad record: {e}"))))
        .collect()
}
