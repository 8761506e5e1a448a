//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "GKD1"                          magic
//! u32   format version (1)
//! u32   config length, then that many bytes of JSON (DetectorConfig)
//! u64   training step
//! u8    flags, bit 0 = optimizer velocities present
//! tensor table: u32 count, then per tensor
//!       u32 name length + name bytes (UTF-8)
//!       u32 rank, rank * u32 dims
//!       numel * f64 values
//! [velocity table, same layout, when bit 0 is set]
//! ```
//!
//! Values are stored as raw f64 bits, so a save/load round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::detector::{build_detector, DetectorConfig, DetectorModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GKD1";
const VERSION: u32 = 1;

/// A parsed checkpoint. `params` and `velocities` are in the model's
/// canonical parameter order.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub velocities: Option<Vec<(String, Tensor)>>,
}

/// Serializes a model (and optionally its optimizer velocities, given in
/// parameter order with matching names) to `path`, atomically.
pub fn save_checkpoint(
    path: &Path,
    model: &DetectorModel,
    step: u64,
    velocities: Option<&[(String, Tensor)]>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config =
        serde_json::to_vec(&model.config).map_err(|e| Error::format(path, format!("config encode: {e}")))?;
    out.extend_from_slice(&u32::try_from(config.len()).expect("config fits u32").to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&step.to_le_bytes());
    out.push(u8::from(velocities.is_some()));

    let params = model.named_params();
    write_table(&mut out, &params.iter().map(|(n, t)| (n.as_str(), *t)).collect::<Vec<_>>());
    if let Some(vel) = velocities {
        if vel.len() != params.len() {
            return Err(Error::invalid(
                "checkpoint",
                format!("{} velocity tensors for {} parameters", vel.len(), params.len()),
            ));
        }
        for ((pn, pt), (vn, vt)) in params.iter().zip(vel) {
            if pn != vn || pt.shape() != vt.shape() {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("velocity {vn} {:?} does not match parameter {pn} {:?}", vt.shape(), pt.shape()),
                ));
            }
        }
        write_table(&mut out, &vel.iter().map(|(n, t)| (n.as_str(), t)).collect::<Vec<_>>());
    }
    super::write_atomic(path, &out)
}

fn write_table(out: &mut Vec<u8>, tensors: &[(&str, &Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { path, bytes: &bytes, at: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::format(path, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let config_len = r.u32()? as usize;
    let config_bytes = r.take(config_len)?;
    let config: DetectorConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::format(path, format!("config decode: {e}")))?;
    let step = r.u64()?;
    let flags = r.u8()?;
    let params = r.table()?;
    let velocities = if flags & 1 != 0 { Some(r.table()?) } else { None };
    if r.at != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint { config, step, params, velocities })
}

impl Checkpoint {
    /// Rebuilds the stored model. The stored config decides the
    /// architecture; every stored tensor must match the freshly built
    /// model's name and shape, and the first mismatch is reported by name.
    pub fn into_model(self) -> Result<DetectorModel> {
        let mut model = build_detector(&self.config, 0)?;
        let expected = model.named_params().len();
        if self.params.len() != expected {
            return Err(Error::invalid(
                "checkpoint",
                format!("{} stored tensors, model has {expected}", self.params.len()),
            ));
        }
        for ((name, slot), (stored_name, stored)) in
            model.named_params_mut().into_iter().zip(self.params)
        {
            if name != stored_name {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("stored tensor '{stored_name}' where model expects '{name}'"),
                ));
            }
            if slot.shape() != stored.shape() {
                return Err(Error::invalid(
                    "checkpoint",
                    format!("'{name}': stored shape {:?}, model has {:?}", stored.shape(), slot.shape()),
                ));
            }
            *slot = stored.requires_grad(true);
        }
        Ok(model)
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::format(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}, file is {} bytes", self.at, self.bytes.len()),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn table(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u32()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|e| Error::format(self.path, format!("tensor name: {e}")))?;
            let rank = self.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")));
            }
            let tensor = Tensor::new(&shape, values)
                .map_err(|e| Error::format(self.path, format!("tensor '{name}': {e}")))?;
            out.push((name, tensor));
        }
        Ok(out)
    }
}
