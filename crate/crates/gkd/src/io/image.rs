//! Binary portable graymap / pixmap writers and a graymap reader.
//!
//! Gray values in [0, 1] quantize to a byte by round-half-up:
//! `floor(v * 255 + 0.5)`, so 0.5 lands on 128. Heatmaps can also go out as
//! color pixmaps on a blue-to-red ramp (`r = 255 v`, `g = 0`,
//! `b = 255 (1 - v)`).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A grayscale image with values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

fn check_unit_range(what: &'static str, values: &[f64]) -> Result<()> {
    for &v in values {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(what, format!("value {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Writes a binary graymap (P5, maxval 255), atomically.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    if image.pixels.len() != image.width * image.height {
        return Err(Error::invalid(
            "pgm",
            format!("{} pixels for {}x{}", image.pixels.len(), image.width, image.height),
        ));
    }
    check_unit_range("pgm", &image.pixels)?;
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    super::write_atomic(path, &out)
}

/// Reads a binary graymap back to [0, 1] values (byte / 255).
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut at = 0usize;

    // Header tokens are separated by whitespace; '#' starts a comment that
    // runs to end of line.
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while at < bytes.len() && bytes[at].is_ascii_whitespace() {
                at += 1;
            }
            if at < bytes.len() && bytes[at] == b'#' {
                while at < bytes.len() && bytes[at] != b'\n' {
                    at += 1;
                }
                continue;
            }
            break;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(Error::format(path, "truncated header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..at]).into_owned())
    };

    if token(&bytes)? != "P5" {
        return Err(Error::format(path, "not a binary graymap (P5)".to_string()));
    }
    let width: usize =
        token(&bytes)?.parse().map_err(|e| Error::format(path, format!("width: {e}")))?;
    let height: usize =
        token(&bytes)?.parse().map_err(|e| Error::format(path, format!("height: {e}")))?;
    let maxval: usize =
        token(&bytes)?.parse().map_err(|e| Error::format(path, format!("maxval: {e}")))?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval}, only 255 is supported")));
    }
    at += 1; // single whitespace byte after maxval
    let need = width * height;
    if bytes.len() < at + need {
        return Err(Error::format(
            path,
            format!("expected {need} pixel bytes, found {}", bytes.len().saturating_sub(at)),
        ));
    }
    let pixels = bytes[at..at + need].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(GrayImage { width, height, pixels })
}

/// Writes a binary pixmap (P6) on the blue-to-red ramp, atomically.
pub fn write_ppm(path: &Path, image: &GrayImage) -> Result<()> {
    if image.pixels.len() != image.width * image.height {
        return Err(Error::invalid(
            "ppm",
            format!("{} pixels for {}x{}", image.pixels.len(), image.width, image.height),
        ));
    }
    check_unit_range("ppm", &image.pixels)?;
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for &v in &image.pixels {
        out.push(quantize(v));
        out.push(0);
        out.push(quantize(1.0 - v));
    }
    super::write_atomic(path, &out)
}

/// Exports a 2-D map with values in [0, 1] as an image, scaled up by
/// `upscale` with nearest-neighbor replication. The path extension picks the
/// format: `.pgm` gray, `.ppm` color ramp.
///
/// Accepts `[h, w]` maps or higher-rank tensors with exactly one image and
/// one channel (for example `[1, 1, h, w]`).
pub fn export_heatmap(path: &Path, map: &Tensor, upscale: usize) -> Result<()> {
    if upscale == 0 {
        return Err(Error::invalid("heatmap", "upscale factor must be positive".to_string()));
    }
    let shape = map.shape();
    let (h, w) = match shape {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        [1, 1, h, w] => (*h, *w),
        _ => {
            return Err(Error::shape(
                "heatmap",
                format!("expected a single-channel 2-D map, got {shape:?}"),
            ))
        }
    };
    check_unit_range("heatmap", map.values())?;
    let mut pixels = Vec::with_capacity(h * w * upscale * upscale);
    for j in 0..h * upscale {
        for i in 0..w * upscale {
            pixels.push(map.values()[(j / upscale) * w + i / upscale]);
        }
    }
    let image = GrayImage { width: w * upscale, height: h * upscale, pixels };
    match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => write_pgm(path, &image),
        Some("ppm") => write_ppm(path, &image),
        other => Err(Error::invalid(
            "heatmap",
            format!("unsupported extension {other:?}, use .pgm or .ppm"),
        )),
    }
}
