//! Renders the box-aware imitation masks for a hand-placed pair of objects.
//!
//! Cells inside a box get weight 1, cells in the surrounding 2x context ring
//! decay with a Gaussian in normalized distance from the box edge, and cells
//! outside stay 0. Overlapping objects combine by per-cell max.

use gkd::detector::{BBox, DetectorConfig, GroundTruth};
use gkd::imitation::box_mask;
use gkd::Result;

const SHADES: &[u8] = b" .:-=+*#%@";

fn shade(v: f64) -> char {
    let idx = (v * (SHADES.len() - 1) as f64).round() as usize;
    SHADES[idx.min(SHADES.len() - 1)] as char
}

fn render(mask: &[f64], h: usize, w: usize) {
    for j in 0..h {
        let row: String = (0..w).map(|i| shade(mask[j * w + i])).collect();
        println!("    |{row}|");
    }
}

fn main() -> Result<()> {
    let config = DetectorConfig::teacher_toy();
    let gts = vec![vec![
        GroundTruth { bbox: BBox::new(6.0, 10.0, 26.0, 30.0)?, class_id: 0 },
        GroundTruth { bbox: BBox::new(30.0, 34.0, 58.0, 60.0)?, class_id: 2 },
    ]];

    for (level, &stride) in config.strides().iter().enumerate() {
        let mask = box_mask(&config, &gts, level)?;
        let [_, _, h, w] = *mask.shape() else { unreachable!() };
        println!("level {level} (stride {stride}, {h}x{w} cells):");
        render(mask.values(), h, w);
        let inside = mask.values().iter().filter(|&&v| v == 1.0).count();
        let fringe = mask.values().iter().filter(|&&v| v > 0.0 && v < 1.0).count();
        println!("    {inside} core cells, {fringe} context cells\n");
    }

    // The context ring lets close-together objects reinforce each other:
    // where two rings overlap the larger weight wins.
    let pair = vec![vec![
        GroundTruth { bbox: BBox::new(4.0, 24.0, 20.0, 40.0)?, class_id: 0 },
        GroundTruth { bbox: BBox::new(40.0, 24.0, 56.0, 40.0)?, class_id: 1 },
    ]];
    let mask = box_mask(&config, &pair, 0)?;
    let [_, _, h, w] = *mask.shape() else { unreachable!() };
    println!("two objects sharing a context ring (level 0):");
    render(mask.values(), h, w);
    Ok(())
}
