//! Spatial and channel attention masks: softmax over mean absolute
//! activations, rescaled so a flat input gives a mask of all ones.
//!
//! The temperature controls contrast. Cold masks spike on the strongest
//! cells; hot masks flatten toward uniform.

use gkd::imitation::{channel_attention, spatial_attention};
use gkd::{Result, Tape, Tensor};

const SHADES: &[u8] = b" .:-=+*#%@";

fn render(map: &[f64], h: usize, w: usize) {
    let top = map.iter().cloned().fold(f64::MIN, f64::max);
    for j in 0..h {
        let row: String = (0..w)
            .map(|i| {
                let v = map[j * w + i] / top;
                SHADES[((v * 9.0).round() as usize).min(9)] as char
            })
            .collect();
        println!("    |{row}|");
    }
}

fn main() -> Result<()> {
    // Three 8x8 channels: a bright blob near the top-left, a weaker one near
    // the bottom-right, and a flat channel.
    let (h, w) = (8usize, 8usize);
    let mut values = vec![0.0f64; 3 * h * w];
    for j in 0..h {
        for i in 0..w {
            let d0 = ((j as f64 - 2.0).powi(2) + (i as f64 - 2.0).powi(2)) / 4.0;
            let d1 = ((j as f64 - 5.0).powi(2) + (i as f64 - 5.0).powi(2)) / 6.0;
            values[j * w + i] = 2.0 * (-d0).exp();
            values[(h + j) * w + i] = 0.8 * (-d1).exp();
            values[(2 * h + j) * w + i] = 0.3;
        }
    }
    let features = Tensor::new(&[1, 3, h, w], values)?;
    let tape = Tape::new();

    for temperature in [0.25, 0.5, 2.0] {
        let ms = spatial_attention(&tape, &features, temperature)?;
        let sum: f64 = ms.values().iter().sum();
        let peak = ms.values().iter().cloned().fold(f64::MIN, f64::max);
        println!("spatial attention, T = {temperature}  (sum {sum:.1} = H*W, peak {peak:.2}):");
        render(ms.values(), h, w);
        println!();
    }

    let mc = channel_attention(&tape, &features, 0.5)?;
    println!("channel attention, T = 0.5: {:?}", mc.values().iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("  (sums to C = {:.1}; the blob channel dominates)", mc.values().iter().sum::<f64>());

    // A constant feature map has nothing to emphasize: both masks are ones.
    let flat = Tensor::full(&[1, 3, h, w], 0.7)?;
    let ms = spatial_attention(&tape, &flat, 0.5)?;
    let mc = channel_attention(&tape, &flat, 0.5)?;
    let spread = |vals: &[f64]| {
        vals.iter().map(|v| (v - 1.0).abs()).fold(0.0f64, f64::max)
    };
    println!("\nflat input: max |mask - 1| = {:.1e} (spatial), {:.1e} (channel)", spread(ms.values()), spread(mc.values()));
    Ok(())
}
