//! Builds gradient-guided target maps for a briefly trained detector and
//! shows where they concentrate relative to the scene's objects.
//!
//! The recipe per level: run the task loss, pull the gradient that arrived
//! at the pyramid features, average it over space into per-channel weights,
//! then re-project those weights onto the features (1x1 conv with frozen
//! coefficients, relu, per-image min-max normalization).

use gkd::data::{generate_scenes, images_tensor, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT};
use gkd::detector::{build_detector, detection_loss, DetectorConfig};
use gkd::distill::{train_detector, TrainConfig};
use gkd::io::export_heatmap;
use gkd::saliency::{channel_gradient_weights, target_map};
use gkd::{Result, Tape};
use std::path::Path;

const SHADES: &[u8] = b" .:-=+*#%@";

fn render(map: &[f64], h: usize, w: usize) {
    for j in 0..h {
        let row: String = (0..w)
            .map(|i| {
                let v = map[j * w + i];
                SHADES[((v * 9.0).round() as usize).min(9)] as char
            })
            .collect();
        println!("    |{row}|");
    }
}

fn main() -> Result<()> {
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, 80, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, 16, data.seed, VAL_SPLIT)?;

    // A few epochs are enough for the gradients to point at objects.
    let tc = TrainConfig { epochs: 4, similarity_scenes: 0, ..TrainConfig::desk() };
    let model = build_detector(&DetectorConfig::teacher_toy(), 7)?;
    println!("training a detector for {} short epochs ...", tc.epochs);
    let out = train_detector(model, &tc, &train, &val, &mut |m| {
        println!("  epoch {}: task {:.3}, val mAP {:.3}", m.epoch, m.task_loss, m.val_map50);
    })?;
    let model = out.model;

    let scene = &val[3];
    println!("\nscene objects:");
    for gt in &scene.objects {
        let b = &gt.bbox;
        println!(
            "  class {} at [{:.0},{:.0}]..[{:.0},{:.0}]",
            gt.class_id, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }

    let tape = Tape::new();
    let images = images_tensor(&val, &[3])?;
    let (levels, pred) = model.forward(&tape, &images)?;
    let task = detection_loss(&tape, &model.config, &pred, &[scene.objects.clone()])?;
    let grads = tape.backward(&task)?;

    let out_dir = Path::new("target/example-out/target_maps");
    std::fs::create_dir_all(out_dir).expect("create output dir");
    for (level, features) in levels.iter().enumerate() {
        let grad = grads.get(features).expect("features feed the loss");
        let weights = channel_gradient_weights(grad)?;
        let map = target_map(&tape, features, &weights)?;
        let [_, _, h, w] = *map.shape() else { unreachable!() };
        let stride = model.config.strides()[level];
        println!("\ntarget map, level {level} (stride {stride}):");
        render(map.values(), h, w);

        let path = out_dir.join(format!("level{level}.ppm"));
        export_heatmap(&path, &map, stride)?;
        println!("    wrote {}", path.display());
    }
    Ok(())
}
