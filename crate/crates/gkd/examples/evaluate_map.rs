//! Evaluates mAP at IoU 0.5 before and after a short training run, then
//! decodes one scene to show what the score threshold and NMS leave behind.

use gkd::data::{generate_scenes, images_tensor, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT};
use gkd::detector::{build_detector, decode, DetectorConfig};
use gkd::distill::{train_detector, TrainConfig};
use gkd::eval::{evaluate_detector, MapResult, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use gkd::{Result, Tape};

const CLASS_NAMES: [&str; 3] = ["square", "circle", "triangle"];

fn report(tag: &str, result: &MapResult) {
    println!("{tag}: mAP@0.5 = {:.4}", result.map50);
    for class in &result.per_class {
        let ap = class.ap.map_or("   n/a".to_string(), |a| format!("{a:.4}"));
        let recall = class.recall.last().copied().unwrap_or(0.0);
        println!(
            "  {:<8} ap {ap}  ({} boxes, final recall {recall:.2})",
            CLASS_NAMES[class.class_id], class.gt_count
        );
    }
}

fn main() -> Result<()> {
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, 100, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, 40, data.seed, VAL_SPLIT)?;

    let model = build_detector(&DetectorConfig::student_toy(), 11)?;
    let fresh = evaluate_detector(&model, &val, 8, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)?;
    report("untrained", &fresh);

    let tc = TrainConfig { epochs: 6, similarity_scenes: 0, ..TrainConfig::desk() };
    println!("\ntraining for {} epochs on {} scenes ...", tc.epochs, train.len());
    let out = train_detector(model, &tc, &train, &val, &mut |m| {
        println!("  epoch {}: task {:.3}, val mAP {:.3}", m.epoch, m.task_loss, m.val_map50);
    })?;

    let trained = evaluate_detector(&out.model, &val, 8, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)?;
    println!();
    report("trained", &trained);

    // Decoding one scene shows the raw output the metric is built from.
    let tape = Tape::new();
    let images = images_tensor(&val, &[0])?;
    let (_, pred) = out.model.forward(&tape, &images)?;
    println!("\nscene 0 ground truth:");
    for gt in &val[0].objects {
        let b = &gt.bbox;
        println!("  {:<8} [{:5.1},{:5.1}]..[{:5.1},{:5.1}]", CLASS_NAMES[gt.class_id], b.x_min, b.y_min, b.x_max, b.y_max);
    }
    println!("scene 0 detections (score >= 0.3 after NMS):");
    for det in &decode(&out.model.config, &pred, 0.3, DEFAULT_NMS_IOU)?[0] {
        let b = &det.bbox;
        println!(
            "  {:<8} [{:5.1},{:5.1}]..[{:5.1},{:5.1}]  score {:.2}",
            CLASS_NAMES[det.class_id], b.x_min, b.y_min, b.x_max, b.y_max, det.score
        );
    }
    Ok(())
}
