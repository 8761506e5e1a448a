//! Trains the wide detector, logs metrics as JSON lines, saves a binary
//! checkpoint, and proves the reload is bit-exact.

use gkd::data::{generate_scenes, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT};
use gkd::detector::{build_detector, DetectorConfig};
use gkd::distill::{train_detector, TrainConfig};
use gkd::eval::{evaluate_detector, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD};
use gkd::io::{load_checkpoint, read_metrics, save_checkpoint, MetricsLog};
use gkd::Result;
use std::path::Path;

fn main() -> Result<()> {
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, 200, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, 40, data.seed, VAL_SPLIT)?;

    let out_dir = Path::new("target/example-out/train_teacher");
    std::fs::create_dir_all(out_dir).expect("create output dir");
    let mut log = MetricsLog::create(&out_dir.join("metrics.jsonl"))?;

    // An abbreviated schedule; the defaults train for 30 epochs.
    let tc = TrainConfig { epochs: 8, ..TrainConfig::desk() };
    log.echo_config("train-config", &tc)?;

    let model = build_detector(&DetectorConfig::teacher_toy(), 0)?;
    println!("teacher: {} params, {} epochs on {} scenes", model.num_params(), tc.epochs, train.len());
    let out = train_detector(model, &tc, &train, &val, &mut |m| {
        println!("  epoch {:>2}: task {:.3}, val mAP {:.3}", m.epoch, m.task_loss, m.val_map50);
        log.record(
            "epoch",
            &[("epoch", m.epoch as i64)],
            &[("task_loss", m.task_loss), ("val_map50", m.val_map50)],
        )
        .expect("metrics write");
    })?;

    let ckpt_path = out_dir.join("teacher.ckpt");
    save_checkpoint(&ckpt_path, &out.model, out.steps as u64, Some(&out.sgd.to_tensors(&out.model)))?;
    println!("\nsaved {} ({} bytes)", ckpt_path.display(), std::fs::metadata(&ckpt_path).map(|m| m.len()).unwrap_or(0));

    let reloaded = load_checkpoint(&ckpt_path)?.into_model()?;
    let before = evaluate_detector(&out.model, &val, 8, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)?;
    let after = evaluate_detector(&reloaded, &val, 8, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)?;
    let identical = out
        .model
        .named_params()
        .iter()
        .zip(reloaded.named_params())
        .all(|((_, a), (_, b))| a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("reload: params bit-identical = {identical}, mAP {:.4} -> {:.4}", before.map50, after.map50);

    let records = read_metrics(&out_dir.join("metrics.jsonl"))?;
    println!("metrics log: {} records, last = {}", records.len(), records.last().unwrap());
    Ok(())
}
