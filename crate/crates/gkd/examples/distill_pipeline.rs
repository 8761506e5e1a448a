//! End-to-end distillation: train a wide teacher, then train the narrow
//! student twice from the same initialization — once plain, once with every
//! distillation signal on — and compare. Runs on the default 500-scene
//! corpus; takes a few minutes on one core.
//!
//! The default distillation weights are sized for this corpus; on much
//! smaller ones the imitation term can destabilize early training (see
//! `kd_sweep.rs` for how the weights were picked).

use gkd::data::{generate_scenes, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT};
use gkd::detector::{build_detector, DetectorConfig};
use gkd::distill::{distill_train, train_detector, KdConfig, TrainConfig};
use gkd::Result;

fn main() -> Result<()> {
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, data.train_scenes, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, data.val_scenes, data.seed, VAL_SPLIT)?;

    let teacher_tc = TrainConfig { epochs: 10, similarity_scenes: 0, ..TrainConfig::desk() };
    println!("teacher ({} epochs) ...", teacher_tc.epochs);
    let teacher = train_detector(
        build_detector(&DetectorConfig::teacher_toy(), 0)?,
        &teacher_tc,
        &train,
        &val,
        &mut |m| println!("  epoch {:>2}: task {:.3}, val mAP {:.3}", m.epoch, m.task_loss, m.val_map50),
    )?
    .model;

    // Both student runs start from the same random initialization, so any
    // gap comes from the distillation signals alone.
    let student_tc = TrainConfig { epochs: 6, ..TrainConfig::desk() };
    let init = build_detector(&DetectorConfig::student_toy(), 1)?;

    println!("\nstudent, plain supervision ...");
    let plain = train_detector(init.clone(), &student_tc, &train, &val, &mut |m| {
        println!("  epoch {:>2}: task {:.3}, val mAP {:.3}", m.epoch, m.task_loss, m.val_map50)
    })?;

    println!("\nstudent, distilled (saliency matching + masked feature imitation) ...");
    let kd = KdConfig::desk();
    let distilled = distill_train(init, Some(&teacher), &kd, &student_tc, &train, &val, &mut |m| {
        println!(
            "  epoch {:>2}: task {:.3}, kd {:.3}, val mAP {:.3}, saliency agreement {:.3}",
            m.epoch,
            m.task_loss,
            m.kd_loss,
            m.val_map50,
            m.mask_similarity.unwrap_or(f64::NAN),
        )
    })?;

    let last = |h: &[gkd::distill::EpochMetrics]| h.last().map_or(0.0, |m| m.val_map50);
    println!("\nfinal val mAP@0.5:");
    println!("  plain student     {:.4}", last(&plain.history));
    println!("  distilled student {:.4}", last(&distilled.history));
    let sims: Vec<f64> = distilled.history.iter().filter_map(|m| m.mask_similarity).collect();
    println!(
        "saliency agreement with teacher: {:.3} (first epoch) -> {:.3} (last)",
        sims.first().unwrap_or(&f64::NAN),
        sims.last().unwrap_or(&f64::NAN)
    );
    Ok(())
}
