//! Sweeps the feature-imitation weight to show why the desk preset keeps it
//! small. The imitation term sums squared feature gaps over channels and
//! cells, so its raw magnitude is a few thousand at initialization — orders
//! above the task loss. Too much of it destabilizes SGD outright; the run
//! stops with a divergence error rather than averaging NaNs into metrics.

use gkd::data::{generate_scenes, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT};
use gkd::detector::{build_detector, DetectorConfig};
use gkd::distill::{distill_train, train_detector, KdConfig, TrainConfig};
use gkd::Result;

fn main() -> Result<()> {
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, 200, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, 40, data.seed, VAL_SPLIT)?;

    let teacher_tc = TrainConfig { epochs: 12, similarity_scenes: 0, ..TrainConfig::desk() };
    println!("training teacher ({} epochs) ...", teacher_tc.epochs);
    let teacher = train_detector(
        build_detector(&DetectorConfig::teacher_toy(), 0)?,
        &teacher_tc,
        &train,
        &val,
        &mut |_| {},
    )?
    .model;

    let student_tc = TrainConfig { epochs: 4, ..teacher_tc.clone() };
    println!("sweeping the imitation weight (4 student epochs each):\n");
    println!("{:>8}  {}", "weight", "outcome");
    for beta in [0.05, 0.01, 0.002, 0.0005, 0.0001] {
        let kd = KdConfig { bmfi_weight: beta, ..KdConfig::desk() };
        let student = build_detector(&DetectorConfig::student_toy(), 1)?;
        match distill_train(student, Some(&teacher), &kd, &student_tc, &train, &val, &mut |_| {}) {
            Ok(out) => {
                let last = out.history.last().unwrap();
                println!(
                    "{beta:>8}  task {:.3}, kd {:.3}, val mAP {:.4}",
                    last.task_loss, last.kd_loss, last.val_map50
                );
            }
            Err(e) => println!("{beta:>8}  {e}"),
        }
    }
    println!("\nthe desk preset uses {}", KdConfig::desk().bmfi_weight);
    Ok(())
}
