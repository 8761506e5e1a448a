use gkd::data::{generate_scenes, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT};
use gkd::detector::{build_detector, DetectorConfig};
use gkd::distill::{distill_train, inherit_init, train_detector, KdConfig, TrainConfig};
use gkd::Result;

fn main() -> Result<()> {
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, 160, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, 40, data.seed, VAL_SPLIT)?;

    let tc = TrainConfig { epochs: 16, similarity_scenes: 0, ..TrainConfig::desk() };
    let teacher = train_detector(
        build_detector(&DetectorConfig::teacher_toy(), 0)?,
        &tc,
        &train,
        &val,
        &mut |_| {},
    )?
    .model;
    println!("teacher mAP {:.3}", gkd::eval::evaluate_detector(&teacher, &val, 8, 0.05, 0.5)?.map50);

    for beta in [0.002, 0.001, 0.0005, 0.0002] {
        for inherit in [true, false] {
            let kd = KdConfig { bmfi_weight: beta, ..KdConfig::desk() };
            let student_tc = TrainConfig { epochs: 3, ..tc.clone() };
            let mut warm = build_detector(&DetectorConfig::student_toy(), 1)?;
            if inherit {
                inherit_init(&mut warm, &teacher)?;
            }
            print!("beta {beta} inherit {inherit}: ");
            match distill_train(warm, Some(&teacher), &kd, &student_tc, &train, &val, &mut |_| {}) {
                Ok(out) => {
                    let last = out.history.last().unwrap();
                    println!("ok, task {:.3} kd {:.3} mAP {:.3}", last.task_loss, last.kd_loss, last.val_map50)
                }
                Err(e) => println!("{e:?}"),
            }
        }
    }
    Ok(())
}
