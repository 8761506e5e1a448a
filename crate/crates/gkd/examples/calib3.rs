use gkd::data::{generate_scenes, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT};
use gkd::detector::{build_detector, DetectorConfig, DetectorModel};
use gkd::distill::{distill_train, train_detector, KdConfig, TrainConfig, TrainOutcome};
use gkd::io::{load_checkpoint, save_checkpoint};
use gkd::Result;
use std::path::Path;
use std::time::Instant;

fn teacher(train: &[gkd::data::Scene], val: &[gkd::data::Scene]) -> Result<DetectorModel> {
    let path = Path::new("/tmp/calib_teacher_30.ckpt");
    if path.exists() {
        println!("teacher: cached");
        return load_checkpoint(path)?.into_model();
    }
    let t0 = Instant::now();
    let tc = TrainConfig::desk();
    let out = train_detector(build_detector(&DetectorConfig::teacher_toy(), 0)?, &tc, train, val, &mut |m| {
        if m.epoch % 5 == 0 || m.epoch == 29 {
            println!("  t epoch {:>2}: task {:.3} mAP {:.3}", m.epoch, m.task_loss, m.val_map50);
        }
    })?;
    save_checkpoint(path, &out.model, out.steps as u64, None)?;
    println!("teacher trained in {:.0}s", t0.elapsed().as_secs_f64());
    Ok(out.model)
}

fn variant(name: &str, beta: f64) -> KdConfig {
    let base = KdConfig { bmfi_weight: beta, ..KdConfig::desk() };
    match name {
        "baseline" => KdConfig::disabled(),
        "gkd" => KdConfig { use_gkd: true, use_mask: false, use_mfi: false, ..base },
        "mask" => KdConfig { use_gkd: false, use_mask: true, use_mfi: false, ..base },
        "mfi" => KdConfig { use_gkd: false, use_mask: false, use_mfi: true, ..base },
        "full" => KdConfig { use_gkd: true, use_mask: true, use_mfi: true, ..base },
        _ => unreachable!(),
    }
}

fn run(
    name: &str,
    beta: f64,
    seed: u64,
    epochs: usize,
    teacher: &DetectorModel,
    train: &[gkd::data::Scene],
    val: &[gkd::data::Scene],
) -> Result<Option<TrainOutcome>> {
    let kd = variant(name, beta);
    let tc = TrainConfig { epochs, seed, ..TrainConfig::desk() };
    let student = build_detector(&DetectorConfig::student_toy(), seed)?;
    let teacher_ref = if name == "baseline" { None } else { Some(teacher) };
    let t0 = Instant::now();
    match distill_train(student, teacher_ref, &kd, &tc, train, val, &mut |m| {
        println!(
            "    e{:>2} task {:.3} kd {:.4} mAP {:.4} sim {:.3}",
            m.epoch,
            m.task_loss,
            m.kd_loss,
            m.val_map50,
            m.mask_similarity.unwrap_or(f64::NAN)
        );
    }) {
        Ok(out) => {
            println!("  {name} b{beta} s{seed}: ok in {:.0}s", t0.elapsed().as_secs_f64());
            Ok(Some(out))
        }
        Err(e) => {
            println!("  {name} b{beta} s{seed}: FAILED {e:?}");
            Ok(None)
        }
    }
}

fn main() -> Result<()> {
    let wall = Instant::now();
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, data.train_scenes, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, data.val_scenes, data.seed, VAL_SPLIT)?;
    let teacher = teacher(&train, &val)?;
    let tmap = gkd::eval::evaluate_detector(&teacher, &val, 8, 0.05, 0.5)?.map50;
    println!("teacher mAP {tmap:.4}");

    let phase = std::env::args().nth(1).unwrap_or_else(|| "a".into());
    if phase == "a" {
        // Stability/effect sweep: full variant, seed 1, over beta.
        for beta in [0.002, 0.001, 0.0005] {
            run("full", beta, 1, 10, &teacher, &train, &val)?;
        }
    } else {
        let beta: f64 = phase.parse().expect("phase b takes the chosen beta");
        for name in ["baseline", "gkd", "mask", "mfi", "full"] {
            for seed in [1u64, 2, 3] {
                run(name, beta, seed, 10, &teacher, &train, &val)?;
            }
        }
    }
    println!("total wall {:.0}s", wall.elapsed().as_secs_f64());
    Ok(())
}
