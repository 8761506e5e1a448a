// Scratch: measure per-epoch costs before pinning the acceptance protocol.
use std::time::Instant;

use gkd::data::{generate_scenes, SceneConfig};
use gkd::detector::{build_detector, DetectorConfig};
use gkd::distill::{distill_train, train_detector, KdConfig, TrainConfig};

fn main() {
    let scene_cfg = SceneConfig::default();
    let t0 = Instant::now();
    let (train, _) = generate_scenes(&scene_cfg, 500, 0, 0).unwrap();
    let (val, _) = generate_scenes(&scene_cfg, 100, 0, 1).unwrap();
    println!("gen 600 scenes: {:.2}s", t0.elapsed().as_secs_f64());

    let tc = TrainConfig { epochs: 2, ..TrainConfig::desk() };

    let t0 = Instant::now();
    let teacher = build_detector(&DetectorConfig::teacher_toy(), 0).unwrap();
    let teacher = train_detector(teacher, &tc, &train, &val, &mut |m| {
        println!("  teacher epoch {} task {:.4} map {:.4}", m.epoch, m.task_loss, m.val_map50)
    })
    .unwrap();
    println!("teacher 2 epochs: {:.2}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let student = build_detector(&DetectorConfig::student_toy(), 1).unwrap();
    let _ = train_detector(student, &tc, &train, &val, &mut |m| {
        println!("  student epoch {} task {:.4} map {:.4}", m.epoch, m.task_loss, m.val_map50)
    })
    .unwrap();
    println!("student baseline 2 epochs: {:.2}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let student = build_detector(&DetectorConfig::student_toy(), 1).unwrap();
    let _ = distill_train(student, Some(&teacher.model), &KdConfig::desk(), &tc, &train, &val, &mut |m| {
        println!(
            "  distill epoch {} task {:.4} kd {:.4} map {:.4} sim {:?}",
            m.epoch, m.task_loss, m.kd_loss, m.val_map50, m.mask_similarity
        )
    })
    .unwrap();
    println!("distill full 2 epochs: {:.2}s", t0.elapsed().as_secs_f64());
}
