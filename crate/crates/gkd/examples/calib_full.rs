// Scratch: the full acceptance protocol with timing, to pin weights and
// epoch counts before freezing the acceptance test.
use std::time::Instant;

use gkd::data::{generate_scenes, SceneConfig};
use gkd::detector::{build_detector, DetectorConfig};
use gkd::distill::{distill_train, inherit_init, train_detector, KdConfig, TrainConfig};

fn main() {
    let wall = Instant::now();
    let scene_cfg = SceneConfig::default();
    let (train, _) = generate_scenes(&scene_cfg, 500, 0, 0).unwrap();
    let (val, _) = generate_scenes(&scene_cfg, 100, 0, 1).unwrap();

    let t0 = Instant::now();
    let teacher = build_detector(&DetectorConfig::teacher_toy(), 0).unwrap();
    let teacher = train_detector(teacher, &TrainConfig::desk(), &train, &val, &mut |m| {
        if m.epoch % 5 == 4 {
            println!("teacher epoch {} task {:.4} map {:.4}", m.epoch, m.task_loss, m.val_map50)
        }
    })
    .unwrap();
    let teacher_map = teacher.history.last().unwrap().val_map50;
    let teacher = teacher.model;
    println!("teacher 30 epochs: map {:.4} in {:.0}s\n", teacher_map, t0.elapsed().as_secs_f64());

    let student_tc = TrainConfig { epochs: 10, ..TrainConfig::desk() };
    let desk = KdConfig::desk();
    let variants: Vec<(&str, Option<KdConfig>)> = vec![
        ("baseline", None),
        ("gkd", Some(KdConfig { use_mask: false, use_mfi: false, ..desk.clone() })),
        ("mask", Some(KdConfig { use_gkd: false, use_mfi: false, ..desk.clone() })),
        ("mfi", Some(KdConfig { use_gkd: false, use_mask: false, ..desk.clone() })),
        ("full", Some(desk.clone())),
    ];

    for (name, kd) in &variants {
        let mut maps = Vec::new();
        for seed in [1u64, 2, 3] {
            let tc = TrainConfig { seed, ..student_tc.clone() };
            let t0 = Instant::now();
            let mut student = build_detector(&DetectorConfig::student_toy(), seed).unwrap();
            let outcome = match kd {
                None => train_detector(student, &tc, &train, &val, &mut |_| {}),
                Some(kd) => {
                    inherit_init(&mut student, &teacher).unwrap();
                    distill_train(student, Some(&teacher), kd, &tc, &train, &val, &mut |_| {})
                }
            };
            match outcome {
                Ok(out) => {
                    let last = out.history.last().unwrap();
                    let sim0 = out.history.first().unwrap().mask_similarity;
                    let sim_last = last.mask_similarity;
                    println!(
                        "  {name} seed {seed}: map {:.4} task {:.3} sim {:?}->{:?} ({:.0}s)",
                        last.val_map50,
                        last.task_loss,
                        sim0.map(|s| (s * 1000.0).round() / 1000.0),
                        sim_last.map(|s| (s * 1000.0).round() / 1000.0),
                        t0.elapsed().as_secs_f64()
                    );
                    maps.push(last.val_map50);
                }
                Err(e) => println!("  {name} seed {seed}: FAILED {e}"),
            }
        }
        if maps.len() == 3 {
            println!("{name}: mean map {:.4}\n", maps.iter().sum::<f64>() / 3.0);
        }
    }
    println!("total wall: {:.0}s", wall.elapsed().as_secs_f64());
}
