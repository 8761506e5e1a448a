// Scratch: inspect distillation loss magnitudes and test candidate weights.
use std::time::Instant;

use gkd::data::{generate_scenes, ground_truth_of, images_tensor, SceneConfig};
use gkd::detector::{build_detector, detection_loss, DetectorConfig};
use gkd::distill::{
    distill_train, inherit_init, prepare_teacher_kd, total_kd_loss, train_detector, KdBatch,
    KdConfig, TrainConfig,
};
use gkd::imitation::box_mask;
use gkd::saliency::channel_gradient_weights;
use gkd::tensor::{Tape, Tensor};

fn main() {
    let scene_cfg = SceneConfig::default();
    let (train, _) = generate_scenes(&scene_cfg, 500, 0, 0).unwrap();
    let (val, _) = generate_scenes(&scene_cfg, 100, 0, 1).unwrap();

    let t0 = Instant::now();
    let tc_teacher = TrainConfig { epochs: 8, ..TrainConfig::desk() };
    let teacher = build_detector(&DetectorConfig::teacher_toy(), 0).unwrap();
    let teacher = train_detector(teacher, &tc_teacher, &train, &val, &mut |m| {
        println!("teacher epoch {} task {:.4} map {:.4}", m.epoch, m.task_loss, m.val_map50)
    })
    .unwrap()
    .model;
    println!("teacher trained in {:.1}s\n", t0.elapsed().as_secs_f64());

    // One-batch component magnitudes for a fresh vs inherited student.
    let kd_ctx = prepare_teacher_kd(&teacher, &train[..8]).unwrap();
    for inherit in [false, true] {
        let mut student = build_detector(&DetectorConfig::student_toy(), 1).unwrap();
        if inherit {
            inherit_init(&mut student, &teacher).unwrap();
        }
        let chunk: Vec<usize> = (0..8).collect();
        let images = images_tensor(&train[..8], &chunk).unwrap();
        let gts = ground_truth_of(&train[..8], &chunk);

        let tape = Tape::new();
        let (levels, pred) = student.forward(&tape, &images).unwrap();
        let task = detection_loss(&tape, &student.config, &pred, &gts).unwrap();
        let grads = tape.backward(&task).unwrap();
        let weights: Vec<Tensor> =
            levels.iter().map(|l| channel_gradient_weights(grads.get(l).unwrap()).unwrap()).collect();

        let tape = Tape::new();
        let (levels, pred) = student.forward(&tape, &images).unwrap();
        let task = detection_loss(&tape, &student.config, &pred, &gts).unwrap();
        let num_levels = student.config.num_levels;
        let mut t_feats = Vec::new();
        let mut t_maps = Vec::new();
        let mut masks = Vec::new();
        for level in 0..num_levels {
            let stack = |per_scene: &Vec<Vec<Tensor>>| {
                let mut vals = Vec::new();
                for i in 0..8 {
                    vals.extend_from_slice(per_scene[i][level].values());
                }
                let mut shape = per_scene[0][level].shape().to_vec();
                shape[0] = 8;
                Tensor::new(&shape, vals).unwrap()
            };
            t_feats.push(stack(&kd_ctx.features));
            t_maps.push(stack(&kd_ctx.maps));
            masks.push(Some(box_mask(&student.config, &gts, level).unwrap()));
        }
        let batch = KdBatch { teacher_features: t_feats, teacher_maps: t_maps, masks };
        let kd = KdConfig { bmfi_weight: 1.0, attention_weight: 0.0, ..KdConfig::default() };
        let parts = total_kd_loss(&tape, &kd, &batch, &levels, Some(&weights)).unwrap();
        let kd_a = KdConfig { bmfi_weight: 0.0, attention_weight: 1.0, ..KdConfig::default() };
        let parts_a = total_kd_loss(&tape, &kd_a, &batch, &levels, Some(&weights)).unwrap();
        println!(
            "inherit={inherit}: task {:.3}  saliency {:.3}  feature_term {:.3}  feat+attn {:.3}",
            task.item(),
            parts.saliency_value,
            parts.imitation_value,
            parts_a.imitation_value,
        );
    }

    // Short sweep: which weights keep FULL stable and helpful?
    let tc = TrainConfig { epochs: 6, ..TrainConfig::desk() };
    for (beta, alpha) in [(0.002, 0.01), (0.01, 0.05), (0.02, 0.1)] {
        let kd = KdConfig { bmfi_weight: beta, attention_weight: alpha, ..KdConfig::default() };
        let mut student = build_detector(&DetectorConfig::student_toy(), 1).unwrap();
        inherit_init(&mut student, &teacher).unwrap();
        let t0 = Instant::now();
        match distill_train(student, Some(&teacher), &kd, &tc, &train, &val, &mut |_| {}) {
            Ok(out) => {
                let last = out.history.last().unwrap();
                println!(
                    "beta {beta} alpha {alpha}: map {:.4} task {:.3} kd {:.3} sim {:.3} ({:.0}s)",
                    last.val_map50,
                    last.task_loss,
                    last.kd_loss,
                    last.mask_similarity.unwrap(),
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("beta {beta} alpha {alpha}: {e}"),
        }
    }
}
