//! The eleven go/no-go checks for this crate, one test per criterion, each
//! printing a single `criterion NN ... pass|fail` line (visible with
//! `--nocapture`). Criteria 7-9 share one desk-scale distillation
//! experiment behind a lazy static; everything else is self-contained.

use std::sync::LazyLock;
use std::time::{Duration, Instant};

use gkd::data::{
    generate_dataset, generate_scenes, ground_truth_of, images_tensor, DatasetConfig, TRAIN_SPLIT, VAL_SPLIT,
};
use gkd::detector::{
    build_detector, count_complexity, detection_loss, BBox, Detection, DetectorConfig, GroundTruth,
};
use gkd::distill::{distill_train, prepare_teacher_kd, train_detector, EpochMetrics, KdConfig, TrainConfig};
use gkd::eval::{iou, map50};
use gkd::imitation::{box_mask, channel_attention, imitation_parts, spatial_attention};
use gkd::io::{load_checkpoint, save_checkpoint};
use gkd::saliency::{channel_gradient_weights, gkd_loss, target_map};
use gkd::{fdcheck, Result, Tape, Tensor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(number: usize, label: &str, ok: bool) {
    println!("criterion {number:>2}  {label:<62} {}", if ok { "pass" } else { "FAIL" });
    assert!(ok, "criterion {number} failed: {label}");
}

// ── 1: scale statement ─────────────────────────────────────────────────────

#[test]
fn criterion_01_full_scale_substitution_is_stated() {
    // The reference results for this distillation recipe come from GPU-week
    // detector training on real benchmarks. One CPU core cannot reproduce
    // them; this suite substitutes direction-preserving checks (criteria
    // 7-9) on a synthetic task plus exact oracles for every derived
    // quantity (criteria 2-6, 10-11).
    verdict(1, "full-scale results substituted by direction checks", true);
}

// ── 2-3: gradient oracles ──────────────────────────────────────────────────

static FD_REPORTS: LazyLock<(Vec<fdcheck::FdReport>, Duration)> = LazyLock::new(|| {
    let t0 = Instant::now();
    let reports = fdcheck::run_all().expect("oracle suite runs");
    (reports, t0.elapsed())
});

#[test]
fn criterion_02_finite_difference_oracles() {
    let (reports, elapsed) = &*FD_REPORTS;
    let all_pass = reports.iter().all(|r| r.passed());
    let tolerances_pinned = reports
        .iter()
        .all(|r| r.tolerance <= if r.name == "channel_weights_uniform_shift" { 1e-3 } else { 1e-4 });
    let in_time = *elapsed < Duration::from_secs(120);
    for r in reports.iter().filter(|r| !r.passed()) {
        println!("  fd failure: {} at {:.2e} (tolerance {:.0e})", r.name, r.max_rel_error, r.tolerance);
    }
    verdict(2, "autodiff + losses pass finite differences in under 2 min", all_pass && tolerances_pinned && in_time);
}

#[test]
fn criterion_03_channel_weight_oracle() {
    let (reports, _) = &*FD_REPORTS;
    let report = reports
        .iter()
        .find(|r| r.name == "channel_weights_uniform_shift")
        .expect("channel-weight oracle in suite");
    verdict(3, "channel weights equal scaled uniform-shift derivative", report.passed() && report.tolerance <= 1e-3);
}

// ── 4: normalization invariants ────────────────────────────────────────────

#[test]
fn criterion_04_normalization_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let tape = Tape::new();
    let mut ok = true;
    for case in 0..1000 {
        let n = rng.gen_range(1..=2usize);
        let c = rng.gen_range(1..=5usize);
        let h = rng.gen_range(1..=7usize);
        let w = rng.gen_range(1..=7usize);
        // A quarter of the cases push toward degeneracy: constant features
        // or one-sided weights.
        let features = match case % 4 {
            0 => Tensor::full(&[n, c, h, w], rng.gen_range(-1.0..1.0)).unwrap(),
            _ => Tensor::new(
                &[n, c, h, w],
                (0..n * c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            )
            .unwrap(),
        };
        let weights = Tensor::new(
            &[n, c],
            (0..n * c)
                .map(|_| if case % 5 == 0 { -rng.gen_range(0.0..1.0f64) } else { rng.gen_range(-1.0..1.0) })
                .collect(),
        )
        .unwrap();

        let map = target_map(&tape, &features, &weights).unwrap();
        for img in 0..n {
            let vals = &map.values()[img * h * w..(img + 1) * h * w];
            if vals.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                ok = false;
            }
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            // Degenerate images (constant pre-normalization response) must
            // come out all zero; anything else hits 0 and 1 exactly.
            if hi > lo {
                ok &= lo == 0.0 && hi == 1.0;
            } else {
                ok &= vals.iter().all(|&v| v == 0.0);
            }
        }

        let temperature = [0.25, 0.5, 1.0, 2.0][case % 4];
        let ms = spatial_attention(&tape, &features, temperature).unwrap();
        let mc = channel_attention(&tape, &features, temperature).unwrap();
        for img in 0..n {
            let s: f64 = ms.values()[img * h * w..(img + 1) * h * w].iter().sum();
            ok &= (s - (h * w) as f64).abs() < 1e-9;
            let s: f64 = mc.values()[img * c..(img + 1) * c].iter().sum();
            ok &= (s - c as f64).abs() < 1e-9;
        }
    }
    verdict(4, "map in [0,1] hitting both ends; attention sums HW and C", ok);
}

// ── 5: box-mask geometry ───────────────────────────────────────────────────

/// A config whose first pyramid level (stride 8) is a `cells` x `cells`
/// lattice.
fn mask_grid_config(cells: usize) -> DetectorConfig {
    let config = DetectorConfig {
        backbone_widths: vec![2, 2, 2],
        neck_channels: 2,
        num_levels: 2,
        num_classes: 1,
        input_height: cells * 8,
        input_width: cells * 8,
    };
    config.validate().expect("valid mask grid config");
    config
}

#[test]
fn criterion_05_box_mask_geometry() {
    let mut ok = true;
    for cells in [8usize, 16, 32] {
        let config = mask_grid_config(cells);
        let stride = 8.0;
        // Every box with cell-aligned corners on the grid.
        for y0 in 0..cells {
            for y1 in (y0 + 1)..=cells {
                for x0 in 0..cells {
                    for x1 in (x0 + 1)..=cells {
                        let bbox = BBox::new(
                            x0 as f64 * stride,
                            y0 as f64 * stride,
                            x1 as f64 * stride,
                            y1 as f64 * stride,
                        )
                        .unwrap();
                        let gts = vec![vec![GroundTruth { bbox, class_id: 0 }]];
                        let mask = box_mask(&config, &gts, 0).unwrap();
                        ok &= mask_geometry_holds(mask.values(), cells, (x0, y0, x1, y1));
                        if !ok {
                            println!("  geometry broke for box ({x0},{y0})..({x1},{y1}) on {cells}x{cells}");
                            verdict(5, "box masks: 1 inside, 0 outside 2x, monotone, symmetric", false);
                        }
                    }
                }
            }
        }
    }
    verdict(5, "box masks: 1 inside, 0 outside 2x, monotone, symmetric", ok);
}

/// Independent recomputation of the in/out tests for one box, in cell
/// units: center c, size s (cells, floored at 1); a cell index t is inside
/// when |t - c| <= s/2 and outside the doubled region when |t - c| > s.
fn mask_geometry_holds(mask: &[f64], cells: usize, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> bool {
    let (cx, cy) = ((x0 + x1) as f64 / 2.0, (y0 + y1) as f64 / 2.0);
    let sw = ((x1 - x0) as f64).max(1.0);
    let sh = ((y1 - y0) as f64).max(1.0);
    let at = |i: usize, j: usize| mask[j * cells + i];

    for j in 0..cells {
        let v = (j as f64 - cy).abs() / sh;
        for i in 0..cells {
            let u = (i as f64 - cx).abs() / sw;
            let value = at(i, j);
            if u <= 0.5 && v <= 0.5 {
                if value != 1.0 {
                    return false;
                }
            } else if u > 1.0 || v > 1.0 {
                if value != 0.0 {
                    return false;
                }
            } else if !(0.0..1.0).contains(&value) {
                return false;
            }
        }
    }

    // Between adjacent cells on the same side of the center, the value
    // farther from the center never exceeds the nearer one. Pairs that
    // straddle the center are unconstrained.
    for j in 0..cells {
        for i in 1..cells {
            let (left, right) = (at(i - 1, j), at(i, j));
            if (i - 1) as f64 >= cx && right > left {
                return false;
            }
            if i as f64 <= cx && left > right {
                return false;
            }
        }
    }
    for i in 0..cells {
        for j in 1..cells {
            let (up, down) = (at(i, j - 1), at(i, j));
            if (j - 1) as f64 >= cy && down > up {
                return false;
            }
            if j as f64 <= cy && up > down {
                return false;
            }
        }
    }

    // Mirror symmetry whenever the box is centered on the lattice.
    if (cx - (cells - 1) as f64 / 2.0).abs() < 1e-12 {
        for j in 0..cells {
            for i in 0..cells {
                if at(i, j).to_bits() != at(cells - 1 - i, j).to_bits() {
                    return false;
                }
            }
        }
    }
    if (cy - (cells - 1) as f64 / 2.0).abs() < 1e-12 {
        for j in 0..cells {
            for i in 0..cells {
                if at(i, j).to_bits() != at(i, cells - 1 - j).to_bits() {
                    return false;
                }
            }
        }
    }
    true
}

// ── 6: identity laws ───────────────────────────────────────────────────────

#[test]
fn criterion_06_identity_laws() -> Result<()> {
    // Identical models: both distillation residuals vanish exactly. Two
    // builds from one seed give bitwise-equal parameters.
    let data = DatasetConfig::default();
    let (scenes, _) = generate_scenes(&data.scene, 4, 61, VAL_SPLIT)?;
    let teacher = build_detector(&DetectorConfig::teacher_toy(), 6)?;
    let student = build_detector(&DetectorConfig::teacher_toy(), 6)?;

    let cache = prepare_teacher_kd(&teacher, &scenes)?;
    let tape = Tape::new();
    let images = images_tensor(&scenes, &[0, 1, 2, 3])?;
    let (levels, pred) = student.forward(&tape, &images)?;
    let gts = ground_truth_of(&scenes, &[0, 1, 2, 3]);
    let task = detection_loss(&tape, &student.config, &pred, &gts)?;
    let grads = tape.backward(&task)?;

    let mut residuals_vanish = true;
    for (level, features) in levels.iter().enumerate() {
        let weights = channel_gradient_weights(grads.get(features).expect("grad"))?;
        let student_map = target_map(&tape, features, &weights)?;
        let teacher_maps: Vec<Tensor> = (0..scenes.len()).map(|s| cache.maps[s][level].clone()).collect();
        let stacked = stack_batch(&teacher_maps)?;
        let loss = gkd_loss(&tape, &[stacked], &[student_map])?;
        residuals_vanish &= loss.values()[0].abs() <= 1e-12;

        let teacher_features: Vec<Tensor> =
            (0..scenes.len()).map(|s| cache.features[s][level].clone()).collect();
        let stacked = stack_batch(&teacher_features)?;
        let parts = imitation_parts(&tape, &stacked, features, None, 0.5, true)?;
        residuals_vanish &= parts.feature_term.values()[0].abs() <= 1e-12;
    }

    // Zero-weight distillation: the whole trajectory matches the baseline
    // bit for bit.
    let (train, _) = generate_scenes(&data.scene, 24, data.seed, TRAIN_SPLIT)?;
    let (val, _) = generate_scenes(&data.scene, 8, data.seed, VAL_SPLIT)?;
    let tc = TrainConfig { epochs: 3, similarity_scenes: 0, ..TrainConfig::desk() };
    let kd = KdConfig { kd_weight: 0.0, ..KdConfig::desk() };
    let zero_kd = distill_train(
        build_detector(&DetectorConfig::student_toy(), 8)?,
        Some(&teacher),
        &kd,
        &tc,
        &train,
        &val,
        &mut |_| {},
    )?;
    let baseline = train_detector(build_detector(&DetectorConfig::student_toy(), 8)?, &tc, &train, &val, &mut |_| {})?;
    let trajectories_match = zero_kd
        .model
        .named_params()
        .iter()
        .zip(baseline.model.named_params())
        .all(|((_, a), (_, b))| a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));

    verdict(6, "identical models zero the losses; zero weight is baseline", residuals_vanish && trajectories_match);
    Ok(())
}

/// Concatenates `[1, ...]` tensors along the batch axis as plain data.
fn stack_batch(per_scene: &[Tensor]) -> Result<Tensor> {
    let mut shape = per_scene[0].shape().to_vec();
    shape[0] = per_scene.len();
    let mut values = Vec::with_capacity(per_scene.iter().map(|t| t.values().len()).sum());
    for t in per_scene {
        values.extend_from_slice(t.values());
    }
    Tensor::new(&shape, values)
}

// ── 7-9: the desk experiment ───────────────────────────────────────────────

const STUDENT_EPOCHS: usize = 10;
const SEEDS: [u64; 3] = [1, 2, 3];

struct Experiment {
    teacher_map: f64,
    /// Final-epoch val mAP per seed, per variant.
    finals: std::collections::BTreeMap<&'static str, Vec<f64>>,
    /// (first-epoch, final-epoch) saliency similarity for runs with the
    /// saliency signal on.
    similarity: Vec<(f64, f64)>,
    wall: Duration,
}

fn variant(name: &str) -> KdConfig {
    let desk = KdConfig::desk();
    match name {
        "baseline" => KdConfig::disabled(),
        "gkd" => KdConfig { use_gkd: true, use_mask: false, use_mfi: false, ..desk },
        "mask" => KdConfig { use_gkd: false, use_mask: true, use_mfi: false, ..desk },
        "mfi" => KdConfig { use_gkd: false, use_mask: false, use_mfi: true, ..desk },
        "full" => desk,
        _ => unreachable!(),
    }
}

static DESK_EXPERIMENT: LazyLock<Experiment> = LazyLock::new(|| {
    let wall = Instant::now();
    let data = DatasetConfig::default();
    let (train, _) = generate_scenes(&data.scene, data.train_scenes, data.seed, TRAIN_SPLIT).unwrap();
    let (val, _) = generate_scenes(&data.scene, data.val_scenes, data.seed, VAL_SPLIT).unwrap();

    let teacher_tc = TrainConfig::desk();
    let teacher = train_detector(
        build_detector(&DetectorConfig::teacher_toy(), 0).unwrap(),
        &teacher_tc,
        &train,
        &val,
        &mut |_| {},
    )
    .unwrap();
    let teacher_map = teacher.history.last().unwrap().val_map50;
    let teacher = teacher.model;

    let mut finals = std::collections::BTreeMap::new();
    let mut similarity = Vec::new();
    for name in ["baseline", "gkd", "mask", "mfi", "full"] {
        let kd = variant(name);
        let mut per_seed = Vec::new();
        for seed in SEEDS {
            let tc = TrainConfig { epochs: STUDENT_EPOCHS, seed, ..TrainConfig::desk() };
            let student = build_detector(&DetectorConfig::student_toy(), seed).unwrap();
            let teacher_ref = if name == "baseline" { None } else { Some(&teacher) };
            let out = distill_train(student, teacher_ref, &kd, &tc, &train, &val, &mut |_| {})
                .unwrap_or_else(|e| panic!("{name} seed {seed} failed: {e}"));
            let history: &[EpochMetrics] = &out.history;
            per_seed.push(history.last().unwrap().val_map50);
            if kd.use_gkd {
                let first = history.first().unwrap().mask_similarity.expect("similarity on");
                let last = history.last().unwrap().mask_similarity.expect("similarity on");
                similarity.push((first, last));
            }
        }
        finals.insert(name, per_seed);
    }
    Experiment { teacher_map, finals, similarity, wall: wall.elapsed() }
});

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn criterion_07_distillation_beats_baseline() {
    let exp = &*DESK_EXPERIMENT;
    let baseline = mean(&exp.finals["baseline"]);
    let gkd = mean(&exp.finals["gkd"]);
    let full = mean(&exp.finals["full"]);
    println!(
        "  teacher {:.4} | baseline {baseline:.4} gkd {gkd:.4} full {full:.4} | wall {:.0}s",
        exp.teacher_map,
        exp.wall.as_secs_f64()
    );
    let ok = exp.teacher_map > baseline
        && gkd >= baseline + 0.010
        && full >= gkd - 0.005
        && exp.wall < Duration::from_secs(30 * 60);
    verdict(7, "teacher > baseline; saliency KD +1pt; full within half pt", ok);
}

#[test]
fn criterion_08_each_component_helps() {
    let exp = &*DESK_EXPERIMENT;
    let baseline = mean(&exp.finals["baseline"]);
    let full = mean(&exp.finals["full"]);
    let singles = ["gkd", "mask", "mfi"].map(|n| mean(&exp.finals[n]));
    println!(
        "  baseline {baseline:.4} | gkd {:.4} mask {:.4} mfi {:.4} | full {full:.4}",
        singles[0], singles[1], singles[2]
    );
    let ok = singles.iter().all(|&s| full >= s) && singles.iter().all(|&s| s > baseline);
    verdict(8, "full beats every single component; each beats baseline", ok);
}

#[test]
fn criterion_09_similarity_grows() {
    let exp = &*DESK_EXPERIMENT;
    for (first, last) in &exp.similarity {
        println!("  saliency similarity {first:.4} -> {last:.4}");
    }
    let ok = !exp.similarity.is_empty() && exp.similarity.iter().all(|(first, last)| last > first);
    verdict(9, "teacher-student map similarity rises over training", ok);
}

// ── 10: complexity ─────────────────────────────────────────────────────────

#[test]
fn criterion_10_complexity_exact() {
    // Hand-derived below with one multiply-accumulate as one FLOP; biases
    // count as parameters but not FLOPs.
    //
    // Teacher (widths 16/32/64, neck 8, 3 levels, 3 classes, 64x64):
    //   backbone 160+4640+18496, laterals 3*520, neck 3*584,
    //   heads 219+292; flops 589824+4718592+4718592
    //   + (512*64+512*16+512*4) + (576*64+576*16+576*4)
    //   + (216+288)*(64+16+4).
    let teacher = count_complexity(&DetectorConfig::teacher_toy());
    let ok_teacher = teacher.params == 59303 && teacher.flops == 11142528;

    // Student halves every backbone width.
    let student = count_complexity(&DetectorConfig::student_toy());
    let ok_student = student.params == 38823 && student.flops == 3683712;

    // Small reference: widths 4/8, neck 8, 2 levels, 2 classes, 32x32
    // (stride 4 lattice -> 8x8 and 4x4 cells).
    let mini = DetectorConfig {
        backbone_widths: vec![4, 8],
        neck_channels: 8,
        num_levels: 2,
        num_classes: 2,
        input_height: 32,
        input_width: 32,
    };
    let mini_counts = count_complexity(&mini);
    let ok_mini = mini_counts.params == 2086 && mini_counts.flops == 196352;

    println!(
        "  teacher {}p/{}f  student {}p/{}f  mini {}p/{}f",
        teacher.params, teacher.flops, student.params, student.flops, mini_counts.params, mini_counts.flops
    );
    verdict(10, "parameter and FLOP counts match hand derivations exactly", ok_teacher && ok_student && ok_mini);
}

// ── 11: round trips ────────────────────────────────────────────────────────

#[test]
fn criterion_11_round_trips() -> Result<()> {
    // Checkpoint: save/load returns bit-identical parameters.
    let dir = tempfile::tempdir().expect("tempdir");
    let model = build_detector(&DetectorConfig::teacher_toy(), 17)?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &model, 123, None)?;
    let loaded = load_checkpoint(&path)?;
    let ckpt_ok = loaded.step == 123
        && loaded
            .params
            .iter()
            .zip(model.named_params())
            .all(|((na, a), (nb, b))| {
                na == &nb && a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits())
            });

    // Dataset: regenerating with one seed writes byte-identical files.
    let cfg = DatasetConfig { train_scenes: 12, val_scenes: 6, ..DatasetConfig::default() };
    let (dir_a, dir_b) = (dir.path().join("a"), dir.path().join("b"));
    generate_dataset(&cfg, &dir_a, false)?;
    generate_dataset(&cfg, &dir_b, false)?;
    let mut data_ok = true;
    for split in ["train", "val"] {
        let mut names: Vec<String> = std::fs::read_dir(dir_a.join(split))
            .expect("split dir")
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        data_ok &= !names.is_empty();
        for name in names {
            let a = std::fs::read(dir_a.join(split).join(&name)).unwrap();
            let b = std::fs::read(dir_b.join(split).join(&name)).unwrap();
            data_ok &= a == b;
        }
    }

    // Scorer vs a per-threshold oracle on random micro-cases.
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let mut eval_ok = true;
    for _ in 0..100 {
        let num_classes = rng.gen_range(1..=3usize);
        let images = rng.gen_range(1..=3usize);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for _ in 0..images {
            let mut image_gts = Vec::new();
            for _ in 0..rng.gen_range(0..=4usize) {
                image_gts.push(GroundTruth {
                    bbox: random_box(&mut rng),
                    class_id: rng.gen_range(0..num_classes),
                });
            }
            let mut image_dets = Vec::new();
            for _ in 0..rng.gen_range(0..=6usize) {
                // Half the detections hug an existing box so matches occur.
                let bbox = if !image_gts.is_empty() && rng.gen_bool(0.5) {
                    let base = image_gts[rng.gen_range(0..image_gts.len())].bbox;
                    jitter_box(&mut rng, &base)
                } else {
                    random_box(&mut rng)
                };
                image_dets.push(Detection {
                    bbox,
                    class_id: rng.gen_range(0..num_classes),
                    score: rng.gen_range(0.0..1.0),
                });
            }
            gts.push(image_gts);
            dets.push(image_dets);
        }
        let fast = map50(&dets, &gts, num_classes)?;
        let slow = oracle_map50(&dets, &gts, num_classes);
        match (fast.map50, slow) {
            (a, Some(b)) => eval_ok &= (a - b).abs() <= 1e-12,
            (a, None) => eval_ok &= a == 0.0,
        }
    }

    verdict(11, "checkpoints, dataset bytes, and AP oracle all round-trip", ckpt_ok && data_ok && eval_ok);
    Ok(())
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.gen_range(0.0..24.0);
    let y0 = rng.gen_range(0.0..24.0);
    BBox::new(x0, y0, x0 + rng.gen_range(2.0..8.0), y0 + rng.gen_range(2.0..8.0)).unwrap()
}

fn jitter_box(rng: &mut ChaCha8Rng, base: &BBox) -> BBox {
    let dx = rng.gen_range(-1.0..1.0);
    let dy = rng.gen_range(-1.0..1.0);
    BBox::new(base.x_min + dx, base.y_min + dy, base.x_max + dx, base.y_max + dy).unwrap()
}

/// All-point-interpolated mAP recomputed the slow way: every score acts as
/// a threshold, matching reruns from scratch at each one, and the envelope
/// is evaluated per true positive. None when no class has ground truth.
fn oracle_map50(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], num_classes: usize) -> Option<f64> {
    let mut aps = Vec::new();
    for class in 0..num_classes {
        let gt_count: usize = gts.iter().map(|g| g.iter().filter(|x| x.class_id == class).count()).sum();
        if gt_count == 0 {
            continue;
        }
        let mut scored: Vec<(f64, usize, BBox)> = Vec::new();
        for (img, image_dets) in dets.iter().enumerate() {
            for d in image_dets.iter().filter(|d| d.class_id == class) {
                scored.push((d.score, img, d.bbox));
            }
        }
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

        // Precision/recall at each threshold, rematching from scratch.
        let mut points = Vec::new();
        for k in 1..=scored.len() {
            let (tp, fp) = match_prefix(&scored[..k], gts, class);
            points.push((tp as f64 / (tp + fp) as f64, tp as f64 / gt_count as f64));
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..points.len() {
            let (_, recall) = points[i];
            if recall > prev_recall {
                let best = points[i..].iter().map(|&(p, _)| p).fold(0.0, f64::max);
                ap += (recall - prev_recall) * best;
                prev_recall = recall;
            }
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

fn match_prefix(prefix: &[(f64, usize, BBox)], gts: &[Vec<GroundTruth>], class: usize) -> (usize, usize) {
    let mut used: Vec<Vec<bool>> = gts
        .iter()
        .map(|g| vec![false; g.iter().filter(|x| x.class_id == class).count()])
        .collect();
    let boxes: Vec<Vec<BBox>> = gts
        .iter()
        .map(|g| g.iter().filter(|x| x.class_id == class).map(|x| x.bbox).collect())
        .collect();
    let (mut tp, mut fp) = (0, 0);
    for (_, img, bbox) in prefix {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt_box) in boxes[*img].iter().enumerate() {
            if used[*img][gi] {
                continue;
            }
            let value = iou(bbox, gt_box);
            if best.map_or(true, |(_, b)| value > b) {
                best = Some((gi, value));
            }
        }
        match best {
            Some((gi, v)) if v >= 0.5 => {
                used[*img][gi] = true;
                tp += 1;
            }
            _ => fp += 1,
        }
    }
    (tp, fp)
}
