//! Training loops: plain detector training and teacher-to-student
//! distillation share one implementation, so disabling every distillation
//! signal reproduces the baseline bit for bit — same arithmetic, same
//! shuffling, same number of random draws.
//!
//! The teacher is frozen, so everything it contributes — pyramid features,
//! saliency maps — is computed once per scene up front and reused every
//! epoch. Each optimization step then runs:
//!
//! 1. a capture pass (only when saliency matching is on): student forward
//!    plus task-loss backward to harvest the student's channel weights as
//!    constants;
//! 2. the optimization pass: student forward, task loss plus weighted
//!    distillation loss, backward, SGD update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{ground_truth_of, images_tensor, Scene};
use crate::detector::{detection_loss, DetectorModel};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_detector, mask_similarity, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD,
};
use crate::imitation::box_mask;
use crate::saliency::{channel_gradient_weights, target_map};
use crate::tensor::{Tape, Tensor};

use super::{sgd_step, KdBatch, KdConfig, SgdState, TrainConfig};

/// Frozen teacher context: per-scene pyramid features and saliency maps.
pub struct TeacherKd {
    /// `[scene][level]` features, `[1, C, h, w]` each.
    pub features: Vec<Vec<Tensor>>,
    /// `[scene][level]` saliency maps, `[1, 1, h, w]` each.
    pub maps: Vec<Vec<Tensor>>,
}

/// Runs the teacher over every scene, harvesting detached features and —
/// via a task-loss backward per scene — its saliency maps.
pub fn prepare_teacher_kd(teacher: &DetectorModel, scenes: &[Scene]) -> Result<TeacherKd> {
    let mut features = Vec::with_capacity(scenes.len());
    let mut maps = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let tape = Tape::new();
        let images = images_tensor(scenes, &[i])?;
        let (levels, pred) = teacher.forward(&tape, &images)?;
        let task = detection_loss(&tape, &teacher.config, &pred, &[scene.objects.clone()])?;
        let grads = tape.backward(&task)?;
        let mut scene_features = Vec::with_capacity(levels.len());
        let mut scene_maps = Vec::with_capacity(levels.len());
        for level in &levels {
            let grad = grads
                .get(level)
                .ok_or_else(|| Error::invalid("teacher", "task loss ignores a pyramid level".to_string()))?;
            let weights = channel_gradient_weights(grad)?;
            let detached = level.detach();
            scene_maps.push(target_map(&tape, &detached, &weights)?);
            scene_features.push(detached);
        }
        features.push(scene_features);
        maps.push(scene_maps);
    }
    Ok(TeacherKd { features, maps })
}

impl TeacherKd {
    /// Stacks the cached per-scene tensors for a batch.
    fn batch(
        &self,
        indices: &[usize],
        kd: &KdConfig,
        student: &DetectorModel,
        gts: &[Vec<crate::detector::GroundTruth>],
    ) -> Result<KdBatch> {
        let num_levels = student.config.num_levels;
        let mut teacher_features = Vec::with_capacity(num_levels);
        let mut teacher_maps = Vec::with_capacity(num_levels);
        let mut masks = Vec::with_capacity(num_levels);
        for level in 0..num_levels {
            teacher_features.push(stack(indices.iter().map(|&i| &self.features[i][level]))?);
            teacher_maps.push(stack(indices.iter().map(|&i| &self.maps[i][level]))?);
            masks.push(if kd.use_mask {
                Some(box_mask(&student.config, gts, level)?)
            } else {
                None
            });
        }
        Ok(KdBatch { teacher_features, teacher_maps, masks })
    }
}

/// Concatenates `[1, ...]` tensors along the batch axis, as plain data.
fn stack<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut shape: Option<Vec<usize>> = None;
    let mut values = Vec::new();
    let mut count = 0usize;
    for t in tensors {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) => {
                if t.shape() != &s[..] {
                    return Err(Error::shape(
                        "stack",
                        format!("{:?} vs {:?}", t.shape(), s),
                    ));
                }
            }
        }
        values.extend_from_slice(t.values());
        count += 1;
    }
    let mut shape = shape.ok_or_else(|| Error::invalid("stack", "no tensors".to_string()))?;
    shape[0] = count;
    Tensor::new(&shape, values)
}

/// Per-epoch training and validation summary.
#[derive(Clone, Debug)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean task loss over the epoch's batches.
    pub task_loss: f64,
    /// Mean distillation loss (zero when distillation is off).
    pub kd_loss: f64,
    pub val_map50: f64,
    /// Student-vs-teacher saliency-map agreement on held-out scenes;
    /// absent without a teacher or with `similarity_scenes` 0.
    pub mask_similarity: Option<f64>,
}

/// A finished run: the trained model, its optimizer state, and the
/// per-epoch history.
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub sgd: SgdState,
    pub history: Vec<EpochMetrics>,
    pub steps: usize,
}

/// Plain supervised training — distillation with every signal disabled.
pub fn train_detector(
    model: DetectorModel,
    train_config: &TrainConfig,
    train: &[Scene],
    val: &[Scene],
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    distill_train(model, None, &KdConfig::disabled(), train_config, train, val, on_epoch)
}

/// Trains `student`, optionally distilling from a frozen `teacher`.
///
/// With no active distillation signal the teacher (if any) is only used for
/// the similarity metric, and the parameter trajectory is identical to
/// [`train_detector`]. Returns `Diverged` if the loss leaves the finite
/// range.
pub fn distill_train(
    mut student: DetectorModel,
    teacher: Option<&DetectorModel>,
    kd: &KdConfig,
    train_config: &TrainConfig,
    train: &[Scene],
    val: &[Scene],
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    train_config.validate()?;
    kd.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train", "no training scenes".to_string()));
    }
    let kd_active = kd.is_active();
    if kd_active && teacher.is_none() {
        return Err(Error::invalid("train", "distillation signals are on but no teacher was given".to_string()));
    }
    if let Some(t) = teacher {
        let (tc, sc) = (&t.config, &student.config);
        if tc.level_shapes() != sc.level_shapes()
            || tc.neck_channels != sc.neck_channels
            || tc.num_classes != sc.num_classes
        {
            return Err(Error::shape(
                "train",
                format!(
                    "teacher pyramid ({:?} x{}ch, {} classes) does not line up with student ({:?} x{}ch, {} classes)",
                    tc.level_shapes(),
                    tc.neck_channels,
                    tc.num_classes,
                    sc.level_shapes(),
                    sc.neck_channels,
                    sc.num_classes
                ),
            ));
        }
    }

    let teacher_kd = match teacher {
        Some(t) if kd_active => Some(prepare_teacher_kd(t, train)?),
        _ => None,
    };
    let similarity_count = train_config.similarity_scenes.min(val.len());
    let teacher_val_maps = match teacher {
        Some(t) if similarity_count > 0 => {
            Some(prepare_teacher_kd(t, &val[..similarity_count])?.maps)
        }
        _ => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut sgd = SgdState::new(&student);
    let mut history = Vec::with_capacity(train_config.epochs);
    let mut step = 0usize;

    for epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut task_sum = 0.0;
        let mut kd_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_config.batch_size) {
            let result = train_step(
                &mut student,
                &mut sgd,
                teacher_kd.as_ref(),
                kd,
                train_config,
                train,
                chunk,
                step,
            );
            match result {
                Ok((task, kd_value)) => {
                    task_sum += task;
                    kd_sum += kd_value;
                }
                Err(Error::NonFinite { .. }) => return Err(Error::Diverged { step }),
                Err(e) => return Err(e),
            }
            step += 1;
            batches += 1;
        }

        let val_map50 = if val.is_empty() {
            0.0
        } else {
            evaluate_detector(
                &student,
                val,
                train_config.batch_size,
                DEFAULT_SCORE_THRESHOLD,
                DEFAULT_NMS_IOU,
            )?
            .map50
        };
        let similarity = match &teacher_val_maps {
            Some(maps) => Some(saliency_agreement(&student, maps, &val[..similarity_count])?),
            None => None,
        };
        let metrics = EpochMetrics {
            epoch,
            task_loss: task_sum / batches as f64,
            kd_loss: kd_sum / batches as f64,
            val_map50,
            mask_similarity: similarity,
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(TrainOutcome { model: student, sgd, history, steps: step })
}

/// One optimization step. Returns `(task loss, distillation loss)` values.
#[allow(clippy::too_many_arguments)]
fn train_step(
    student: &mut DetectorModel,
    sgd: &mut SgdState,
    teacher_kd: Option<&TeacherKd>,
    kd: &KdConfig,
    train_config: &TrainConfig,
    train: &[Scene],
    chunk: &[usize],
    step: usize,
) -> Result<(f64, f64)> {
    let images = images_tensor(train, chunk)?;
    let gts = ground_truth_of(train, chunk);

    // Capture pass: the student's own task-gradient channel weights,
    // detached from the optimization graph.
    let student_weights = match teacher_kd {
        Some(_) if kd.use_gkd => {
            let tape = Tape::new();
            let (levels, pred) = student.forward(&tape, &images)?;
            let task = detection_loss(&tape, &student.config, &pred, &gts)?;
            let grads = tape.backward(&task)?;
            let mut weights = Vec::with_capacity(levels.len());
            for level in &levels {
                let grad = grads.get(level).ok_or_else(|| {
                    Error::invalid("train", "task loss ignores a student pyramid level".to_string())
                })?;
                weights.push(channel_gradient_weights(grad)?);
            }
            Some(weights)
        }
        _ => None,
    };

    let tape = Tape::new();
    let (levels, pred) = student.forward(&tape, &images)?;
    let task = detection_loss(&tape, &student.config, &pred, &gts)?;
    let task_value = task.item();
    let (loss, kd_value) = match teacher_kd {
        Some(ctx) => {
            let batch = ctx.batch(chunk, kd, student, &gts)?;
            let parts = super::total_kd_loss(&tape, kd, &batch, &levels, student_weights.as_deref())?;
            let kd_value = parts.total.item();
            (tape.add(&task, &tape.scalar_mul(kd.kd_weight, &parts.total)?)?, kd_value)
        }
        None => (task, 0.0),
    };
    if !loss.item().is_finite() {
        return Err(Error::Diverged { step });
    }
    let grads = tape.backward(&loss)?;
    sgd_step(
        student,
        sgd,
        &grads,
        train_config.lr_at(step),
        train_config.momentum,
        train_config.weight_decay,
    )?;
    Ok((task_value, kd_value))
}

/// Mean per-level saliency-map agreement between the student and cached
/// teacher maps over the given scenes.
fn saliency_agreement(
    student: &DetectorModel,
    teacher_maps: &[Vec<Tensor>],
    scenes: &[Scene],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, scene) in scenes.iter().enumerate() {
        let tape = Tape::new();
        let images = images_tensor(scenes, &[i])?;
        let (levels, pred) = student.forward(&tape, &images)?;
        let task = detection_loss(&tape, &student.config, &pred, &[scene.objects.clone()])?;
        let grads = tape.backward(&task)?;
        for (level, feature) in levels.iter().enumerate() {
            let grad = grads.get(feature).ok_or_else(|| {
                Error::invalid("similarity", "task loss ignores a pyramid level".to_string())
            })?;
            let weights = channel_gradient_weights(grad)?;
            let map = target_map(&tape, &feature.detach(), &weights)?;
            sum += mask_similarity(&teacher_maps[i][level], &map)?;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_scenes, SceneConfig};
    use crate::detector::{build_detector, DetectorConfig};

    fn tiny_world() -> (DetectorConfig, Vec<Scene>, Vec<Scene>) {
        let cfg = DetectorConfig {
            backbone_widths: vec![4, 6],
            neck_channels: 6,
            num_levels: 2,
            num_classes: 3,
            input_height: 32,
            input_width: 32,
        };
        let scene_cfg = SceneConfig {
            image_size: 32,
            min_objects: 1,
            max_objects: 2,
            min_size: 8.0,
            max_size: 16.0,
            noise_sigma: 0.0,
            max_overlap: 0.3,
        };
        let (train, _) = generate_scenes(&scene_cfg, 8, 5, 0).unwrap();
        let (val, _) = generate_scenes(&scene_cfg, 4, 5, 1).unwrap();
        (cfg, train, val)
    }

    fn quick_tc(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_steps: 4,
            seed: 0,
            similarity_scenes: 2,
        }
    }

    fn param_bits(model: &DetectorModel) -> Vec<u64> {
        model
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn training_reduces_task_loss_and_is_deterministic() {
        let (cfg, train, val) = tiny_world();
        let run = |_: ()| {
            let model = build_detector(&cfg, 1).unwrap();
            train_detector(model, &quick_tc(3), &train, &val, &mut |_| {}).unwrap()
        };
        let a = run(());
        let b = run(());
        assert_eq!(param_bits(&a.model), param_bits(&b.model), "same seed, same trajectory");
        assert!(
            a.history.last().unwrap().task_loss < a.history[0].task_loss,
            "loss fell: {:?}",
            a.history.iter().map(|m| m.task_loss).collect::<Vec<_>>()
        );
        assert_eq!(a.steps, 6, "8 scenes / batch 4 = 2 steps x 3 epochs");
    }

    #[test]
    fn disabled_distillation_matches_baseline_bitwise() {
        let (cfg, train, val) = tiny_world();
        let teacher = {
            let model = build_detector(&cfg, 7).unwrap();
            train_detector(model, &quick_tc(1), &train, &val, &mut |_| {}).unwrap().model
        };
        let baseline = {
            let model = build_detector(&cfg, 2).unwrap();
            train_detector(model, &quick_tc(2), &train, &val, &mut |_| {}).unwrap()
        };
        let with_idle_teacher = {
            let model = build_detector(&cfg, 2).unwrap();
            distill_train(model, Some(&teacher), &KdConfig::disabled(), &quick_tc(2), &train, &val, &mut |_| {})
                .unwrap()
        };
        assert_eq!(param_bits(&baseline.model), param_bits(&with_idle_teacher.model));
        assert!(with_idle_teacher.history[0].mask_similarity.is_some(), "metric still reported");
        assert!(baseline.history[0].mask_similarity.is_none(), "no teacher, no metric");
    }

    #[test]
    fn distillation_runs_and_reports_kd_loss() {
        let (cfg, train, val) = tiny_world();
        let teacher = {
            let model = build_detector(&cfg, 7).unwrap();
            train_detector(model, &quick_tc(2), &train, &val, &mut |_| {}).unwrap().model
        };
        let student = build_detector(&cfg, 2).unwrap();
        let out = distill_train(
            student,
            Some(&teacher),
            &KdConfig::desk(),
            &quick_tc(2),
            &train,
            &val,
            &mut |_| {},
        )
        .unwrap();
        assert!(out.history.iter().all(|m| m.kd_loss > 0.0));
        assert!(out.history.iter().all(|m| m.mask_similarity.is_some()));
        assert!(out.history.iter().all(|m| m.task_loss.is_finite()));
    }

    #[test]
    fn kd_flags_without_teacher_are_rejected() {
        let (cfg, train, val) = tiny_world();
        let student = build_detector(&cfg, 2).unwrap();
        match distill_train(student, None, &KdConfig::default(), &quick_tc(1), &train, &val, &mut |_| {}) {
            Err(Error::InvalidArgument { .. }) => {}
            other => panic!("expected invalid-argument error, got {:?}", other.err()),
        }
    }

    #[test]
    fn incompatible_teacher_is_rejected() {
        let (cfg, train, val) = tiny_world();
        let other = DetectorConfig { neck_channels: 4, ..cfg.clone() };
        let teacher = build_detector(&other, 7).unwrap();
        let student = build_detector(&cfg, 2).unwrap();
        match distill_train(
            student,
            Some(&teacher),
            &KdConfig::default(),
            &quick_tc(1),
            &train,
            &val,
            &mut |_| {},
        ) {
            Err(Error::ShapeMismatch { .. }) => {}
            other => panic!("expected shape mismatch, got {:?}", other.err()),
        }
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let (cfg, train, val) = tiny_world();
        let model = build_detector(&cfg, 1).unwrap();
        let tc = TrainConfig { lr: 1e12, warmup_steps: 0, epochs: 4, ..quick_tc(4) };
        match train_detector(model, &tc, &train, &val, &mut |_| {}) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.history.len())),
        }
    }
}
