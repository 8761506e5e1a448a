//! Training targets and the detection objective.
//!
//! Each object trains the pyramid level matched to its size. Inside that
//! level, every cell whose center falls in the box (half-open, so a shared
//! edge belongs to one box only) is a positive; when boxes overlap, the
//! smaller box wins the cell. An object whose box covers no cell center
//! still gets the single cell containing its center, so nothing silently
//! drops out of training.
//!
//! The objective is a focal classification term plus a smooth-L1 box term,
//! both expressed with differentiable tensor ops so the whole thing can be
//! checked against finite differences. Per-image normalization (by positive
//! count) is folded into constant weight maps.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

use super::{DetectorConfig, GroundTruth, Prediction};

/// Weight on positive-cell classification terms; negatives get `1 - FOCAL_ALPHA`.
pub const FOCAL_ALPHA: f64 = 0.25;

/// Constant training targets for one pyramid level.
#[derive(Clone, Debug)]
pub struct LevelTargets {
    /// `[N, num_classes, h, w]`, one where the cell is positive for that class.
    pub cls: Tensor,
    /// `[N, 4, h, w]` side distances in stride units; zero at negative cells.
    pub boxes: Tensor,
    /// `[N, h, w]` flattened positive-cell indicator.
    pub pos: Vec<f64>,
}

/// Targets for every level plus the per-image positive count.
#[derive(Clone, Debug)]
pub struct Targets {
    pub levels: Vec<LevelTargets>,
    pub num_pos: Vec<usize>,
}

/// Maps ground truth onto the pyramid grid.
pub fn assign_targets(config: &DetectorConfig, gts: &[Vec<GroundTruth>]) -> Result<Targets> {
    let n = gts.len();
    let shapes = config.level_shapes();
    let strides = config.strides();

    // cell -> (area of owning object, its index in the image's list), per level
    let mut owner: Vec<Vec<Option<(f64, usize)>>> =
        shapes.iter().map(|&(h, w)| vec![None; n * h * w]).collect();

    for (img, objects) in gts.iter().enumerate() {
        for (gi, gt) in objects.iter().enumerate() {
            if gt.class_id >= config.num_classes {
                return Err(Error::invalid(
                    "targets",
                    format!("class id {} out of range (num_classes {})", gt.class_id, config.num_classes),
                ));
            }
            let level = config.level_for_box(&gt.bbox);
            let s = strides[level] as f64;
            let (h, w) = shapes[level];
            let b = &gt.bbox;
            let area = b.area();
            let mut covered = false;
            for j in 0..h {
                let cy = (j as f64 + 0.5) * s;
                if cy < b.y_min || cy >= b.y_max {
                    continue;
                }
                for i in 0..w {
                    let cx = (i as f64 + 0.5) * s;
                    if cx < b.x_min || cx >= b.x_max {
                        continue;
                    }
                    covered = true;
                    let cell = &mut owner[level][(img * h + j) * w + i];
                    if cell.map_or(true, |(a, _)| area < a) {
                        *cell = Some((area, gi));
                    }
                }
            }
            if !covered {
                let (cx, cy) = b.center();
                let i = ((cx / s) as usize).min(w - 1);
                let j = ((cy / s) as usize).min(h - 1);
                let cell = &mut owner[level][(img * h + j) * w + i];
                if cell.map_or(true, |(a, _)| area < a) {
                    *cell = Some((area, gi));
                }
            }
        }
    }

    let mut num_pos = vec![0usize; n];
    let mut levels = Vec::with_capacity(config.num_levels);
    for (level, &(h, w)) in shapes.iter().enumerate() {
        let s = strides[level] as f64;
        let mut cls = vec![0.0; n * config.num_classes * h * w];
        let mut boxes = vec![0.0; n * 4 * h * w];
        let mut pos = vec![0.0; n * h * w];
        for img in 0..n {
            for j in 0..h {
                for i in 0..w {
                    let Some((_, gi)) = owner[level][(img * h + j) * w + i] else { continue };
                    let gt = &gts[img][gi];
                    num_pos[img] += 1;
                    pos[(img * h + j) * w + i] = 1.0;
                    cls[((img * config.num_classes + gt.class_id) * h + j) * w + i] = 1.0;
                    let cx = (i as f64 + 0.5) * s;
                    let cy = (j as f64 + 0.5) * s;
                    let b = &gt.bbox;
                    let offsets = [cx - b.x_min, cy - b.y_min, b.x_max - cx, b.y_max - cy];
                    for (c, off) in offsets.iter().enumerate() {
                        boxes[((img * 4 + c) * h + j) * w + i] = off / s;
                    }
                }
            }
        }
        levels.push(LevelTargets {
            cls: Tensor::new(&[n, config.num_classes, h, w], cls)?,
            boxes: Tensor::new(&[n, 4, h, w], boxes)?,
            pos,
        });
    }
    Ok(Targets { levels, num_pos })
}

/// Focal classification loss plus smooth-L1 box regression, averaged over
/// the batch with each image normalized by its positive count.
pub fn detection_loss(
    tape: &Tape,
    config: &DetectorConfig,
    pred: &Prediction,
    gts: &[Vec<GroundTruth>],
) -> Result<Tensor> {
    let n = gts.len();
    if n == 0 {
        return Err(Error::invalid("detection loss", "empty batch".to_string()));
    }
    if pred.cls.len() != config.num_levels || pred.boxes.len() != config.num_levels {
        return Err(Error::shape(
            "detection loss",
            format!("expected {} prediction levels, got {}/{}", config.num_levels, pred.cls.len(), pred.boxes.len()),
        ));
    }
    let targets = assign_targets(config, gts)?;
    let norm: Vec<f64> = targets.num_pos.iter().map(|&p| (p.max(1) * n) as f64).collect();

    let one = Tensor::scalar(1.0)?;
    let mut total: Option<Tensor> = None;
    for (level, t) in targets.levels.iter().enumerate() {
        let logits = &pred.cls[level];
        if logits.shape() != t.cls.shape() {
            return Err(Error::shape(
                "detection loss",
                format!("level {level} class maps {:?} vs targets {:?}", logits.shape(), t.cls.shape()),
            ));
        }
        if pred.boxes[level].shape() != t.boxes.shape() {
            return Err(Error::shape(
                "detection loss",
                format!("level {level} box maps {:?} vs targets {:?}", pred.boxes[level].shape(), t.boxes.shape()),
            ));
        }
        let [_, k, h, w] = *logits.shape() else { unreachable!("targets are rank 4") };

        let mut w_pos = vec![0.0; n * k * h * w];
        let mut w_neg = vec![0.0; n * k * h * w];
        let cls_t = t.cls.values();
        for img in 0..n {
            for rest in 0..k * h * w {
                let idx = img * k * h * w + rest;
                if cls_t[idx] == 1.0 {
                    w_pos[idx] = FOCAL_ALPHA / norm[img];
                } else {
                    w_neg[idx] = (1.0 - FOCAL_ALPHA) / norm[img];
                }
            }
        }
        let w_pos = Tensor::new(logits.shape(), w_pos)?;
        let w_neg = Tensor::new(logits.shape(), w_neg)?;

        let p = tape.sigmoid(logits)?;
        let miss = tape.sub(&one, &p)?;
        // -log p and -log(1-p), written in their overflow-safe forms.
        let nlog_p = tape.softplus(&tape.scalar_mul(-1.0, logits)?)?;
        let nlog_q = tape.softplus(logits)?;
        let pos_term = tape.mul(&tape.square(&miss)?, &nlog_p)?;
        let neg_term = tape.mul(&tape.square(&p)?, &nlog_q)?;
        let focal = tape.add(&tape.mul(&w_pos, &pos_term)?, &tape.mul(&w_neg, &neg_term)?)?;
        let cls_loss = tape.sum(&focal, &[])?;

        let mut w_box = vec![0.0; n * 4 * h * w];
        for img in 0..n {
            for j in 0..h {
                for i in 0..w {
                    if t.pos[(img * h + j) * w + i] == 1.0 {
                        for c in 0..4 {
                            w_box[((img * 4 + c) * h + j) * w + i] = 1.0 / norm[img];
                        }
                    }
                }
            }
        }
        let w_box = Tensor::new(&[n, 4, h, w], w_box)?;
        let diff = tape.sub(&pred.boxes[level], &t.boxes)?;
        let reg = tape.sum(&tape.mul(&w_box, &tape.smooth_l1(&diff)?)?, &[])?;

        let level_loss = tape.add(&cls_loss, &reg)?;
        total = Some(match total {
            None => level_loss,
            Some(acc) => tape.add(&acc, &level_loss)?,
        });
    }
    Ok(total.expect("at least two levels"))
}
