//! Turning head outputs back into scored boxes.

use crate::error::{Error, Result};
use crate::eval::iou;
use crate::tensor::sigmoid;

use super::{BBox, Detection, DetectorConfig, Prediction};

/// Decodes every cell whose class probability clears `score_threshold`,
/// clips boxes to the image, and runs per-class greedy non-maximum
/// suppression: detections are visited in descending score order and one is
/// dropped when it overlaps an already-kept detection of the same class with
/// IoU strictly above `nms_iou`. Returns one detection list per image,
/// sorted by descending score.
pub fn decode(
    config: &DetectorConfig,
    pred: &Prediction,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<Vec<Vec<Detection>>> {
    if pred.cls.len() != config.num_levels || pred.boxes.len() != config.num_levels {
        return Err(Error::shape(
            "decode",
            format!("expected {} levels, got {}/{}", config.num_levels, pred.cls.len(), pred.boxes.len()),
        ));
    }
    let n = pred.cls.first().map_or(0, |t| t.shape()[0]);
    let strides = config.strides();
    let (img_w, img_h) = (config.input_width as f64, config.input_height as f64);

    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); n];
    for level in 0..config.num_levels {
        let cls = &pred.cls[level];
        let boxes = &pred.boxes[level];
        let [cn, k, h, w] = *cls.shape() else {
            return Err(Error::shape("decode", format!("class maps must be rank 4, got {:?}", cls.shape())));
        };
        if cn != n || k != config.num_classes || boxes.shape() != [n, 4, h, w] {
            return Err(Error::shape(
                "decode",
                format!("level {level} shapes {:?} / {:?} inconsistent", cls.shape(), boxes.shape()),
            ));
        }
        let s = strides[level] as f64;
        let cv = cls.values();
        let bv = boxes.values();
        for img in 0..n {
            for j in 0..h {
                for i in 0..w {
                    let cx = (i as f64 + 0.5) * s;
                    let cy = (j as f64 + 0.5) * s;
                    let off = |c: usize| bv[((img * 4 + c) * h + j) * w + i];
                    let x_min = (cx - off(0) * s).clamp(0.0, img_w);
                    let y_min = (cy - off(1) * s).clamp(0.0, img_h);
                    let x_max = (cx + off(2) * s).clamp(0.0, img_w);
                    let y_max = (cy + off(3) * s).clamp(0.0, img_h);
                    if x_min >= x_max || y_min >= y_max {
                        continue;
                    }
                    for class_id in 0..k {
                        let score = sigmoid(cv[((img * k + class_id) * h + j) * w + i]);
                        if score >= score_threshold {
                            per_image[img].push(Detection {
                                bbox: BBox { x_min, y_min, x_max, y_max },
                                class_id,
                                score,
                            });
                        }
                    }
                }
            }
        }
    }

    for dets in &mut per_image {
        // Stable sort keeps the level/cell scan order among equal scores,
        // so decoding is deterministic.
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
        let mut kept: Vec<Detection> = Vec::new();
        'cand: for d in dets.iter() {
            for k in &kept {
                if k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > nms_iou {
                    continue 'cand;
                }
            }
            kept.push(*d);
        }
        *dets = kept;
    }
    Ok(per_image)
}
