//! Detection quality metrics: IoU, mAP at IoU 0.5, and a similarity score
//! for comparing saliency maps.

use crate::data::{ground_truth_of, images_tensor, Scene};
use crate::detector::{decode, BBox, Detection, DetectorModel, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Decode threshold used by evaluation unless overridden.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.05;
/// Suppression threshold used by evaluation unless overridden.
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Intersection over union of two boxes; disjoint boxes score 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Average precision and the precision/recall trace for one class.
/// `ap` is `None` when the class has no ground truth anywhere — such
/// classes are left out of the mean rather than scored.
#[derive(Clone, Debug)]
pub struct ClassAp {
    pub class_id: usize,
    pub gt_count: usize,
    pub ap: Option<f64>,
    /// Precision after each detection, in descending-score order.
    pub precision: Vec<f64>,
    /// Recall after each detection, same order.
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MapResult {
    /// Mean AP over classes that have ground truth; 0 if none do.
    pub map50: f64,
    pub per_class: Vec<ClassAp>,
}

/// Mean average precision at IoU 0.5.
///
/// Detections are ranked by score per class (ties keep image/decode order).
/// Each detection greedily claims the unmatched same-image ground truth with
/// the highest IoU, counting as a true positive when that IoU is at least
/// 0.5. AP integrates the precision envelope over recall (all-point
/// interpolation).
pub fn map50(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GroundTruth>],
    num_classes: usize,
) -> Result<MapResult> {
    if detections.len() != ground_truth.len() {
        return Err(Error::invalid(
            "map50",
            format!("{} detection lists vs {} ground-truth lists", detections.len(), ground_truth.len()),
        ));
    }
    for per_image in ground_truth {
        for gt in per_image {
            if gt.class_id >= num_classes {
                return Err(Error::invalid(
                    "map50",
                    format!("ground-truth class {} out of range {num_classes}", gt.class_id),
                ));
            }
        }
    }

    let mut per_class = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let gt_count: usize =
            ground_truth.iter().map(|g| g.iter().filter(|gt| gt.class_id == class_id).count()).sum();

        let mut ranked: Vec<(usize, f64, BBox)> = Vec::new();
        for (img, dets) in detections.iter().enumerate() {
            for d in dets.iter().filter(|d| d.class_id == class_id) {
                if !d.score.is_finite() {
                    return Err(Error::invalid("map50", format!("non-finite score in image {img}")));
                }
                ranked.push((img, d.score, d.bbox));
            }
        }
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));

        let mut matched: Vec<Vec<bool>> = ground_truth
            .iter()
            .map(|g| vec![false; g.iter().filter(|gt| gt.class_id == class_id).count()])
            .collect();
        let class_boxes: Vec<Vec<BBox>> = ground_truth
            .iter()
            .map(|g| g.iter().filter(|gt| gt.class_id == class_id).map(|gt| gt.bbox).collect())
            .collect();

        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut precision = Vec::with_capacity(ranked.len());
        let mut recall = Vec::with_capacity(ranked.len());
        for (img, _, bbox) in &ranked {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt_box) in class_boxes[*img].iter().enumerate() {
                if matched[*img][gi] {
                    continue;
                }
                let v = iou(bbox, gt_box);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= 0.5 => {
                    matched[*img][gi] = true;
                    tp += 1;
                }
                _ => fp += 1,
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 });
        }

        let ap = if gt_count == 0 { None } else { Some(envelope_area(&precision, &recall)) };
        per_class.push(ClassAp { class_id, gt_count, ap, precision, recall });
    }

    let scored: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map50 = if scored.is_empty() { 0.0 } else { scored.iter().sum::<f64>() / scored.len() as f64 };
    Ok(MapResult { map50, per_class })
}

/// Area under the running-max-from-the-right precision curve, integrated
/// over recall.
fn envelope_area(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (p, &r) in envelope.iter().zip(recall) {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area
}

/// Runs a detector over a scene list in batches and scores the decoded
/// detections against the annotations. The model is detached first, so
/// nothing is recorded.
pub fn evaluate_detector(
    model: &DetectorModel,
    scenes: &[Scene],
    batch_size: usize,
    score_threshold: f64,
    nms_iou: f64,
) -> Result<MapResult> {
    if batch_size == 0 {
        return Err(Error::invalid("evaluate", "batch_size must be positive".to_string()));
    }
    let detached = model.detached();
    let indices: Vec<usize> = (0..scenes.len()).collect();
    let mut detections = Vec::with_capacity(scenes.len());
    for chunk in indices.chunks(batch_size) {
        let tape = Tape::new();
        let images = images_tensor(scenes, chunk)?;
        let (_, pred) = detached.forward(&tape, &images)?;
        detections.extend(decode(&detached.config, &pred, score_threshold, nms_iou)?);
    }
    let gts = ground_truth_of(scenes, &indices);
    map50(&detections, &gts, model.config.num_classes)
}

/// `1 - mean absolute difference` between two equal-shape maps; identical
/// maps score 1, and maps valued in [0, 1] can't score below 0.
pub fn mask_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mask similarity",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.numel() == 0 {
        return Err(Error::invalid("mask similarity", "empty maps".to_string()));
    }
    let mad: f64 = a.values().iter().zip(b.values().iter()).map(|(&x, &y)| (x - y).abs()).sum::<f64>()
        / a.numel() as f64;
    Ok(1.0 - mad)
}
