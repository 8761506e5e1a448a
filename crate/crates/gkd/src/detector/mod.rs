//! A small anchor-free convolutional detector with a feature pyramid.
//!
//! Architecture, bottom to top:
//!
//! * backbone — `num_stages` blocks of (3x3 conv, ReLU, 2x2 max-pool), so the
//!   deepest backbone feature sits at stride `2^num_stages`;
//! * pyramid — the deepest feature is max-pooled further to provide one
//!   source per level, laterally projected with 1x1 convs to a common width,
//!   merged top-down by upsample-and-add, and smoothed with a 3x3 conv per
//!   level. These smoothed maps are the per-level features that distillation
//!   operates on;
//! * heads — one 3x3 classification conv (per-class logit maps) and one 3x3
//!   box conv (distances to the four box sides, in units of the level
//!   stride), both shared across levels.
//!
//! The lateral projections depend on the backbone width and stay with the
//! backbone; the smoothing convs and the heads have identical shapes for any
//! two configs that agree on neck width, level count, and class count, which
//! is what lets a student inherit them from a teacher.

mod complexity;
mod decode;
mod loss;

pub use complexity::{conv_cost, count_complexity, layer_stack, linear_cost, Complexity, LayerUse};
pub use decode::decode;
pub use loss::detection_loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Bias applied to the classification head so that training starts with a
/// low foreground probability (sigmoid(-4) is about 0.018).
pub const CLS_BIAS_INIT: f64 = -4.0;

/// An axis-aligned box in continuous image coordinates, `max` sides
/// exclusive: a box covering pixel columns 3..=10 has `x_min 3, x_max 11`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<BBox> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("bbox", format!("non-finite coordinates {b:?}")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid("bbox", format!("empty or inverted box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }
}

/// An annotated object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class_id: usize,
}

/// A decoded detection.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

/// Static description of a detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Channel width after each backbone stage; the length sets the stage
    /// count and therefore the stride of the first pyramid level.
    pub backbone_widths: Vec<usize>,
    /// Common channel width of every pyramid level.
    pub neck_channels: usize,
    /// Number of pyramid levels.
    pub num_levels: usize,
    pub num_classes: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl DetectorConfig {
    /// The wide teacher used throughout the desk-scale experiments.
    pub fn teacher_toy() -> DetectorConfig {
        DetectorConfig {
            backbone_widths: vec![16, 32, 64],
            neck_channels: 32,
            num_levels: 3,
            num_classes: 3,
            input_height: 64,
            input_width: 64,
        }
    }

    /// The narrow student: a quarter of the teacher's backbone parameters.
    pub fn student_toy() -> DetectorConfig {
        DetectorConfig { backbone_widths: vec![8, 16, 32], ..DetectorConfig::teacher_toy() }
    }

    pub fn num_stages(&self) -> usize {
        self.backbone_widths.len()
    }

    /// Stride of the first pyramid level.
    pub fn base_stride(&self) -> usize {
        1 << self.num_stages()
    }

    /// Stride per pyramid level, doubling with each level.
    pub fn strides(&self) -> Vec<usize> {
        (0..self.num_levels).map(|l| self.base_stride() << l).collect()
    }

    /// Spatial size `(h, w)` of each pyramid level for this input size.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        self.strides().iter().map(|&s| (self.input_height / s, self.input_width / s)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone_widths.is_empty() {
            return Err(Error::invalid("detector config", "at least one backbone stage is required".to_string()));
        }
        if self.backbone_widths.iter().any(|&w| w == 0) || self.neck_channels == 0 {
            return Err(Error::invalid("detector config", "channel widths must be positive".to_string()));
        }
        if self.num_levels < 2 {
            return Err(Error::invalid("detector config", "at least two pyramid levels are required".to_string()));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("detector config", "at least one class is required".to_string()));
        }
        let deepest = self.base_stride() << (self.num_levels - 1);
        for (what, size) in [("height", self.input_height), ("width", self.input_width)] {
            if size == 0 || size % deepest != 0 {
                return Err(Error::invalid(
                    "detector config",
                    format!("input {what} {size} must be a positive multiple of {deepest} (deepest level stride)"),
                ));
            }
        }
        Ok(())
    }

    /// Which pyramid level an object of this box size trains on:
    /// `clamp(round(log2(sqrt(area) / base_stride)), 0, L-1)`.
    pub fn level_for_box(&self, bbox: &BBox) -> usize {
        let ratio = bbox.area().sqrt() / self.base_stride() as f64;
        let level = ratio.log2().round();
        (level.max(0.0) as usize).min(self.num_levels - 1)
    }
}

/// One conv layer's parameters.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    fn init(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize, bias_value: f64) -> Result<ConvLayer> {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
            .map_err(|e| Error::invalid("detector init", e.to_string()))?;
        let weight: Vec<f64> = (0..c_out * c_in * k * k).map(|_| normal.sample(rng)).collect();
        Ok(ConvLayer {
            weight: Tensor::param(&[c_out, c_in, k, k], weight)?,
            bias: Tensor::param(&[c_out], vec![bias_value; c_out])?,
        })
    }
}

/// A detector's parameters, all marked as differentiation leaves.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub config: DetectorConfig,
    pub backbone: Vec<ConvLayer>,
    pub laterals: Vec<ConvLayer>,
    pub neck_out: Vec<ConvLayer>,
    pub cls_head: ConvLayer,
    pub box_head: ConvLayer,
}

/// Per-level head outputs for a batch: class logit maps
/// `[N, num_classes, h, w]` and box offset maps `[N, 4, h, w]` (left, top,
/// right, bottom distances in stride units).
#[derive(Clone, Debug)]
pub struct Prediction {
    pub cls: Vec<Tensor>,
    pub boxes: Vec<Tensor>,
}

/// Builds a detector with fan-in-scaled normal weights, zero biases, and the
/// low-confidence classification bias. Identical seeds give identical
/// parameters.
pub fn build_detector(config: &DetectorConfig, seed: u64) -> Result<DetectorModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = Vec::new();
    let mut c_prev = 1;
    for &width in &config.backbone_widths {
        backbone.push(ConvLayer::init(&mut rng, width, c_prev, 3, 0.0)?);
        c_prev = width;
    }
    let deep = *config.backbone_widths.last().expect("validated non-empty");
    let laterals = (0..config.num_levels)
        .map(|_| ConvLayer::init(&mut rng, config.neck_channels, deep, 1, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let neck_out = (0..config.num_levels)
        .map(|_| ConvLayer::init(&mut rng, config.neck_channels, config.neck_channels, 3, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let cls_head = ConvLayer::init(&mut rng, config.num_classes, config.neck_channels, 3, CLS_BIAS_INIT)?;
    let box_head = ConvLayer::init(&mut rng, 4, config.neck_channels, 3, 0.0)?;
    Ok(DetectorModel { config: config.clone(), backbone, laterals, neck_out, cls_head, box_head })
}

impl DetectorModel {
    /// Runs the detector on a batch `[N, 1, H, W]`, returning the per-level
    /// pyramid features and the head outputs.
    pub fn forward(&self, tape: &Tape, images: &Tensor) -> Result<(Vec<Tensor>, Prediction)> {
        self.forward_with_offsets(tape, images, None)
    }

    /// Like [`forward`](Self::forward), but adds a constant offset tensor to
    /// each pyramid feature before the heads. Probing the task loss under
    /// such offsets is how feature-gradient computations are cross-checked.
    pub fn forward_with_offsets(
        &self,
        tape: &Tape,
        images: &Tensor,
        offsets: Option<&[Tensor]>,
    ) -> Result<(Vec<Tensor>, Prediction)> {
        let cfg = &self.config;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.input_height || shape[3] != cfg.input_width {
            return Err(Error::shape(
                "forward",
                format!("expected images [N, 1, {}, {}], got {shape:?}", cfg.input_height, cfg.input_width),
            ));
        }
        if let Some(offs) = offsets {
            if offs.len() != cfg.num_levels {
                return Err(Error::shape(
                    "forward",
                    format!("expected {} feature offsets, got {}", cfg.num_levels, offs.len()),
                ));
            }
        }

        let mut x = images.clone();
        for stage in &self.backbone {
            x = tape.conv2d(&x, &stage.weight, Some(&stage.bias), 1, 1)?;
            x = tape.relu(&x)?;
            x = tape.max_pool2d(&x, 2, 2)?;
        }
        let mut sources = vec![x];
        for _ in 1..cfg.num_levels {
            let pooled = tape.max_pool2d(sources.last().expect("non-empty"), 2, 2)?;
            sources.push(pooled);
        }
        let projected = sources
            .iter()
            .zip(&self.laterals)
            .map(|(src, lat)| tape.conv2d(src, &lat.weight, Some(&lat.bias), 1, 0))
            .collect::<Result<Vec<_>>>()?;
        let mut merged: Vec<Tensor> = Vec::with_capacity(cfg.num_levels);
        for (l, proj) in projected.iter().enumerate().rev() {
            let m = match merged.first() {
                None => proj.clone(),
                Some(above) => {
                    let up = tape.upsample2x(above)?;
                    tape.add(proj, &up)?
                }
            };
            merged.insert(0, m);
            let _ = l;
        }
        let mut levels = Vec::with_capacity(cfg.num_levels);
        for (l, m) in merged.iter().enumerate() {
            let smooth = &self.neck_out[l];
            let mut p = tape.conv2d(m, &smooth.weight, Some(&smooth.bias), 1, 1)?;
            if let Some(offs) = offsets {
                p = tape.add(&p, &offs[l])?;
            }
            levels.push(p);
        }
        let mut cls = Vec::with_capacity(cfg.num_levels);
        let mut boxes = Vec::with_capacity(cfg.num_levels);
        for p in &levels {
            cls.push(tape.conv2d(p, &self.cls_head.weight, Some(&self.cls_head.bias), 1, 1)?);
            boxes.push(tape.conv2d(p, &self.box_head.weight, Some(&self.box_head.bias), 1, 1)?);
        }
        Ok((levels, Prediction { cls, boxes }))
    }

    /// Canonical (name, tensor) listing; optimizer state and checkpoints
    /// follow this order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.weight"), &layer.weight));
            out.push((format!("backbone.{i}.bias"), &layer.bias));
        }
        for (i, layer) in self.laterals.iter().enumerate() {
            out.push((format!("lateral.{i}.weight"), &layer.weight));
            out.push((format!("lateral.{i}.bias"), &layer.bias));
        }
        for (i, layer) in self.neck_out.iter().enumerate() {
            out.push((format!("neck_out.{i}.weight"), &layer.weight));
            out.push((format!("neck_out.{i}.bias"), &layer.bias));
        }
        out.push(("head.cls.weight".to_string(), &self.cls_head.weight));
        out.push(("head.cls.bias".to_string(), &self.cls_head.bias));
        out.push(("head.box.weight".to_string(), &self.box_head.weight));
        out.push(("head.box.bias".to_string(), &self.box_head.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter_mut().enumerate() {
            out.push((format!("backbone.{i}.weight"), &mut layer.weight));
            out.push((format!("backbone.{i}.bias"), &mut layer.bias));
        }
        for (i, layer) in self.laterals.iter_mut().enumerate() {
            out.push((format!("lateral.{i}.weight"), &mut layer.weight));
            out.push((format!("lateral.{i}.bias"), &mut layer.bias));
        }
        for (i, layer) in self.neck_out.iter_mut().enumerate() {
            out.push((format!("neck_out.{i}.weight"), &mut layer.weight));
            out.push((format!("neck_out.{i}.bias"), &mut layer.bias));
        }
        out.push(("head.cls.weight".to_string(), &mut self.cls_head.weight));
        out.push(("head.cls.bias".to_string(), &mut self.cls_head.bias));
        out.push(("head.box.weight".to_string(), &mut self.box_head.weight));
        out.push(("head.box.bias".to_string(), &mut self.box_head.bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// A snapshot whose parameters are outside any gradient path — forwards
    /// through it record nothing, which is what evaluation wants.
    pub fn detached(&self) -> DetectorModel {
        let mut clone = self.clone();
        for (_, t) in clone.named_params_mut() {
            *t = t.detach();
        }
        clone
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_configs_validate() {
        DetectorConfig::teacher_toy().validate().unwrap();
        DetectorConfig::student_toy().validate().unwrap();
    }

    #[test]
    fn zero_stage_config_is_rejected() {
        let cfg = DetectorConfig { backbone_widths: vec![], ..DetectorConfig::teacher_toy() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let cfg = DetectorConfig { input_height: 60, ..DetectorConfig::teacher_toy() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toy_levels_are_8_4_2_at_strides_8_16_32() {
        let cfg = DetectorConfig::teacher_toy();
        assert_eq!(cfg.strides(), vec![8, 16, 32]);
        assert_eq!(cfg.level_shapes(), vec![(8, 8), (4, 4), (2, 2)]);
    }

    #[test]
    fn forward_emits_expected_level_shapes() {
        let cfg = DetectorConfig::teacher_toy();
        let model = build_detector(&cfg, 0).unwrap();
        let tape = Tape::new();
        let images = Tensor::zeros(&[2, 1, 64, 64]);
        let (levels, pred) = model.forward(&tape, &images).unwrap();
        let shapes: Vec<_> = levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 32, 8, 8], vec![2, 32, 4, 4], vec![2, 32, 2, 2]]);
        assert_eq!(pred.cls[0].shape(), &[2, 3, 8, 8]);
        assert_eq!(pred.boxes[2].shape(), &[2, 4, 2, 2]);
    }

    #[test]
    fn forward_rejects_wrong_image_shape() {
        let model = build_detector(&DetectorConfig::teacher_toy(), 0).unwrap();
        let tape = Tape::new();
        let images = Tensor::zeros(&[1, 1, 32, 32]);
        assert!(model.forward(&tape, &images).is_err());
    }

    #[test]
    fn same_seed_same_params_different_seed_different() {
        let cfg = DetectorConfig::student_toy();
        let a = build_detector(&cfg, 7).unwrap();
        let b = build_detector(&cfg, 7).unwrap();
        let c = build_detector(&cfg, 8).unwrap();
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(ta.values(), tb.values());
        }
        let wa = &a.backbone[0].weight;
        let wc = &c.backbone[0].weight;
        assert_ne!(wa.values(), wc.values());
    }

    #[test]
    fn cls_bias_starts_low_other_biases_zero() {
        let model = build_detector(&DetectorConfig::student_toy(), 1).unwrap();
        assert!(model.cls_head.bias.values().iter().all(|&b| b == CLS_BIAS_INIT));
        assert!(model.box_head.bias.values().iter().all(|&b| b == 0.0));
        assert!(model.backbone[0].bias.values().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn level_assignment_follows_box_size() {
        let cfg = DetectorConfig::teacher_toy();
        let small = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap(); // sqrt(64)/8 = 1 -> level 0
        let medium = BBox::new(0.0, 0.0, 16.0, 16.0).unwrap(); // -> level 1
        let large = BBox::new(0.0, 0.0, 40.0, 40.0).unwrap(); // log2(5) = 2.3 -> level 2
        assert_eq!(cfg.level_for_box(&small), 0);
        assert_eq!(cfg.level_for_box(&medium), 1);
        assert_eq!(cfg.level_for_box(&large), 2);
    }

    #[test]
    fn detached_model_records_nothing() {
        let model = build_detector(&DetectorConfig::student_toy(), 3).unwrap().detached();
        let tape = Tape::new();
        let images = Tensor::zeros(&[1, 1, 64, 64]);
        let (levels, _) = model.forward(&tape, &images).unwrap();
        let loss = tape.mean(&levels[0], &[]).unwrap();
        assert!(tape.backward(&loss).unwrap().is_empty());
    }
}
