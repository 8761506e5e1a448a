//! Feature imitation with box-aware weighting and two-grained attention.
//!
//! Three ingredients, all per pyramid level:
//!
//! * **box mask** — on the level's cell lattice, cells inside an object's
//!   box get weight 1; cells in the twice-enlarged surround decay with a
//!   Gaussian of the normalized offsets; cells outside both get 0. Cells
//!   covered by several objects keep the largest weight, so imitation
//!   concentrates on objects and their immediate context;
//! * **spatial attention** — `HW * softmax(mean_k |A_k| / T)` over cells,
//!   a map that sums to `HW` and grows sharper as the temperature `T`
//!   drops;
//! * **channel attention** — `C * softmax(mean_ij |A| / T)` over channels,
//!   summing to `C`.
//!
//! The loss asks the student to reproduce the teacher's features where the
//! teacher's own mask and attentions point, plus (optionally) to match the
//! teacher's attention maps directly:
//!
//! ```text
//! L = sum mask * MS_T * MC_T * (A_T - A_S)^2
//!   + alpha * (sum |MS_T - MS_S| + sum |MC_T - MC_S|)
//! ```
//!
//! averaged over the batch. Teacher quantities are constants.

use crate::detector::{DetectorConfig, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Per-object box weights on one level's cell lattice, `[N, 1, h, w]`,
/// combined across objects by per-cell max. Box sizes are clamped to at
/// least one cell so thin objects still register.
pub fn box_mask(config: &DetectorConfig, gts: &[Vec<GroundTruth>], level: usize) -> Result<Tensor> {
    if level >= config.num_levels {
        return Err(Error::invalid(
            "box mask",
            format!("level {level} out of range ({} levels)", config.num_levels),
        ));
    }
    let stride = config.strides()[level] as f64;
    let (h, w) = config.level_shapes()[level];
    let n = gts.len();
    let mut mask = vec![0.0; n * h * w];
    for (img, objects) in gts.iter().enumerate() {
        for gt in objects {
            let b = &gt.bbox;
            let (cx, cy) = b.center();
            let (cx, cy) = (cx / stride, cy / stride);
            let wo = (b.width() / stride).max(1.0);
            let ho = (b.height() / stride).max(1.0);
            for j in 0..h {
                let v = (j as f64 - cy).abs() / ho;
                if v > 1.0 {
                    continue;
                }
                for i in 0..w {
                    let u = (i as f64 - cx).abs() / wo;
                    if u > 1.0 {
                        continue;
                    }
                    let value = if u <= 0.5 && v <= 0.5 {
                        1.0
                    } else {
                        (-0.5 * (u + v) * (u + v)).exp()
                    };
                    let cell = &mut mask[(img * h + j) * w + i];
                    *cell = value.max(*cell);
                }
            }
        }
    }
    Tensor::new(&[n, 1, h, w], mask)
}

fn check_features(op: &'static str, features: &Tensor) -> Result<[usize; 4]> {
    let [n, c, h, w] = *features.shape() else {
        return Err(Error::shape(op, format!("expected [N, C, H, W] features, got {:?}", features.shape())));
    };
    Ok([n, c, h, w])
}

/// Spatial attention `[N, 1, H, W]`: a temperature-softened softmax over
/// cells of the channel-mean absolute feature, rescaled so each image's map
/// sums to `H * W`.
pub fn spatial_attention(tape: &Tape, features: &Tensor, temperature: f64) -> Result<Tensor> {
    let [n, _, h, w] = check_features("spatial attention", features)?;
    check_temperature(temperature)?;
    let a = tape.abs(features)?;
    let per_cell = tape.mean(&a, &[1])?; // [N, H, W]
    let logits = tape.scalar_mul(1.0 / temperature, &per_cell)?;
    let flat = tape.reshape(&logits, &[n, h * w])?;
    let soft = tape.softmax(&flat, 1)?;
    let scaled = tape.scalar_mul((h * w) as f64, &soft)?;
    tape.reshape(&scaled, &[n, 1, h, w])
}

/// Channel attention `[N, C]`: softmax over channels of the spatial-mean
/// absolute feature, rescaled to sum to `C` per image.
pub fn channel_attention(tape: &Tape, features: &Tensor, temperature: f64) -> Result<Tensor> {
    let [_, c, _, _] = check_features("channel attention", features)?;
    check_temperature(temperature)?;
    let a = tape.abs(features)?;
    let per_channel = tape.mean(&a, &[2, 3])?; // [N, C]
    let logits = tape.scalar_mul(1.0 / temperature, &per_channel)?;
    let soft = tape.softmax(&logits, 1)?;
    tape.scalar_mul(c as f64, &soft)
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("attention", format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// The two halves of the imitation loss for one level, batch-averaged:
/// masked weighted feature matching, and attention-map matching.
pub struct ImitationParts {
    pub feature_term: Tensor,
    pub attention_term: Option<Tensor>,
}

/// Computes both imitation terms for one pyramid level.
///
/// * `mask` — optional `[N, 1, h, w]` box mask; omitted means every cell
///   weighs 1.
/// * `use_attention` — when false, the teacher attentions in the feature
///   term become 1 and no attention-matching term is produced.
///
/// Teacher features enter as constants; gradient reaches the student only.
pub fn imitation_parts(
    tape: &Tape,
    teacher_features: &Tensor,
    student_features: &Tensor,
    mask: Option<&Tensor>,
    temperature: f64,
    use_attention: bool,
) -> Result<ImitationParts> {
    let [n, c, h, w] = check_features("imitation", teacher_features)?;
    if student_features.shape() != teacher_features.shape() {
        return Err(Error::shape(
            "imitation",
            format!("teacher {:?} vs student {:?}", teacher_features.shape(), student_features.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "imitation",
                format!("mask {:?} does not match features [{n}, 1, {h}, {w}]", m.shape()),
            ));
        }
    }
    let teacher = teacher_features.detach();

    // Teacher attentions are plain data (the detached input records no ops).
    let (ms_t, mc_t) = if use_attention {
        (spatial_attention(tape, &teacher, temperature)?, channel_attention(tape, &teacher, temperature)?)
    } else {
        (Tensor::full(&[n, 1, h, w], 1.0)?, Tensor::full(&[n, c], 1.0)?)
    };

    let ones;
    let mask_values = match mask {
        Some(m) => m.values(),
        None => {
            ones = vec![1.0; n * h * w];
            &ones[..]
        }
    };
    let ms_values = ms_t.values();
    let mc_values = mc_t.values();
    let mut weight = vec![0.0; n * c * h * w];
    for img in 0..n {
        for k in 0..c {
            let mc = mc_values[img * c + k];
            for j in 0..h {
                for i in 0..w {
                    let cell = (img * h + j) * w + i;
                    weight[((img * c + k) * h + j) * w + i] = mask_values[cell] * ms_values[cell] * mc;
                }
            }
        }
    }
    let weight = Tensor::new(teacher.shape(), weight)?;

    let diff = tape.sub(&teacher, student_features)?;
    let weighted = tape.mul(&weight, &tape.square(&diff)?)?;
    let feature_term = tape.scalar_mul(1.0 / n as f64, &tape.sum(&weighted, &[])?)?;

    let attention_term = if use_attention {
        let ms_s = spatial_attention(tape, student_features, temperature)?;
        let mc_s = channel_attention(tape, student_features, temperature)?;
        let ds = tape.sum(&tape.abs(&tape.sub(&ms_t, &ms_s)?)?, &[])?;
        let dc = tape.sum(&tape.abs(&tape.sub(&mc_t, &mc_s)?)?, &[])?;
        Some(tape.scalar_mul(1.0 / n as f64, &tape.add(&ds, &dc)?)?)
    } else {
        None
    };
    Ok(ImitationParts { feature_term, attention_term })
}

/// Full imitation loss for one level: feature term plus `alpha` times the
/// attention term (when attention is enabled).
pub fn bmfi_loss(
    tape: &Tape,
    teacher_features: &Tensor,
    student_features: &Tensor,
    mask: Option<&Tensor>,
    temperature: f64,
    alpha: f64,
    use_attention: bool,
) -> Result<Tensor> {
    let parts =
        imitation_parts(tape, teacher_features, student_features, mask, temperature, use_attention)?;
    match parts.attention_term {
        None => Ok(parts.feature_term),
        Some(att) => tape.add(&parts.feature_term, &tape.scalar_mul(alpha, &att)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;
    use proptest::prelude::*;

    fn wide_config() -> DetectorConfig {
        // Three pooling stages: level 0 is a 16x16 lattice at stride 8.
        DetectorConfig {
            backbone_widths: vec![2, 2, 2],
            neck_channels: 2,
            num_levels: 2,
            num_classes: 1,
            input_height: 128,
            input_width: 128,
        }
    }

    fn gt(b: BBox) -> GroundTruth {
        GroundTruth { bbox: b, class_id: 0 }
    }

    #[test]
    fn mask_worked_example() {
        // Box centered at pixel (64, 64), 64 px square: on the stride-8
        // lattice that is center (8, 8) with half-width 4. Cell (14, 8) sits
        // in the enlarged surround at u = 6/8, v = 0.
        let cfg = wide_config();
        let objects = vec![vec![gt(BBox::new(32.0, 32.0, 96.0, 96.0).unwrap())]];
        let m = box_mask(&cfg, &objects, 0).unwrap();
        assert_eq!(m.shape(), &[1, 1, 16, 16]);
        let at = |i: usize, j: usize| m.values()[j * 16 + i];
        assert_eq!(at(8, 8), 1.0, "center cell");
        assert_eq!(at(12, 8), 1.0, "closed inside boundary, u = 0.5");
        let ring = at(14, 8);
        assert_eq!(ring, (-0.28125f64).exp());
        assert!((ring - 0.7548).abs() < 1e-4);
        assert_eq!(at(8, 14), ring, "symmetric in u and v");
    }

    #[test]
    fn mask_is_zero_outside_the_enlarged_box() {
        let cfg = wide_config();
        // 8 px box at (12..20): lattice center 2, half-width 0.5 -> clamped
        // size 1, so the surround ends 1 cell from center.
        let objects = vec![vec![gt(BBox::new(12.0, 12.0, 20.0, 20.0).unwrap())]];
        let m = box_mask(&cfg, &objects, 0).unwrap();
        let at = |i: usize, j: usize| m.values()[j * 16 + i];
        assert_eq!(at(2, 2), 1.0);
        assert!(at(3, 2) > 0.0 && at(3, 2) < 1.0);
        assert_eq!(at(5, 5), 0.0);
        assert_eq!(at(15, 15), 0.0);
    }

    #[test]
    fn overlapping_objects_keep_the_larger_weight() {
        let cfg = wide_config();
        let a = gt(BBox::new(32.0, 32.0, 96.0, 96.0).unwrap());
        let b = gt(BBox::new(96.0, 32.0, 128.0, 96.0).unwrap());
        let both = box_mask(&cfg, &[vec![a, b]], 0).unwrap();
        let only_a = box_mask(&cfg, &[vec![a]], 0).unwrap();
        let only_b = box_mask(&cfg, &[vec![b]], 0).unwrap();
        for ((&m, &x), &y) in both.values().iter().zip(only_a.values()).zip(only_b.values()) {
            assert_eq!(m, x.max(y));
        }
    }

    #[test]
    fn empty_scene_mask_is_all_zeros() {
        let cfg = wide_config();
        let m = box_mask(&cfg, &[vec![], vec![]], 1).unwrap();
        assert_eq!(m.shape(), &[2, 1, 8, 8]);
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_features_give_all_ones_attention() {
        let tape = Tape::new();
        let f = Tensor::full(&[1, 3, 2, 2], 0.7).unwrap();
        let ms = spatial_attention(&tape, &f, 0.5).unwrap();
        let mc = channel_attention(&tape, &f, 0.5).unwrap();
        assert_eq!(ms.values(), &[1.0; 4]);
        assert_eq!(mc.values(), &[1.0; 3]);
    }

    #[test]
    fn attention_prefers_large_magnitudes_of_either_sign() {
        let tape = Tape::new();
        let f = Tensor::new(&[1, 1, 1, 4], vec![-3.0, 0.1, 0.1, 0.1]).unwrap();
        let ms = spatial_attention(&tape, &f, 0.5).unwrap();
        let v = ms.values();
        assert!(v[0] > v[1], "cell with |feature| 3 dominates");
        assert_eq!(v[1], v[2]);
    }

    #[test]
    fn matching_features_zero_feature_term_and_attention_term() {
        let tape = Tape::new();
        let f = Tensor::new(&[1, 2, 2, 2], (0..8).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        let same = Tensor::new(&[1, 2, 2, 2], f.values().to_vec()).unwrap();
        let loss = bmfi_loss(&tape, &f, &same, None, 0.5, 1.0, true).unwrap();
        assert!(loss.item().abs() < 1e-12);
    }

    #[test]
    fn feature_term_hand_example() {
        // Mask and attentions disabled: term is sum (t - s)^2 / N.
        // t - s = [1, -2], so 5.
        let tape = Tape::new();
        let t = Tensor::new(&[1, 1, 1, 2], vec![2.0, 1.0]).unwrap();
        let s = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let loss = bmfi_loss(&tape, &t, &s, None, 0.5, 1.0, false).unwrap();
        assert_eq!(loss.item(), 5.0);
    }

    #[test]
    fn mask_gates_the_feature_term() {
        let tape = Tape::new();
        let t = Tensor::new(&[1, 1, 1, 2], vec![2.0, 1.0]).unwrap();
        let s = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let m = Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        // Only the first cell counts: (2-1)^2 = 1.
        let loss = bmfi_loss(&tape, &t, &s, Some(&m), 0.5, 1.0, false).unwrap();
        assert_eq!(loss.item(), 1.0);
    }

    #[test]
    fn gradient_reaches_student_only() {
        let tape = Tape::new();
        let t = Tensor::param(&[1, 2, 2, 2], vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.5, -0.5, 0.25]).unwrap();
        let s = Tensor::param(&[1, 2, 2, 2], vec![0.0, 1.0, -2.0, 0.5, 0.0, 1.0, 0.5, -0.25]).unwrap();
        let loss = bmfi_loss(&tape, &t, &s, None, 0.5, 1.0, true).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&s).unwrap().values().iter().any(|&v| v != 0.0));
        assert!(grads.get(&t).is_none());
    }

    #[test]
    fn batch_averaging_halves_a_duplicated_image() {
        let tape = Tape::new();
        let t1 = Tensor::new(&[1, 1, 1, 2], vec![2.0, 1.0]).unwrap();
        let s1 = Tensor::new(&[1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let t2 = Tensor::new(&[2, 1, 1, 2], vec![2.0, 1.0, 2.0, 1.0]).unwrap();
        let s2 = Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 1.0, 3.0]).unwrap();
        let a = bmfi_loss(&tape, &t1, &s1, None, 0.5, 1.0, true).unwrap();
        let b = bmfi_loss(&tape, &t2, &s2, None, 0.5, 1.0, true).unwrap();
        assert!((a.item() - b.item()).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Attention maps are positive and sum to HW (spatial) and C
        /// (channel) per image.
        #[test]
        fn attention_sums_are_fixed(
            vals in proptest::collection::vec(-4.0f64..4.0, 24),
            temp in 0.1f64..5.0,
        ) {
            let tape = Tape::new();
            let f = Tensor::new(&[2, 3, 2, 2], vals).unwrap();
            let ms = spatial_attention(&tape, &f, temp).unwrap();
            let mc = channel_attention(&tape, &f, temp).unwrap();
            for img in 0..2 {
                let s: f64 = ms.values()[img * 4..(img + 1) * 4].iter().sum();
                prop_assert!((s - 4.0).abs() < 1e-9);
                let c: f64 = mc.values()[img * 3..(img + 1) * 3].iter().sum();
                prop_assert!((c - 3.0).abs() < 1e-9);
            }
            prop_assert!(ms.values().iter().all(|&v| v > 0.0));
            prop_assert!(mc.values().iter().all(|&v| v > 0.0));
        }

        /// As the temperature grows the softmax flattens toward uniform,
        /// i.e. attention toward all-ones.
        #[test]
        fn high_temperature_flattens_attention(
            vals in proptest::collection::vec(-2.0f64..2.0, 8),
        ) {
            let tape = Tape::new();
            let f = Tensor::new(&[1, 2, 2, 2], vals).unwrap();
            let ms = spatial_attention(&tape, &f, 1e6).unwrap();
            for &v in ms.values() {
                prop_assert!((v - 1.0).abs() < 1e-4);
            }
        }

        /// Mask values stay in [0, 1] and every cell strictly inside a box
        /// is exactly 1.
        #[test]
        fn mask_range_and_interior(
            x0 in 0.0f64..60.0,
            y0 in 0.0f64..60.0,
            side in 12.0f64..40.0,
        ) {
            let cfg = wide_config();
            let b = BBox::new(x0, y0, (x0 + side).min(128.0), (y0 + side).min(128.0)).unwrap();
            let m = box_mask(&cfg, &[vec![gt(b)]], 0).unwrap();
            prop_assert!(m.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Center cell of the box is always inside.
            let (cx, cy) = b.center();
            let i = (cx / 8.0).round() as usize;
            let j = (cy / 8.0).round() as usize;
            if i < 16 && j < 16 {
                let v = m.values()[j * 16 + i];
                prop_assert!(v == 1.0 || (cx / 8.0 - i as f64).abs() > 0.45 || (cy / 8.0 - j as f64).abs() > 0.45);
            }
        }
    }
}
