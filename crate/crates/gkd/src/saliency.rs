//! Gradient-guided saliency: where a trained detector's task loss says the
//! feature map matters.
//!
//! For a feature map `A` with per-channel slices `A_k`, the spatial mean of
//! `dL/dA_k` scores channel `k`'s influence on the task loss. The saliency
//! target map is the channel-weighted feature sum, rectified and min-max
//! normalized to [0, 1]:
//!
//! ```text
//! M = norm(relu(sum_k w_k * A_k))        w_k = mean_ij dL/dA_k[i, j]
//! ```
//!
//! Distillation asks the student's map to match the teacher's in mean
//! absolute difference. The teacher side is a constant; the student side
//! keeps its weights constant (they come from a separate capture pass) but
//! lets gradient flow through the features, so matching the teacher pushes
//! the student's features, not its gradient estimates.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Per-image, per-channel saliency weights: the spatial mean of a task-loss
/// gradient `[N, C, H, W]`, reduced to `[N, C]`. The input is plain data
/// (gradients are already constants), so this is tape-free.
pub fn channel_gradient_weights(feature_grad: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = *feature_grad.shape() else {
        return Err(Error::shape(
            "channel weights",
            format!("expected [N, C, H, W] gradient, got {:?}", feature_grad.shape()),
        ));
    };
    let hw = (h * w) as f64;
    let g = feature_grad.values();
    let mut out = vec![0.0; n * c];
    for (slot, chunk) in out.iter_mut().zip(g.chunks_exact(h * w)) {
        *slot = chunk.iter().sum::<f64>() / hw;
    }
    Tensor::new(&[n, c], out)
}

/// Builds the normalized saliency map `[N, 1, H, W]` from features
/// `[N, C, H, W]` and weights `[N, C]`.
///
/// The weighted channel sum runs as a 1x1 convolution whose kernel holds the
/// (constant) weights, so gradient flows through `features` only. A flat
/// rectified sum (max equals min) normalizes to all zeros.
pub fn target_map(tape: &Tape, features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let [n, c, _, _] = *features.shape() else {
        return Err(Error::shape(
            "target map",
            format!("expected [N, C, H, W] features, got {:?}", features.shape()),
        ));
    };
    if weights.shape() != [n, c] {
        return Err(Error::shape(
            "target map",
            format!("weights {:?} do not match features [{n}, {c}, ..]", weights.shape()),
        ));
    }
    let wv = weights.values();
    let mut per_image = Vec::with_capacity(n);
    for img in 0..n {
        let x = tape.narrow(features, 0, img, 1)?;
        let kernel = Tensor::new(&[1, c, 1, 1], wv[img * c..(img + 1) * c].to_vec())?;
        let summed = tape.conv2d(&x, &kernel, None, 1, 0)?;
        let rect = tape.relu(&summed)?;
        let lo = tape.reduce_min(&rect, &[])?;
        let hi = tape.reduce_max(&rect, &[])?;
        if hi.item() == lo.item() {
            per_image.push(Tensor::zeros(rect.shape()));
            continue;
        }
        let shifted = tape.sub(&rect, &lo)?;
        let range = tape.sub(&hi, &lo)?;
        per_image.push(tape.div(&shifted, &range)?);
    }
    let refs: Vec<&Tensor> = per_image.iter().collect();
    tape.concat(&refs, 0)
}

/// Mean absolute difference between teacher and student saliency maps,
/// summed over pyramid levels. The mean runs over batch and space, so the
/// result is already batch-averaged. Teacher maps are treated as constants.
pub fn gkd_loss(tape: &Tape, teacher_maps: &[Tensor], student_maps: &[Tensor]) -> Result<Tensor> {
    if teacher_maps.len() != student_maps.len() || teacher_maps.is_empty() {
        return Err(Error::shape(
            "saliency loss",
            format!("{} teacher levels vs {} student levels", teacher_maps.len(), student_maps.len()),
        ));
    }
    let mut total: Option<Tensor> = None;
    for (t, s) in teacher_maps.iter().zip(student_maps) {
        if t.shape() != s.shape() {
            return Err(Error::shape(
                "saliency loss",
                format!("teacher map {:?} vs student map {:?}", t.shape(), s.shape()),
            ));
        }
        let diff = tape.sub(&t.detach(), s)?;
        let level = tape.mean(&tape.abs(&diff)?, &[])?;
        total = Some(match total {
            None => level,
            Some(acc) => tape.add(&acc, &level)?,
        });
    }
    Ok(total.expect("non-empty levels"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weights_are_spatial_means_per_channel() {
        // Two channels on a 1x2 grid: means 1.5 and -2.0.
        let g = Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, -1.0, -3.0]).unwrap();
        let w = channel_gradient_weights(&g).unwrap();
        assert_eq!(w.shape(), &[1, 2]);
        assert_eq!(w.values(), &[1.5, -2.0]);
    }

    #[test]
    fn normalization_maps_known_values_to_unit_range() {
        // One channel, weight 1: map is norm(relu([-1, 0, 2, 4])) =
        // [0, 0, 0.5, 1].
        let tape = Tape::new();
        let feats = Tensor::new(&[1, 1, 2, 2], vec![-1.0, 0.0, 2.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let m = target_map(&tape, &feats, &w).unwrap();
        assert_eq!(m.shape(), &[1, 1, 2, 2]);
        assert_eq!(m.values(), &[0.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn negative_weights_suppress_channels() {
        // Channel 0 weighted +1, channel 1 weighted -1: sum is a0 - a1.
        let tape = Tape::new();
        let feats = Tensor::new(&[1, 2, 1, 2], vec![3.0, 1.0, 1.0, 1.0]).unwrap();
        let w = Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap();
        let m = target_map(&tape, &feats, &w).unwrap();
        // raw sum [2, 0] -> relu [2, 0] -> norm [1, 0]
        assert_eq!(m.values(), &[1.0, 0.0]);
    }

    #[test]
    fn flat_map_normalizes_to_zeros() {
        let tape = Tape::new();
        let feats = Tensor::new(&[1, 1, 2, 2], vec![-5.0, -5.0, -1.0, -2.0]).unwrap();
        let w = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        // Everything negative: relu flattens to all zeros, max == min.
        let m = target_map(&tape, &feats, &w).unwrap();
        assert_eq!(m.values(), &[0.0; 4]);
    }

    #[test]
    fn per_image_normalization_is_independent() {
        let tape = Tape::new();
        let feats =
            Tensor::new(&[2, 1, 1, 2], vec![0.0, 4.0, 0.0, 100.0]).unwrap();
        let w = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let m = target_map(&tape, &feats, &w).unwrap();
        // Both images normalize to [0, 1] regardless of raw magnitude.
        assert_eq!(m.values(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn loss_on_known_maps_is_half() {
        let tape = Tape::new();
        let t = Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let s = Tensor::new(&[1, 1, 1, 2], vec![0.0, 0.0]).unwrap();
        let loss = gkd_loss(&tape, &[t], &[s]).unwrap();
        assert_eq!(loss.item(), 0.5);
    }

    #[test]
    fn loss_gradient_reaches_student_features_not_teacher() {
        let tape = Tape::new();
        let t_feats = Tensor::param(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s_feats = Tensor::param(&[1, 1, 2, 2], vec![3.0, 1.0, 0.0, 2.0]).unwrap();
        let w = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let tm = target_map(&tape, &t_feats, &w).unwrap();
        let sm = target_map(&tape, &s_feats, &w).unwrap();
        let loss = gkd_loss(&tape, &[tm], &[sm]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&s_feats).unwrap().values().iter().any(|&v| v != 0.0));
        assert!(grads.get(&t_feats).is_none(), "teacher side is detached");
    }

    #[test]
    fn matching_maps_give_zero_loss() {
        let tape = Tape::new();
        let feats = Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let w = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        let a = target_map(&tape, &feats, &w).unwrap();
        let b = target_map(&tape, &feats, &w).unwrap();
        assert_eq!(gkd_loss(&tape, &[a], &[b]).unwrap().item(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        /// Positive rescaling of the features leaves the normalized map
        /// unchanged, and the map always stays in [0, 1].
        #[test]
        fn map_is_scale_invariant_and_bounded(
            vals in proptest::collection::vec(-3.0f64..3.0, 8),
            ws in proptest::collection::vec(-2.0f64..2.0, 2),
            scale in 0.01f64..100.0,
        ) {
            let tape = Tape::new();
            let feats = Tensor::new(&[1, 2, 2, 2], vals.clone()).unwrap();
            let scaled = Tensor::new(&[1, 2, 2, 2], vals.iter().map(|v| v * scale).collect()).unwrap();
            let w = Tensor::new(&[1, 2], ws).unwrap();
            let a = target_map(&tape, &feats, &w).unwrap();
            let b = target_map(&tape, &scaled, &w).unwrap();
            for (&x, &y) in a.values().iter().zip(b.values()) {
                prop_assert!((0.0..=1.0).contains(&x));
                prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }
}
