//! Finite-difference validation of every gradient path in the crate.
//!
//! Central differences with step 1e-5 act as the oracle; reverse-mode
//! gradients must agree to a relative error below 1e-4 (1e-3 for the
//! channel-weight cross-check, whose oracle divides by W·H and loses a
//! digit). All inputs are fixed and seeded, chosen to stay clear of the
//! kinks of relu / abs / min / max / pooling so the comparison is
//! meaningful; the kinks themselves are exercised by unit tests that pick
//! sides explicitly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{
    build_detector, detection_loss, BBox, DetectorConfig, DetectorModel, GroundTruth,
};
use crate::error::{Error, Result};
use crate::imitation::bmfi_loss;
use crate::saliency::{channel_gradient_weights, gkd_loss, target_map};
use crate::tensor::{finite_difference_gradient, max_relative_error, Tape, Tensor};

/// Central-difference step.
pub const FD_EPS: f64 = 1e-5;
/// Relative-error bound for op-level and composed-loss checks.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Looser bound for the channel-weight oracle (its extra W·H division
/// amplifies the difference quotient's truncation error).
pub const FD_WEIGHT_TOLERANCE: f64 = 1e-3;
/// Denominator clamp when forming relative errors near zero.
pub const FD_FLOOR: f64 = 1e-8;

/// Outcome of one named gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub name: &'static str,
    /// Worst relative disagreement across all checked input tensors.
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// True when every report in the suite is within tolerance.
pub fn all_passed(reports: &[FdReport]) -> bool {
    reports.iter().all(FdReport::passed)
}

/// Runs the whole suite: one check per op, then the composed losses.
/// Deterministic — same reports every call.
pub fn run_all() -> Result<Vec<FdReport>> {
    let mut reports = Vec::new();
    op_checks(&mut reports)?;
    task_loss_checks(&mut reports)?;
    saliency_checks(&mut reports)?;
    imitation_checks(&mut reports)?;
    Ok(reports)
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every tensor in `inputs`, recording the worst relative error.
fn check(
    reports: &mut Vec<FdReport>,
    name: &'static str,
    tolerance: f64,
    inputs: &[Tensor],
    f: &dyn Fn(&Tape, &[Tensor]) -> Result<Tensor>,
) -> Result<()> {
    let tape = Tape::new();
    let loss = f(&tape, inputs)?;
    let grads = tape.backward(&loss)?;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = match grads.get(x) {
            Some(g) => g.clone(),
            None => Tensor::zeros(x.shape()),
        };
        let fd = finite_difference_gradient(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                let tape = Tape::new();
                Ok(f(&tape, &xs)?.item())
            },
            x,
            FD_EPS,
        )?;
        worst = worst.max(max_relative_error(&analytic, &fd, FD_FLOOR));
    }
    reports.push(FdReport { name, max_rel_error: worst, tolerance });
    Ok(())
}

/// Uniform values in `[lo, hi)` — for ops smooth everywhere.
fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect())
}

/// Values with magnitude at least `margin` — keeps relu / abs probes off
/// their kink at zero.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64, span: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..span);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::param(shape, values)
}

/// A shuffled arithmetic ladder: all entries distinct with gap `step`, so
/// min / max / pooling have unique winners that a 1e-5 probe cannot flip.
fn ladder(rng: &mut ChaCha8Rng, shape: &[usize], base: f64, step: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| base + step * i as f64).collect();
    values.shuffle(rng);
    Tensor::param(shape, values)
}

/// Position-dependent constant weights; summing `out ⊙ w` makes every
/// output coordinate matter, so index-shuffling bugs cannot cancel out.
fn probe_weights(shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| 0.05 + 0.03 * i as f64).collect())
}

fn weighted_sum(tape: &Tape, out: &Tensor) -> Result<Tensor> {
    let w = probe_weights(out.shape())?;
    tape.sum(&tape.mul(out, &w)?, &[])
}

fn op_checks(reports: &mut Vec<FdReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    let x = uniform(&mut rng, &[1, 2, 5, 5], -1.0, 1.0)?;
    let k = uniform(&mut rng, &[3, 2, 3, 3], -0.6, 0.6)?;
    let b = uniform(&mut rng, &[3], -0.3, 0.3)?;
    check(reports, "conv2d", FD_TOLERANCE, &[x, k, b], &|tape, xs| {
        weighted_sum(tape, &tape.conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1)?)
    })?;

    let x = uniform(&mut rng, &[1, 3, 6, 6], -1.0, 1.0)?;
    let k = uniform(&mut rng, &[2, 3, 3, 3], -0.6, 0.6)?;
    check(reports, "conv2d_strided", FD_TOLERANCE, &[x, k], &|tape, xs| {
        weighted_sum(tape, &tape.conv2d(&xs[0], &xs[1], None, 2, 0)?)
    })?;

    let x = uniform(&mut rng, &[4, 3], -1.0, 1.0)?;
    let w = uniform(&mut rng, &[2, 3], -0.8, 0.8)?;
    let b = uniform(&mut rng, &[2], -0.3, 0.3)?;
    check(reports, "linear", FD_TOLERANCE, &[x, w, b], &|tape, xs| {
        weighted_sum(tape, &tape.linear(&xs[0], &xs[1], Some(&xs[2]))?)
    })?;

    let x = off_kink(&mut rng, &[2, 7], 0.1, 1.0)?;
    check(reports, "relu", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.relu(&xs[0])?)
    })?;

    let x = uniform(&mut rng, &[2, 7], -2.0, 2.0)?;
    check(reports, "sigmoid", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.sigmoid(&xs[0])?)
    })?;

    let x = uniform(&mut rng, &[2, 7], -2.0, 2.0)?;
    check(reports, "softplus", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.softplus(&xs[0])?)
    })?;

    let x = off_kink(&mut rng, &[2, 7], 0.1, 1.0)?;
    check(reports, "abs", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.abs(&xs[0])?)
    })?;

    let x = uniform(&mut rng, &[2, 7], -2.0, 2.0)?;
    check(reports, "square", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.square(&xs[0])?)
    })?;

    let x = uniform(&mut rng, &[2, 7], -2.5, 2.5)?;
    check(reports, "smooth_l1", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.smooth_l1(&xs[0])?)
    })?;

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    let b = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    check(reports, "add", FD_TOLERANCE, &[a, b], &|tape, xs| {
        weighted_sum(tape, &tape.add(&xs[0], &xs[1])?)
    })?;

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    let b = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    check(reports, "sub", FD_TOLERANCE, &[a, b], &|tape, xs| {
        weighted_sum(tape, &tape.sub(&xs[0], &xs[1])?)
    })?;

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    let b = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    check(reports, "mul", FD_TOLERANCE, &[a, b], &|tape, xs| {
        weighted_sum(tape, &tape.mul(&xs[0], &xs[1])?)
    })?;

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    let b = off_kink(&mut rng, &[2, 3], 0.5, 1.5)?;
    check(reports, "div", FD_TOLERANCE, &[a, b], &|tape, xs| {
        weighted_sum(tape, &tape.div(&xs[0], &xs[1])?)
    })?;

    let a = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    let s = off_kink(&mut rng, &[1], 0.5, 1.5)?;
    check(reports, "div_by_scalar", FD_TOLERANCE, &[a, s], &|tape, xs| {
        weighted_sum(tape, &tape.div(&xs[0], &xs[1])?)
    })?;

    let x = uniform(&mut rng, &[2, 3], -1.0, 1.0)?;
    check(reports, "scalar_mul", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.scalar_mul(-1.7, &xs[0])?)
    })?;

    let x = uniform(&mut rng, &[2, 5], -2.0, 2.0)?;
    check(reports, "softmax", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.softmax(&xs[0], 1)?)
    })?;

    let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)?;
    check(reports, "mean", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.mean(&xs[0], &[0, 2])?)
    })?;

    let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)?;
    check(reports, "sum", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.sum(&xs[0], &[1])?)
    })?;

    let x = ladder(&mut rng, &[2, 6], -0.4, 0.13)?;
    check(reports, "reduce_min", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.reduce_min(&xs[0], &[1])?)
    })?;

    let x = ladder(&mut rng, &[2, 6], -0.4, 0.13)?;
    check(reports, "reduce_max", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.reduce_max(&xs[0], &[1])?)
    })?;

    let x = ladder(&mut rng, &[1, 2, 4, 4], -1.0, 0.11)?;
    check(reports, "max_pool2d", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.max_pool2d(&xs[0], 2, 2)?)
    })?;

    let x = uniform(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)?;
    check(reports, "upsample2x", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.upsample2x(&xs[0])?)
    })?;

    let a = uniform(&mut rng, &[2, 2, 3], -1.0, 1.0)?;
    let b = uniform(&mut rng, &[2, 3, 3], -1.0, 1.0)?;
    check(reports, "concat", FD_TOLERANCE, &[a, b], &|tape, xs| {
        weighted_sum(tape, &tape.concat(&[&xs[0], &xs[1]], 1)?)
    })?;

    let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0)?;
    check(reports, "reshape", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.reshape(&xs[0], &[4, 6])?)
    })?;

    let x = uniform(&mut rng, &[2, 3, 5], -1.0, 1.0)?;
    check(reports, "narrow", FD_TOLERANCE, &[x], &|tape, xs| {
        weighted_sum(tape, &tape.narrow(&xs[0], 2, 1, 2)?)
    })?;

    Ok(())
}

/// The small detector every composed-loss check runs on: two pyramid
/// levels (4×4 and 2×2 cells), two classes, one box per level.
fn probe_detector() -> Result<(DetectorModel, Tensor, Vec<Vec<GroundTruth>>)> {
    let config = DetectorConfig {
        backbone_widths: vec![2, 3],
        neck_channels: 3,
        num_levels: 2,
        num_classes: 2,
        input_height: 16,
        input_width: 16,
    };
    let model = build_detector(&config, 23)?;
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let images = Tensor::new(&[1, 1, 16, 16], (0..256).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let gts = vec![vec![
        GroundTruth { bbox: BBox::new(1.0, 1.0, 5.0, 4.0)?, class_id: 0 },
        GroundTruth { bbox: BBox::new(6.0, 6.0, 14.0, 14.0)?, class_id: 1 },
    ]];
    Ok((model, images, gts))
}

fn task_loss_checks(reports: &mut Vec<FdReport>) -> Result<()> {
    let (model, images, gts) = probe_detector()?;

    // Every parameter of the detector, against the task loss.
    let params: Vec<Tensor> = model.named_params().iter().map(|(_, t)| (*t).clone()).collect();
    check(reports, "task_loss_parameters", FD_TOLERANCE, &params, &|tape, xs| {
        let mut m = model.detached();
        for ((_, slot), x) in m.named_params_mut().into_iter().zip(xs) {
            *slot = x.clone();
        }
        let (_, pred) = m.forward(tape, &images)?;
        detection_loss(tape, &m.config, &pred, &gts)
    })?;

    // The task loss against additive pyramid-feature offsets — this is the
    // gradient the saliency weights are built from.
    let offsets: Vec<Tensor> = model
        .config
        .level_shapes()
        .into_iter()
        .map(|(h, w)| Tensor::zeros(&[1, model.config.neck_channels, h, w]).requires_grad(true))
        .collect();
    check(reports, "task_loss_feature_offsets", FD_TOLERANCE, &offsets, &|tape, xs| {
        let (_, pred) = model.forward_with_offsets(tape, &images, Some(xs))?;
        detection_loss(tape, &model.config, &pred, &gts)
    })?;

    // Channel weights against a scalar oracle: nudging one whole channel of
    // one level uniformly and dividing the loss slope by W·H must reproduce
    // each weight.
    let task_at = |offsets: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let (_, pred) = model.forward_with_offsets(&tape, &images, Some(offsets))?;
        Ok(detection_loss(&tape, &model.config, &pred, &gts)?.item())
    };
    let analytic_weights: Vec<Tensor> = {
        let tape = Tape::new();
        let (levels, pred) = model.forward(&tape, &images)?;
        let task = detection_loss(&tape, &model.config, &pred, &gts)?;
        let grads = tape.backward(&task)?;
        levels
            .iter()
            .map(|level| {
                let g = grads.get(level).ok_or_else(|| {
                    Error::invalid("fdcheck", "task loss ignores a pyramid level".to_string())
                })?;
                channel_gradient_weights(g)
            })
            .collect::<Result<_>>()?
    };
    let shapes = model.config.level_shapes();
    let c = model.config.neck_channels;
    let mut worst = 0.0f64;
    for (level, &(h, w)) in shapes.iter().enumerate() {
        for k in 0..c {
            let mut slope = [0.0f64; 2];
            for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let mut offsets: Vec<Tensor> =
                    shapes.iter().map(|&(lh, lw)| Tensor::zeros(&[1, c, lh, lw])).collect();
                let mut values = vec![0.0; c * h * w];
                for v in values[k * h * w..(k + 1) * h * w].iter_mut() {
                    *v = sign * FD_EPS;
                }
                offsets[level] = Tensor::new(&[1, c, h, w], values)?;
                slope[side] = task_at(&offsets)?;
            }
            let oracle = (slope[0] - slope[1]) / (2.0 * FD_EPS) / (h * w) as f64;
            let weight = analytic_weights[level].values()[k];
            let rel = (weight - oracle).abs() / weight.abs().max(oracle.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    reports.push(FdReport {
        name: "channel_weights_uniform_shift",
        max_rel_error: worst,
        tolerance: FD_WEIGHT_TOLERANCE,
    });
    Ok(())
}

/// Two spatial ladders whose saliency maps disagree everywhere, keeping the
/// loss's absolute value away from its kink. Both channels of each tensor
/// share one ladder so the weighted channel sum stays a ladder (distinct
/// entries, unique min and max).
fn saliency_fixture() -> Result<(Tensor, Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ranks: Vec<usize> = (0..16).collect();
    ranks.shuffle(&mut rng);
    let student: Vec<f64> = ranks.iter().map(|&r| 0.3 + 0.1 * r as f64).collect();
    let teacher: Vec<f64> = ranks.iter().map(|&r| 0.3 + 0.1 * (15 - r) as f64).collect();
    let two_channel = |base: &[f64]| {
        let mut v = base.to_vec();
        v.extend_from_slice(base);
        Tensor::param(&[1, 2, 4, 4], v)
    };
    let weights = Tensor::new(&[1, 2], vec![0.6, 0.4])?;
    Ok((two_channel(&student)?, two_channel(&teacher)?, weights))
}

fn saliency_checks(reports: &mut Vec<FdReport>) -> Result<()> {
    let (student, teacher, weights) = saliency_fixture()?;
    let teacher_map = {
        let tape = Tape::new();
        target_map(&tape, &teacher.detach(), &weights)?
    };
    check(reports, "saliency_loss_student_features", FD_TOLERANCE, &[student], &|tape, xs| {
        let student_map = target_map(tape, &xs[0], &weights)?;
        gkd_loss(tape, std::slice::from_ref(&teacher_map), &[student_map])
    })?;
    Ok(())
}

fn imitation_checks(reports: &mut Vec<FdReport>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let teacher = ladder(&mut rng, &[1, 2, 4, 4], 0.4, 0.13)?.detach();
    let student = ladder(&mut rng, &[1, 2, 4, 4], 0.3, 0.1)?;
    let mask = {
        let n: usize = 16;
        Tensor::new(&[1, 1, 4, 4], (0..n).map(|i| 0.2 + 0.05 * i as f64).collect())?
    };

    check(reports, "imitation_feature_term", FD_TOLERANCE, &[student.clone()], &|tape, xs| {
        bmfi_loss(tape, &teacher, &xs[0], Some(&mask), 0.5, 0.0, false)
    })?;

    // With attention on, the loss takes |teacher − student| of both
    // attention maps; the fixture must keep those differences away from
    // zero or the comparison would sit on a kink.
    assert_attention_gap(&teacher, &student, 0.5, 1e-3)?;
    check(reports, "imitation_with_attention", FD_TOLERANCE, &[student], &|tape, xs| {
        bmfi_loss(tape, &teacher, &xs[0], Some(&mask), 0.5, 0.5, true)
    })?;
    Ok(())
}

/// Confirms every spatial / channel attention entry of the two fixtures
/// differs by at least `gap`, so the attention loss's absolute value is
/// probed only on smooth ground.
fn assert_attention_gap(teacher: &Tensor, student: &Tensor, temperature: f64, gap: f64) -> Result<()> {
    use crate::imitation::{channel_attention, spatial_attention};
    let tape = Tape::new();
    for (t, s) in [
        (spatial_attention(&tape, teacher, temperature)?, spatial_attention(&tape, student, temperature)?),
        (channel_attention(&tape, teacher, temperature)?, channel_attention(&tape, student, temperature)?),
    ] {
        let min_gap = t
            .values()
            .iter()
            .zip(s.values())
            .map(|(a, b)| (a - b).abs())
            .fold(f64::INFINITY, f64::min);
        if min_gap < gap {
            return Err(Error::invalid(
                "fdcheck",
                format!("attention fixture gap {min_gap:.2e} is below {gap:.0e}"),
            ));
        }
    }
    Ok(())
}
