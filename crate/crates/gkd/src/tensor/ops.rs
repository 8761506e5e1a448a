//! Forward and backward (vector-Jacobian) implementations for every op kind.
//!
//! `forward` owns all input validation; the tape records a node only after a
//! successful forward, so `vjp` may assume shapes already fit. Backward
//! accumulation order is fixed, which keeps gradients bit-reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An op kind together with its attributes.
#[derive(Clone, Debug)]
pub enum Op {
    /// 2-D convolution over `[N, C_in, H, W]` with kernel
    /// `[C_out, C_in, kh, kw]`, optional bias `[C_out]`, zero padding.
    Conv2d { stride: usize, padding: usize },
    /// `x [N, F] @ w [O, F]^T (+ b [O])`.
    Linear,
    Relu,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated in a form that never overflows.
    Softplus,
    Abs,
    Square,
    /// Elementwise smooth-L1 with threshold 1: `0.5 x²` inside, `|x| - 0.5` outside.
    SmoothL1,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul { factor: f64 },
    Softmax { axis: usize },
    Mean { axes: Vec<usize> },
    Sum { axes: Vec<usize> },
    ReduceMin { axes: Vec<usize> },
    ReduceMax { axes: Vec<usize> },
    /// Square-window max pooling, no padding.
    MaxPool2d { kernel: usize, stride: usize },
    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    Upsample2x,
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    /// Contiguous slice of `len` indices starting at `start` along `axis`.
    Narrow { axis: usize, start: usize, len: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Linear => "linear",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::SmoothL1 => "smooth_l1",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::ScalarMul { .. } => "scalar_mul",
            Op::Softmax { .. } => "softmax",
            Op::Mean { .. } => "mean",
            Op::Sum { .. } => "sum",
            Op::ReduceMin { .. } => "reduce_min",
            Op::ReduceMax { .. } => "reduce_max",
            Op::MaxPool2d { .. } => "max_pool2d",
            Op::Upsample2x => "upsample2x",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Narrow { .. } => "narrow",
        }
    }
}

pub(crate) type InMeta = (Vec<usize>, Arc<Vec<f64>>);

// ── shape helpers ──────────────────────────────────────────────────────────

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Sizes before, at, and after `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn expect_arity(op: &'static str, inputs: usize, lo: usize, hi: usize) -> Result<()> {
    if inputs < lo || inputs > hi {
        return Err(Error::invalid(op, format!("expected {lo}..={hi} inputs, got {inputs}")));
    }
    Ok(())
}

/// Validates reduction axes: in range, strictly increasing after sort, and
/// expands an empty list to "all axes". Returns the sorted list.
fn check_axes(op: &'static str, ndim: usize, axes: &[usize]) -> Result<Vec<usize>> {
    if ndim == 0 {
        return Err(Error::invalid(op, "cannot reduce a rank-0 tensor".to_string()));
    }
    let mut axes: Vec<usize> = if axes.is_empty() { (0..ndim).collect() } else { axes.to_vec() };
    axes.sort_unstable();
    for pair in axes.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::invalid(op, format!("duplicate axis {}", pair[0])));
        }
    }
    if let Some(&last) = axes.last() {
        if last >= ndim {
            return Err(Error::invalid(op, format!("axis {last} out of range for rank {ndim}")));
        }
    }
    Ok(axes)
}

fn reduced_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .filter(|(d, _)| !axes.contains(d))
        .map(|(_, &s)| s)
        .collect()
}

/// For each input element, the flat index of the output cell it reduces into.
/// `contrib[d]` is the output stride of axis `d`, or 0 for reduced axes.
fn reduction_contrib(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_shape = reduced_shape(shape, axes);
    let mut out_strides = vec![0usize; out_shape.len()];
    let mut acc = 1;
    for d in (0..out_shape.len()).rev() {
        out_strides[d] = acc;
        acc *= out_shape[d];
    }
    let mut contrib = vec![0usize; shape.len()];
    let mut kept = 0;
    for d in 0..shape.len() {
        if !axes.contains(&d) {
            contrib[d] = out_strides[kept];
            kept += 1;
        }
    }
    contrib
}

/// Calls `visit(in_flat, out_flat)` for every element of `shape`, where
/// `out_flat` is the reduction target given `contrib`.
fn for_each_reduced(shape: &[usize], contrib: &[usize], mut visit: impl FnMut(usize, usize)) {
    let nd = shape.len();
    let total = numel(shape);
    let mut midx = vec![0usize; nd];
    let mut out_flat = 0usize;
    for in_flat in 0..total {
        visit(in_flat, out_flat);
        // odometer increment, keeping out_flat in sync
        for d in (0..nd).rev() {
            midx[d] += 1;
            out_flat += contrib[d];
            if midx[d] < shape[d] {
                break;
            }
            out_flat -= midx[d] * contrib[d];
            midx[d] = 0;
        }
    }
}

// ── elementwise scaffolding ────────────────────────────────────────────────

fn unary_forward(x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    x.iter().map(|&v| f(v)).collect()
}

/// How a binary op broadcasts: equal shapes, or one side is a single value.
#[derive(Clone, Copy, PartialEq)]
enum Bcast {
    Elementwise,
    LeftScalar,
    RightScalar,
}

fn binary_plan(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>)> {
    if a == b {
        Ok((Bcast::Elementwise, a.to_vec()))
    } else if numel(a) == 1 {
        Ok((Bcast::LeftScalar, b.to_vec()))
    } else if numel(b) == 1 {
        Ok((Bcast::RightScalar, a.to_vec()))
    } else {
        Err(Error::shape(op, format!("operands {a:?} and {b:?} (only equal shapes or a scalar side broadcast)")))
    }
}

fn binary_forward(plan: Bcast, a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match plan {
        Bcast::Elementwise => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::LeftScalar => b.iter().map(|&y| f(a[0], y)).collect(),
        Bcast::RightScalar => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ── forward ────────────────────────────────────────────────────────────────

/// Computes output shape and values for `op`, validating all inputs.
pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let name = op.name();
    match op {
        Op::Conv2d { stride, padding } => {
            expect_arity(name, inputs.len(), 2, 3)?;
            conv2d_forward(inputs, *stride, *padding)
        }
        Op::Linear => {
            expect_arity(name, inputs.len(), 2, 3)?;
            linear_forward(inputs)
        }
        Op::Relu | Op::Sigmoid | Op::Softplus | Op::Abs | Op::Square | Op::SmoothL1 => {
            expect_arity(name, inputs.len(), 1, 1)?;
            let x = inputs[0];
            let vals = match op {
                Op::Relu => unary_forward(x.values(), |v| v.max(0.0)),
                Op::Sigmoid => unary_forward(x.values(), sigmoid),
                Op::Softplus => unary_forward(x.values(), softplus),
                Op::Abs => unary_forward(x.values(), f64::abs),
                Op::Square => unary_forward(x.values(), |v| v * v),
                Op::SmoothL1 => unary_forward(x.values(), |v| {
                    if v.abs() < 1.0 {
                        0.5 * v * v
                    } else {
                        v.abs() - 0.5
                    }
                }),
                _ => unreachable!(),
            };
            Ok((x.shape().to_vec(), vals))
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            expect_arity(name, inputs.len(), 2, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (plan, shape) = binary_plan(name, a.shape(), b.shape())?;
            let vals = match op {
                Op::Add => binary_forward(plan, a.values(), b.values(), |x, y| x + y),
                Op::Sub => binary_forward(plan, a.values(), b.values(), |x, y| x - y),
                Op::Mul => binary_forward(plan, a.values(), b.values(), |x, y| x * y),
                Op::Div => binary_forward(plan, a.values(), b.values(), |x, y| x / y),
                _ => unreachable!(),
            };
            Ok((shape, vals))
        }
        Op::ScalarMul { factor } => {
            expect_arity(name, inputs.len(), 1, 1)?;
            if !factor.is_finite() {
                return Err(Error::invalid(name, format!("factor {factor} is not finite")));
            }
            let x = inputs[0];
            Ok((x.shape().to_vec(), x.values().iter().map(|&v| v * factor).collect()))
        }
        Op::Softmax { axis } => {
            expect_arity(name, inputs.len(), 1, 1)?;
            softmax_forward(inputs[0], *axis)
        }
        Op::Mean { axes } | Op::Sum { axes } | Op::ReduceMin { axes } | Op::ReduceMax { axes } => {
            expect_arity(name, inputs.len(), 1, 1)?;
            reduce_forward(op, inputs[0], axes)
        }
        Op::MaxPool2d { kernel, stride } => {
            expect_arity(name, inputs.len(), 1, 1)?;
            max_pool_forward(inputs[0], *kernel, *stride)
        }
        Op::Upsample2x => {
            expect_arity(name, inputs.len(), 1, 1)?;
            upsample_forward(inputs[0])
        }
        Op::Concat { axis } => concat_forward(inputs, *axis),
        Op::Reshape { shape } => {
            expect_arity(name, inputs.len(), 1, 1)?;
            let x = inputs[0];
            if numel(shape) != x.numel() {
                return Err(Error::shape(
                    name,
                    format!("cannot view {:?} ({} values) as {shape:?} ({} values)", x.shape(), x.numel(), numel(shape)),
                ));
            }
            Ok((shape.clone(), x.values().to_vec()))
        }
        Op::Narrow { axis, start, len } => {
            expect_arity(name, inputs.len(), 1, 1)?;
            narrow_forward(inputs[0], *axis, *start, *len)
        }
    }
}

fn conv2d_forward(inputs: &[&Tensor], stride: usize, padding: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let (x, k) = (inputs[0], inputs[1]);
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be >= 1".to_string()));
    }
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::shape("conv2d", format!("input {xs:?} and kernel {ks:?} must both be rank 4")));
    }
    let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    if ci != kci {
        return Err(Error::shape("conv2d", format!("input has {ci} channels but kernel expects {kci}")));
    }
    if kh == 0 || kw == 0 || co == 0 {
        return Err(Error::shape("conv2d", format!("degenerate kernel {ks:?}")));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [co] {
            return Err(Error::shape("conv2d", format!("bias {:?} but kernel has {co} output channels", b.shape())));
        }
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f64; n * co * ho * wo];

    let xv = x.values();
    let kv = k.values();
    for nn in 0..n {
        for c_out in 0..co {
            let out_plane = &mut out[(nn * co + c_out) * ho * wo..][..ho * wo];
            if let Some(b) = inputs.get(2) {
                let bias = b.values()[c_out];
                out_plane.iter_mut().for_each(|v| *v = bias);
            }
            for c_in in 0..ci {
                let x_plane = &xv[(nn * ci + c_in) * h * w..][..h * w];
                let k_tap = &kv[(c_out * ci + c_in) * kh * kw..][..kh * kw];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k_tap[ky * kw + kx];
                        accumulate_tap(out_plane, x_plane, wgt, h, w, ho, wo, stride, padding, ky, kx);
                    }
                }
            }
        }
    }
    Ok((vec![n, co, ho, wo], out))
}

/// `out[oy, ox] += wgt * x[oy*s + ky - p, ox*s + kx - p]` over the valid range.
#[inline]
fn accumulate_tap(
    out_plane: &mut [f64],
    x_plane: &[f64],
    wgt: f64,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
) {
    let (ox_lo, ox_cnt) = tap_range(wo, w, stride, padding, kx);
    if ox_cnt == 0 {
        return;
    }
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let x_row = &x_plane[iy as usize * w..][..w];
        let out_row = &mut out_plane[oy * wo..][..wo];
        let ix0 = (ox_lo * stride + kx) as isize - padding as isize;
        debug_assert!(ix0 >= 0);
        let ix0 = ix0 as usize;
        if stride == 1 {
            for (o, &xv) in out_row[ox_lo..ox_lo + ox_cnt].iter_mut().zip(&x_row[ix0..ix0 + ox_cnt]) {
                *o += wgt * xv;
            }
        } else {
            let mut ix = ix0;
            for o in out_row[ox_lo..ox_lo + ox_cnt].iter_mut() {
                *o += wgt * x_row[ix];
                ix += stride;
            }
        }
    }
}

/// Valid `ox` range (start, count) so that `ox*s + kx - p` stays inside `[0, w)`.
#[inline]
fn tap_range(wo: usize, w: usize, stride: usize, padding: usize, kx: usize) -> (usize, usize) {
    let lo = if kx >= padding { 0 } else { (padding - kx + stride - 1) / stride };
    // largest ox with ox*s + kx - p <= w - 1
    let hi_num = w as isize - 1 + padding as isize - kx as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num as usize / stride).min(wo.saturating_sub(1));
    if lo > hi {
        (0, 0)
    } else {
        (lo, hi - lo + 1)
    }
}

fn linear_forward(inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let (x, w) = (inputs[0], inputs[1]);
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::shape("linear", format!("input {xs:?} and weight {ws:?} must both be rank 2")));
    }
    let (n, f) = (xs[0], xs[1]);
    let (o, wf) = (ws[0], ws[1]);
    if f != wf {
        return Err(Error::shape("linear", format!("input features {f} but weight expects {wf}")));
    }
    if let Some(b) = inputs.get(2) {
        if b.shape() != [o] {
            return Err(Error::shape("linear", format!("bias {:?} but weight has {o} outputs", b.shape())));
        }
    }
    let mut out = vec![0.0f64; n * o];
    for nn in 0..n {
        let x_row = &x.values()[nn * f..][..f];
        for oo in 0..o {
            let w_row = &w.values()[oo * f..][..f];
            let mut acc = match inputs.get(2) {
                Some(b) => b.values()[oo],
                None => 0.0,
            };
            for (xv, wv) in x_row.iter().zip(w_row) {
                acc += xv * wv;
            }
            out[nn * o + oo] = acc;
        }
    }
    Ok((vec![n, o], out))
}

fn softmax_forward(x: &Tensor, axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid("softmax", format!("axis {axis} out of range for rank {}", shape.len())));
    }
    let (outer, d, inner) = split_axis(shape, axis);
    if d == 0 {
        return Err(Error::invalid("softmax", "empty softmax axis".to_string()));
    }
    let xv = x.values();
    let mut out = vec![0.0f64; xv.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * d * inner + inn;
            let mut mx = f64::NEG_INFINITY;
            for i in 0..d {
                mx = mx.max(xv[base + i * inner]);
            }
            let mut total = 0.0;
            for i in 0..d {
                let e = (xv[base + i * inner] - mx).exp();
                out[base + i * inner] = e;
                total += e;
            }
            for i in 0..d {
                out[base + i * inner] /= total;
            }
        }
    }
    Ok((shape.to_vec(), out))
}

fn reduce_forward(op: &Op, x: &Tensor, axes: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let name = op.name();
    let axes = check_axes(name, x.ndim(), axes)?;
    let out_shape = reduced_shape(x.shape(), &axes);
    let out_len = numel(&out_shape);
    if x.numel() == 0 {
        return Err(Error::invalid(name, "cannot reduce an empty tensor".to_string()));
    }
    let contrib = reduction_contrib(x.shape(), &axes);
    let xv = x.values();
    let vals = match op {
        Op::Mean { .. } | Op::Sum { .. } => {
            let mut acc = vec![0.0f64; out_len];
            for_each_reduced(x.shape(), &contrib, |i, o| acc[o] += xv[i]);
            if matches!(op, Op::Mean { .. }) {
                let count = (x.numel() / out_len) as f64;
                acc.iter_mut().for_each(|v| *v /= count);
            }
            acc
        }
        Op::ReduceMin { .. } => {
            let mut acc = vec![f64::INFINITY; out_len];
            for_each_reduced(x.shape(), &contrib, |i, o| {
                if xv[i] < acc[o] {
                    acc[o] = xv[i];
                }
            });
            acc
        }
        Op::ReduceMax { .. } => {
            let mut acc = vec![f64::NEG_INFINITY; out_len];
            for_each_reduced(x.shape(), &contrib, |i, o| {
                if xv[i] > acc[o] {
                    acc[o] = xv[i];
                }
            });
            acc
        }
        _ => unreachable!(),
    };
    Ok((out_shape, vals))
}

fn max_pool_forward(x: &Tensor, kernel: usize, stride: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("max_pool2d", format!("input {shape:?} must be rank 4")));
    }
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("max_pool2d", "kernel and stride must be >= 1".to_string()));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h < kernel || w < kernel {
        return Err(Error::shape("max_pool2d", format!("window {kernel} larger than input {h}x{w}")));
    }
    let ho = (h - kernel) / stride + 1;
    let wo = (w - kernel) / stride + 1;
    let xv = x.values();
    let mut out = vec![0.0f64; n * c * ho * wo];
    for plane in 0..n * c {
        let x_plane = &xv[plane * h * w..][..h * w];
        let out_plane = &mut out[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..kernel {
                    let row = &x_plane[(oy * stride + ky) * w + ox * stride..][..kernel];
                    for &v in row {
                        if v > best {
                            best = v;
                        }
                    }
                }
                out_plane[oy * wo + ox] = best;
            }
        }
    }
    Ok((vec![n, c, ho, wo], out))
}

fn upsample_forward(x: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::shape("upsample2x", format!("input {shape:?} must be rank 4")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let xv = x.values();
    let mut out = vec![0.0f64; n * c * 4 * h * w];
    let (ho, wo) = (2 * h, 2 * w);
    for plane in 0..n * c {
        let x_plane = &xv[plane * h * w..][..h * w];
        let out_plane = &mut out[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let x_row = &x_plane[(oy / 2) * w..][..w];
            let out_row = &mut out_plane[oy * wo..][..wo];
            for (ox, o) in out_row.iter_mut().enumerate() {
                *o = x_row[ox / 2];
            }
        }
    }
    Ok((vec![n, c, ho, wo], out))
}

fn concat_forward(inputs: &[&Tensor], axis: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    if inputs.is_empty() {
        return Err(Error::invalid("concat", "needs at least one input".to_string()));
    }
    let first = inputs[0].shape();
    if axis >= first.len() {
        return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {}", first.len())));
    }
    let mut axis_total = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len()
            || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d])
        {
            return Err(Error::shape("concat", format!("input {s:?} incompatible with {first:?} along axis {axis}")));
        }
        axis_total += s[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = axis_total;
    let (outer, _, inner) = split_axis(&out_shape, axis);
    let mut out = Vec::with_capacity(numel(&out_shape));
    for ou in 0..outer {
        for t in inputs {
            let d = t.shape()[axis];
            let chunk = d * inner;
            out.extend_from_slice(&t.values()[ou * chunk..][..chunk]);
        }
    }
    Ok((out_shape, out))
}

fn narrow_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::invalid("narrow", format!("axis {axis} out of range for rank {}", shape.len())));
    }
    if len == 0 || start + len > shape[axis] {
        return Err(Error::invalid(
            "narrow",
            format!("slice {start}..{} out of range for axis of size {}", start + len, shape[axis]),
        ));
    }
    let (outer, d, inner) = split_axis(shape, axis);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut out = Vec::with_capacity(outer * len * inner);
    for ou in 0..outer {
        let base = (ou * d + start) * inner;
        out.extend_from_slice(&x.values()[base..base + len * inner]);
    }
    Ok((out_shape, out))
}

// ── backward ───────────────────────────────────────────────────────────────

/// Computes per-input gradients of `op` given the output gradient.
///
/// `needs[i]` marks inputs that actually participate in differentiation;
/// gradients for the rest are skipped and returned as `None`.
pub(crate) fn vjp(
    op: &Op,
    inputs: &[InMeta],
    out_shape: &[usize],
    out_values: &[f64],
    grad_out: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    match op {
        Op::Conv2d { stride, padding } => conv2d_vjp(inputs, out_shape, grad_out, needs, *stride, *padding),
        Op::Linear => linear_vjp(inputs, out_shape, grad_out, needs),
        Op::Relu => vec![needs[0].then(|| {
            inputs[0].1.iter().zip(grad_out).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect()
        })],
        Op::Sigmoid => vec![needs[0].then(|| {
            out_values.iter().zip(grad_out).map(|(&y, &g)| g * y * (1.0 - y)).collect()
        })],
        Op::Softplus => vec![needs[0].then(|| {
            inputs[0].1.iter().zip(grad_out).map(|(&x, &g)| g * sigmoid(x)).collect()
        })],
        Op::Abs => vec![needs[0].then(|| {
            inputs[0]
                .1
                .iter()
                .zip(grad_out)
                .map(|(&x, &g)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                .collect()
        })],
        Op::Square => vec![needs[0].then(|| {
            inputs[0].1.iter().zip(grad_out).map(|(&x, &g)| g * 2.0 * x).collect()
        })],
        Op::SmoothL1 => vec![needs[0].then(|| {
            inputs[0].1.iter().zip(grad_out).map(|(&x, &g)| g * x.clamp(-1.0, 1.0)).collect()
        })],
        Op::Add | Op::Sub | Op::Mul | Op::Div => binary_vjp(op, inputs, grad_out, needs),
        Op::ScalarMul { factor } => {
            vec![needs[0].then(|| grad_out.iter().map(|&g| g * factor).collect())]
        }
        Op::Softmax { axis } => vec![needs[0].then(|| softmax_vjp(out_shape, out_values, grad_out, *axis))],
        Op::Mean { axes } | Op::Sum { axes } | Op::ReduceMin { axes } | Op::ReduceMax { axes } => {
            vec![needs[0].then(|| reduce_vjp(op, &inputs[0], axes, grad_out))]
        }
        Op::MaxPool2d { kernel, stride } => {
            vec![needs[0].then(|| max_pool_vjp(&inputs[0], out_shape, grad_out, *kernel, *stride))]
        }
        Op::Upsample2x => vec![needs[0].then(|| upsample_vjp(&inputs[0], grad_out))],
        Op::Concat { axis } => concat_vjp(inputs, out_shape, grad_out, needs, *axis),
        Op::Reshape { .. } => vec![needs[0].then(|| grad_out.to_vec())],
        Op::Narrow { axis, start, len } => {
            vec![needs[0].then(|| narrow_vjp(&inputs[0], grad_out, *axis, *start, *len))]
        }
    }
}

fn conv2d_vjp(
    inputs: &[InMeta],
    out_shape: &[usize],
    grad_out: &[f64],
    needs: &[bool],
    stride: usize,
    padding: usize,
) -> Vec<Option<Vec<f64>>> {
    let (xs, xv) = (&inputs[0].0, &inputs[0].1);
    let (ks, kv) = (&inputs[1].0, &inputs[1].1);
    let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, _, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);

    let dx = needs[0].then(|| {
        let mut dx = vec![0.0f64; xv.len()];
        for nn in 0..n {
            for c_out in 0..co {
                let go_plane = &grad_out[(nn * co + c_out) * ho * wo..][..ho * wo];
                for c_in in 0..ci {
                    let dx_plane = &mut dx[(nn * ci + c_in) * h * w..][..h * w];
                    let k_tap = &kv[(c_out * ci + c_in) * kh * kw..][..kh * kw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = k_tap[ky * kw + kx];
                            scatter_tap(dx_plane, go_plane, wgt, h, w, ho, wo, stride, padding, ky, kx);
                        }
                    }
                }
            }
        }
        dx
    });

    let dk = needs[1].then(|| {
        let mut dk = vec![0.0f64; kv.len()];
        for nn in 0..n {
            for c_out in 0..co {
                let go_plane = &grad_out[(nn * co + c_out) * ho * wo..][..ho * wo];
                for c_in in 0..ci {
                    let x_plane = &xv[(nn * ci + c_in) * h * w..][..h * w];
                    let dk_tap = &mut dk[(c_out * ci + c_in) * kh * kw..][..kh * kw];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            dk_tap[ky * kw + kx] +=
                                tap_dot(x_plane, go_plane, h, w, ho, wo, stride, padding, ky, kx);
                        }
                    }
                }
            }
        }
        dk
    });

    let db = match needs.get(2) {
        Some(true) => {
            let mut db = vec![0.0f64; co];
            for nn in 0..n {
                for c_out in 0..co {
                    let go_plane = &grad_out[(nn * co + c_out) * ho * wo..][..ho * wo];
                    db[c_out] += go_plane.iter().sum::<f64>();
                }
            }
            Some(db)
        }
        _ => None,
    };

    let mut grads = vec![dx, dk];
    if needs.len() > 2 {
        grads.push(db);
    }
    grads
}

/// `dx[oy*s + ky - p, ox*s + kx - p] += wgt * go[oy, ox]` over the valid range.
#[inline]
fn scatter_tap(
    dx_plane: &mut [f64],
    go_plane: &[f64],
    wgt: f64,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
) {
    let (ox_lo, ox_cnt) = tap_range(wo, w, stride, padding, kx);
    if ox_cnt == 0 {
        return;
    }
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let dx_row = &mut dx_plane[iy as usize * w..][..w];
        let go_row = &go_plane[oy * wo..][..wo];
        let ix0 = (ox_lo * stride + kx) as isize - padding as isize;
        debug_assert!(ix0 >= 0);
        let ix0 = ix0 as usize;
        if stride == 1 {
            for (x, &g) in dx_row[ix0..ix0 + ox_cnt].iter_mut().zip(&go_row[ox_lo..ox_lo + ox_cnt]) {
                *x += wgt * g;
            }
        } else {
            let mut ix = ix0;
            for &g in &go_row[ox_lo..ox_lo + ox_cnt] {
                dx_row[ix] += wgt * g;
                ix += stride;
            }
        }
    }
}

/// `sum over (oy, ox) of x[oy*s + ky - p, ox*s + kx - p] * go[oy, ox]`.
#[inline]
fn tap_dot(
    x_plane: &[f64],
    go_plane: &[f64],
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
    ky: usize,
    kx: usize,
) -> f64 {
    let (ox_lo, ox_cnt) = tap_range(wo, w, stride, padding, kx);
    if ox_cnt == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for oy in 0..ho {
        let iy = (oy * stride + ky) as isize - padding as isize;
        if iy < 0 || iy >= h as isize {
            continue;
        }
        let x_row = &x_plane[iy as usize * w..][..w];
        let go_row = &go_plane[oy * wo..][..wo];
        let ix0 = (ox_lo * stride + kx) as isize - padding as isize;
        debug_assert!(ix0 >= 0);
        let ix0 = ix0 as usize;
        if stride == 1 {
            for (&xv, &g) in x_row[ix0..ix0 + ox_cnt].iter().zip(&go_row[ox_lo..ox_lo + ox_cnt]) {
                acc += xv * g;
            }
        } else {
            let mut ix = ix0;
            for &g in &go_row[ox_lo..ox_lo + ox_cnt] {
                acc += x_row[ix] * g;
                ix += stride;
            }
        }
    }
    acc
}

fn linear_vjp(inputs: &[InMeta], out_shape: &[usize], grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (xs, xv) = (&inputs[0].0, &inputs[0].1);
    let (_, wv) = (&inputs[1].0, &inputs[1].1);
    let (n, f) = (xs[0], xs[1]);
    let o = out_shape[1];

    let dx = needs[0].then(|| {
        let mut dx = vec![0.0f64; n * f];
        for nn in 0..n {
            let go_row = &grad_out[nn * o..][..o];
            let dx_row = &mut dx[nn * f..][..f];
            for (oo, &g) in go_row.iter().enumerate() {
                for (d, &wvv) in dx_row.iter_mut().zip(&wv[oo * f..][..f]) {
                    *d += g * wvv;
                }
            }
        }
        dx
    });
    let dw = needs[1].then(|| {
        let mut dw = vec![0.0f64; o * f];
        for nn in 0..n {
            let go_row = &grad_out[nn * o..][..o];
            let x_row = &xv[nn * f..][..f];
            for (oo, &g) in go_row.iter().enumerate() {
                for (d, &xvv) in dw[oo * f..][..f].iter_mut().zip(x_row) {
                    *d += g * xvv;
                }
            }
        }
        dw
    });
    let db = match needs.get(2) {
        Some(true) => {
            let mut db = vec![0.0f64; o];
            for nn in 0..n {
                for (d, &g) in db.iter_mut().zip(&grad_out[nn * o..][..o]) {
                    *d += g;
                }
            }
            Some(db)
        }
        _ => None,
    };
    let mut grads = vec![dx, dw];
    if needs.len() > 2 {
        grads.push(db);
    }
    grads
}

fn binary_vjp(op: &Op, inputs: &[InMeta], grad_out: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let (a_shape, av) = (&inputs[0].0, &inputs[0].1);
    let (b_shape, bv) = (&inputs[1].0, &inputs[1].1);
    let plan = if a_shape == b_shape {
        Bcast::Elementwise
    } else if numel(a_shape) == 1 {
        Bcast::LeftScalar
    } else {
        Bcast::RightScalar
    };

    // Per-element partials with respect to each operand.
    let da_at = |i: usize| -> f64 {
        match op {
            Op::Add | Op::Sub => 1.0,
            Op::Mul => match plan {
                Bcast::LeftScalar => bv[i],
                Bcast::RightScalar => bv[0],
                Bcast::Elementwise => bv[i],
            },
            Op::Div => match plan {
                Bcast::LeftScalar => 1.0 / bv[i],
                Bcast::RightScalar => 1.0 / bv[0],
                Bcast::Elementwise => 1.0 / bv[i],
            },
            _ => unreachable!(),
        }
    };
    let db_at = |i: usize| -> f64 {
        let (a, b) = match plan {
            Bcast::Elementwise => (av[i], bv[i]),
            Bcast::LeftScalar => (av[0], bv[i]),
            Bcast::RightScalar => (av[i], bv[0]),
        };
        match op {
            Op::Add => 1.0,
            Op::Sub => -1.0,
            Op::Mul => a,
            Op::Div => -a / (b * b),
            _ => unreachable!(),
        }
    };

    let da = needs[0].then(|| {
        if plan == Bcast::LeftScalar {
            let total: f64 = grad_out.iter().enumerate().map(|(i, &g)| g * da_at(i)).sum();
            vec![total]
        } else {
            grad_out.iter().enumerate().map(|(i, &g)| g * da_at(i)).collect()
        }
    });
    let db = needs[1].then(|| {
        if plan == Bcast::RightScalar {
            let total: f64 = grad_out.iter().enumerate().map(|(i, &g)| g * db_at(i)).sum();
            vec![total]
        } else {
            grad_out.iter().enumerate().map(|(i, &g)| g * db_at(i)).collect()
        }
    });
    vec![da, db]
}

fn softmax_vjp(out_shape: &[usize], out_values: &[f64], grad_out: &[f64], axis: usize) -> Vec<f64> {
    let (outer, d, inner) = split_axis(out_shape, axis);
    let mut dx = vec![0.0f64; out_values.len()];
    for ou in 0..outer {
        for inn in 0..inner {
            let base = ou * d * inner + inn;
            let mut dot = 0.0;
            for i in 0..d {
                let idx = base + i * inner;
                dot += grad_out[idx] * out_values[idx];
            }
            for i in 0..d {
                let idx = base + i * inner;
                dx[idx] = out_values[idx] * (grad_out[idx] - dot);
            }
        }
    }
    dx
}

fn reduce_vjp(op: &Op, input: &InMeta, axes: &[usize], grad_out: &[f64]) -> Vec<f64> {
    let (shape, xv) = (&input.0, &input.1);
    let axes = check_axes(op.name(), shape.len(), axes).expect("validated in forward");
    let contrib = reduction_contrib(shape, &axes);
    let mut dx = vec![0.0f64; xv.len()];
    match op {
        Op::Sum { .. } => {
            for_each_reduced(shape, &contrib, |i, o| dx[i] = grad_out[o]);
        }
        Op::Mean { .. } => {
            let count = (xv.len() / grad_out.len()) as f64;
            for_each_reduced(shape, &contrib, |i, o| dx[i] = grad_out[o] / count);
        }
        Op::ReduceMin { .. } | Op::ReduceMax { .. } => {
            // Recompute the first-attaining element per output cell and route
            // the whole gradient there (deterministic subgradient at ties).
            let take_min = matches!(op, Op::ReduceMin { .. });
            let mut best = vec![if take_min { f64::INFINITY } else { f64::NEG_INFINITY }; grad_out.len()];
            let mut arg = vec![usize::MAX; grad_out.len()];
            for_each_reduced(shape, &contrib, |i, o| {
                let better = if take_min { xv[i] < best[o] } else { xv[i] > best[o] };
                if better {
                    best[o] = xv[i];
                    arg[o] = i;
                }
            });
            for (o, &i) in arg.iter().enumerate() {
                dx[i] = grad_out[o];
            }
        }
        _ => unreachable!(),
    }
    dx
}

fn max_pool_vjp(input: &InMeta, out_shape: &[usize], grad_out: &[f64], kernel: usize, stride: usize) -> Vec<f64> {
    let (shape, xv) = (&input.0, &input.1);
    let (h, w) = (shape[2], shape[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let planes = shape[0] * shape[1];
    let mut dx = vec![0.0f64; xv.len()];
    for plane in 0..planes {
        let x_plane = &xv[plane * h * w..][..h * w];
        let dx_plane = &mut dx[plane * h * w..][..h * w];
        let go_plane = &grad_out[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = (oy * stride + ky) * w + ox * stride + kx;
                        if x_plane[idx] > best {
                            best = x_plane[idx];
                            arg = idx;
                        }
                    }
                }
                dx_plane[arg] += go_plane[oy * wo + ox];
            }
        }
    }
    dx
}

fn upsample_vjp(input: &InMeta, grad_out: &[f64]) -> Vec<f64> {
    let (shape, xv) = (&input.0, &input.1);
    let (h, w) = (shape[2], shape[3]);
    let planes = shape[0] * shape[1];
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0f64; xv.len()];
    for plane in 0..planes {
        let dx_plane = &mut dx[plane * h * w..][..h * w];
        let go_plane = &grad_out[plane * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let dx_row = &mut dx_plane[(oy / 2) * w..][..w];
            let go_row = &go_plane[oy * wo..][..wo];
            for (ox, &g) in go_row.iter().enumerate() {
                dx_row[ox / 2] += g;
            }
        }
    }
    dx
}

fn concat_vjp(
    inputs: &[InMeta],
    out_shape: &[usize],
    grad_out: &[f64],
    needs: &[bool],
    axis: usize,
) -> Vec<Option<Vec<f64>>> {
    let (outer, _, inner) = split_axis(out_shape, axis);
    let mut grads: Vec<Option<Vec<f64>>> = inputs
        .iter()
        .zip(needs)
        .map(|((shape, _), &need)| need.then(|| vec![0.0f64; numel(shape)]))
        .collect();
    let mut offset = 0;
    for (idx, (shape, _)) in inputs.iter().enumerate() {
        let d = shape[axis];
        let chunk = d * inner;
        if let Some(g) = grads[idx].as_mut() {
            let out_row = out_shape[axis] * inner;
            for ou in 0..outer {
                let src = &grad_out[ou * out_row + offset..][..chunk];
                g[ou * chunk..][..chunk].copy_from_slice(src);
            }
        }
        offset += chunk;
    }
    grads
}

fn narrow_vjp(input: &InMeta, grad_out: &[f64], axis: usize, start: usize, len: usize) -> Vec<f64> {
    let (shape, xv) = (&input.0, &input.1);
    let (outer, d, inner) = split_axis(shape, axis);
    let mut dx = vec![0.0f64; xv.len()];
    for ou in 0..outer {
        let dst = (ou * d + start) * inner;
        dx[dst..dst + len * inner].copy_from_slice(&grad_out[ou * len * inner..][..len * inner]);
    }
    dx
}
