//! The differentiation tape: op recording and reverse-mode backward.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::ops::{self, InMeta, Op};
use crate::tensor::{NodeRef, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Node {
    /// `None` marks a leaf (a tensor registered as a differentiation root).
    op: Option<Op>,
    /// Node index per input; `None` for inputs outside the gradient path.
    inputs: Vec<Option<usize>>,
    in_meta: Vec<InMeta>,
    out_shape: Vec<usize>,
    out_values: Arc<Vec<f64>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    /// Leaf registry keyed by value-buffer identity, so a parameter used in
    /// several places resolves to a single node and its gradient accumulates.
    leaf_by_buffer: HashMap<usize, usize>,
}

/// Records one forward pass. Create a fresh tape per pass; `backward` may be
/// called repeatedly and never consumes the recording.
pub struct Tape {
    id: u64,
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), inner: RefCell::new(TapeInner::default()) }
    }

    /// Applies `op` to `inputs`, recording a node when any input participates
    /// in differentiation. Output values are checked for NaN/infinity.
    pub fn apply(&self, op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let (out_shape, out_values) = ops::forward(&op, inputs)?;
        if !out_values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let tracked = inputs.iter().any(|t| self.tracks(t));
        let out_values = Arc::new(out_values);
        if !tracked {
            return Ok(Tensor::from_op(out_shape, out_values, None));
        }
        let mut inner = self.inner.borrow_mut();
        let input_ids: Vec<Option<usize>> = inputs.iter().map(|t| resolve(&mut inner, self.id, t)).collect();
        let in_meta: Vec<InMeta> =
            inputs.iter().map(|t| (t.shape().to_vec(), Arc::clone(t.values_arc()))).collect();
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            op: Some(op),
            inputs: input_ids,
            in_meta,
            out_shape: out_shape.clone(),
            out_values: Arc::clone(&out_values),
        });
        Ok(Tensor::from_op(out_shape, out_values, Some(NodeRef { tape: self.id, index })))
    }

    fn tracks(&self, t: &Tensor) -> bool {
        t.is_requires_grad() || matches!(t.node(), Some(n) if n.tape == self.id)
    }

    /// Runs reverse-mode differentiation from a scalar loss.
    ///
    /// A loss with no connection to this tape yields an empty store (nothing
    /// required gradients); a non-scalar loss is an error.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a single value, got shape {:?}", loss.shape()),
            ));
        }
        let seed = {
            let mut inner = self.inner.borrow_mut();
            match loss.node() {
                Some(n) if n.tape == self.id => Some(n.index),
                Some(_) => {
                    return Err(Error::invalid("backward", "loss was recorded on a different tape".to_string()))
                }
                None if loss.is_requires_grad() => {
                    let id = self.id;
                    Some(resolve_leaf(&mut inner, id, loss))
                }
                None => None,
            }
        };
        let inner = self.inner.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
        if let Some(seed) = seed {
            grads[seed] = Some(vec![1.0]);
            for idx in (0..inner.nodes.len()).rev() {
                let Some(grad_out) = grads[idx].take() else {
                    continue;
                };
                let node = &inner.nodes[idx];
                if let Some(op) = &node.op {
                    let needs: Vec<bool> = node.inputs.iter().map(|i| i.is_some()).collect();
                    let in_grads =
                        ops::vjp(op, &node.in_meta, &node.out_shape, &node.out_values, &grad_out, &needs);
                    for (slot, grad) in node.inputs.iter().zip(in_grads) {
                        let (Some(target), Some(grad)) = (slot, grad) else {
                            continue;
                        };
                        match &mut grads[*target] {
                            Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                            empty => *empty = Some(grad),
                        }
                    }
                }
                grads[idx] = Some(grad_out);
            }
        }
        let mut store = Vec::with_capacity(inner.nodes.len());
        for (node, grad) in inner.nodes.iter().zip(grads) {
            match grad {
                Some(g) => {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    store.push(Some(Tensor::from_op(node.out_shape.clone(), Arc::new(g), None)));
                }
                None => store.push(None),
            }
        }
        Ok(Gradients { tape: self.id, by_node: store, leaf_by_buffer: inner.leaf_by_buffer.clone() })
    }

    // ── op conveniences ────────────────────────────────────────────────────

    pub fn conv2d(&self, x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, stride: usize, padding: usize) -> Result<Tensor> {
        let op = Op::Conv2d { stride, padding };
        match bias {
            Some(b) => self.apply(op, &[x, kernel, b]),
            None => self.apply(op, &[x, kernel]),
        }
    }

    pub fn linear(&self, x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        match bias {
            Some(b) => self.apply(Op::Linear, &[x, weight, b]),
            None => self.apply(Op::Linear, &[x, weight]),
        }
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softplus(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Softplus, &[x])
    }

    pub fn abs(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Abs, &[x])
    }

    pub fn square(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Square, &[x])
    }

    pub fn smooth_l1(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::SmoothL1, &[x])
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn scalar_mul(&self, factor: f64, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::ScalarMul { factor }, &[x])
    }

    pub fn softmax(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.apply(Op::Softmax { axis }, &[x])
    }

    /// Mean over `axes`; an empty list averages over everything.
    pub fn mean(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.apply(Op::Mean { axes: axes.to_vec() }, &[x])
    }

    /// Sum over `axes`; an empty list sums over everything.
    pub fn sum(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.apply(Op::Sum { axes: axes.to_vec() }, &[x])
    }

    pub fn reduce_min(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.apply(Op::ReduceMin { axes: axes.to_vec() }, &[x])
    }

    pub fn reduce_max(&self, x: &Tensor, axes: &[usize]) -> Result<Tensor> {
        self.apply(Op::ReduceMax { axes: axes.to_vec() }, &[x])
    }

    pub fn max_pool2d(&self, x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
        self.apply(Op::MaxPool2d { kernel, stride }, &[x])
    }

    pub fn upsample2x(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(Op::Upsample2x, &[x])
    }

    pub fn concat(&self, xs: &[&Tensor], axis: usize) -> Result<Tensor> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        self.apply(Op::Reshape { shape: shape.to_vec() }, &[x])
    }

    pub fn narrow(&self, x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.apply(Op::Narrow { axis, start, len }, &[x])
    }
}

fn resolve(inner: &mut TapeInner, tape_id: u64, t: &Tensor) -> Option<usize> {
    match t.node() {
        Some(n) if n.tape == tape_id => Some(n.index),
        _ if t.is_requires_grad() => Some(resolve_leaf(inner, tape_id, t)),
        _ => None,
    }
}

fn resolve_leaf(inner: &mut TapeInner, _tape_id: u64, t: &Tensor) -> usize {
    let key = t.buffer_id();
    if let Some(&idx) = inner.leaf_by_buffer.get(&key) {
        return idx;
    }
    let idx = inner.nodes.len();
    inner.nodes.push(Node {
        op: None,
        inputs: Vec::new(),
        in_meta: Vec::new(),
        out_shape: t.shape().to_vec(),
        out_values: Arc::clone(t.values_arc()),
    });
    inner.leaf_by_buffer.insert(key, idx);
    idx
}

/// Detached gradients produced by one `backward` call.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    by_node: Vec<Option<Tensor>>,
    leaf_by_buffer: HashMap<usize, usize>,
}

impl Gradients {
    /// The gradient of the loss with respect to `t`, if `t` was reachable.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        let index = match t.node() {
            Some(n) if n.tape == self.tape => n.index,
            Some(_) => return None,
            None => *self.leaf_by_buffer.get(&t.buffer_id())?,
        };
        self.by_node.get(index)?.as_ref()
    }

    /// True when nothing received a gradient (e.g. the loss was detached).
    pub fn is_empty(&self) -> bool {
        self.by_node.iter().all(|g| g.is_none())
    }
}
