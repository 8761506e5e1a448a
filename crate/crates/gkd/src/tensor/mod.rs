//! Dense `f64` tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a shape plus a flat, row-major, immutable value buffer.
//! Differentiation is driven by an explicit [`Tape`]: ops are applied through
//! a tape, which records a node whenever any input participates in
//! differentiation, and [`Tape::backward`] replays the recorded nodes in
//! reverse to produce a [`Gradients`] store.
//!
//! Two properties the rest of the crate leans on:
//!
//! * every op checks its output for NaN/infinity and fails loudly instead of
//!   letting poison propagate, and
//! * everything is deterministic — identical inputs give bit-identical
//!   forward values and gradients.

mod fd;
mod ops;
mod tape;

pub use fd::{finite_difference_gradient, max_relative_error};
pub use ops::Op;
pub(crate) use ops::sigmoid;
pub use tape::{Gradients, Tape};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Identifies the tape node that produced a tracked tensor.
///
/// The tape id guards against feeding a tensor recorded on one tape into
/// backward on another: ids are globally unique.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

/// A dense tensor. Cloning is cheap (the value buffer is shared).
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<NodeRef>,
}

impl Tensor {
    /// Builds a tensor, validating that `values` fills `shape` exactly and
    /// contains no NaN/infinity.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", values.len()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor { shape: shape.to_vec(), values: Arc::new(values), requires_grad: false, node: None })
    }

    /// A tensor created by an op that already guaranteed finite values.
    pub(crate) fn from_op(shape: Vec<usize>, values: Arc<Vec<f64>>, node: Option<NodeRef>) -> Tensor {
        Tensor { shape, values, requires_grad: node.is_some(), node }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), values: Arc::new(vec![0.0; numel]), requires_grad: false, node: None }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// A rank-0 scalar.
    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::new(&[], vec![value])
    }

    /// Marks (or unmarks) this tensor as a differentiation leaf.
    pub fn requires_grad(mut self, requires: bool) -> Tensor {
        self.requires_grad = requires;
        if !requires {
            self.node = None;
        }
        self
    }

    /// Shorthand for a leaf parameter tensor.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        Ok(Tensor::new(shape, values)?.requires_grad(true))
    }

    /// Same values, no gradient path: not a leaf, not attached to any tape.
    pub fn detach(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), values: Arc::clone(&self.values), requires_grad: false, node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor holds more than one value; use only where a
    /// scalar is structurally guaranteed (e.g. a reduced loss).
    pub fn item(&self) -> f64 {
        assert!(
            self.values.len() == 1,
            "item() on a tensor with {} values (shape {:?})",
            self.values.len(),
            self.shape
        );
        self.values[0]
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn values_arc(&self) -> &Arc<Vec<f64>> {
        &self.values
    }

    /// Stable identity of the value buffer, used to recognise a leaf that
    /// appears several times in one forward pass.
    pub(crate) fn buffer_id(&self) -> usize {
        Arc::as_ptr(&self.values) as *const f64 as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_value_count() {
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "got {err:?}");
    }

    #[test]
    fn new_rejects_non_finite_values() {
        let err = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "got {err:?}");
        let err = Tensor::new(&[1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "got {err:?}");
    }

    #[test]
    fn scalar_is_rank_zero_with_one_value() {
        let s = Tensor::scalar(4.25).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.25);
    }

    #[test]
    fn detach_shares_values_and_drops_grad_state() {
        let t = Tensor::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let d = t.detach();
        assert_eq!(d.values(), t.values());
        assert!(!d.is_requires_grad());
        assert_eq!(d.buffer_id(), t.buffer_id());
    }

    #[test]
    fn clone_shares_the_buffer() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let c = t.clone();
        assert_eq!(t.buffer_id(), c.buffer_id());
    }
}
