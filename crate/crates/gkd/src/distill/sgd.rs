//! Plain SGD with momentum and decoupled-from-nothing weight decay: the
//! decay joins the gradient before the momentum buffer, the classic
//! detector recipe.
//!
//! ```text
//! v <- momentum * v + g + weight_decay * p
//! p <- p - lr * v
//! ```

use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tensor};

/// Momentum buffers, aligned with the model's canonical parameter order.
pub struct SgdState {
    velocity: Vec<(String, Vec<f64>)>,
}

impl SgdState {
    pub fn new(model: &DetectorModel) -> SgdState {
        SgdState {
            velocity: model
                .named_params()
                .iter()
                .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
                .collect(),
        }
    }

    /// Buffers as named tensors, for checkpointing.
    pub fn to_tensors(&self, model: &DetectorModel) -> Vec<(String, Tensor)> {
        self.velocity
            .iter()
            .zip(model.named_params())
            .map(|((n, v), (_, p))| {
                (n.clone(), Tensor::new(p.shape(), v.clone()).expect("buffer matches parameter"))
            })
            .collect()
    }

    /// Rebuilds buffers from a checkpoint's velocity table.
    pub fn from_tensors(model: &DetectorModel, tensors: &[(String, Tensor)]) -> Result<SgdState> {
        let params = model.named_params();
        if tensors.len() != params.len() {
            return Err(Error::invalid(
                "optimizer state",
                format!("{} buffers for {} parameters", tensors.len(), params.len()),
            ));
        }
        let mut velocity = Vec::with_capacity(params.len());
        for ((pn, pt), (vn, vt)) in params.iter().zip(tensors) {
            if pn != vn || pt.shape() != vt.shape() {
                return Err(Error::invalid(
                    "optimizer state",
                    format!("buffer '{vn}' {:?} does not match parameter '{pn}' {:?}", vt.shape(), pt.shape()),
                ));
            }
            velocity.push((vn.clone(), vt.values().to_vec()));
        }
        Ok(SgdState { velocity })
    }
}

/// The core update on raw buffers. A missing gradient contributes zero (the
/// parameter still feels weight decay and momentum).
fn update(p: &mut [f64], v: &mut [f64], g: Option<&[f64]>, lr: f64, momentum: f64, weight_decay: f64) {
    for i in 0..p.len() {
        let grad = g.map_or(0.0, |g| g[i]);
        v[i] = momentum * v[i] + grad + weight_decay * p[i];
        p[i] -= lr * v[i];
    }
}

/// Applies one SGD step to every model parameter.
pub fn sgd_step(
    model: &mut DetectorModel,
    state: &mut SgdState,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for ((name, param), (vel_name, vel)) in
        model.named_params_mut().into_iter().zip(state.velocity.iter_mut())
    {
        debug_assert_eq!(&name, vel_name);
        let grad = grads.get(param);
        if let Some(g) = grad {
            if g.shape() != param.shape() {
                return Err(Error::shape(
                    "sgd",
                    format!("'{name}': gradient {:?} vs parameter {:?}", g.shape(), param.shape()),
                ));
            }
        }
        let mut values = param.values().to_vec();
        update(&mut values, vel, grad.map(|g| g.values()), lr, momentum, weight_decay);
        *param = Tensor::param(param.shape(), values)?;
    }
    Ok(())
}
