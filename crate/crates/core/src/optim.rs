use std::collections::BTreeMap;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

/// SGD with classical momentum and decoupled-from-nothing L2 weight decay
/// folded into the gradient:
///
/// ```text
/// v      <- momentum * v + grad + weight_decay * param
/// param  <- param - lr * v
/// ```
///
/// Velocity buffers are keyed by parameter name and persist across steps
/// (and through checkpoints), so a parameter's trajectory depends only on
/// its gradient history, not on update order.
pub struct Sgd<S: Scalar> {
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self, TensorError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(TensorError::Optimizer(format!(
                "learning rate must be finite and positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::Optimizer(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(TensorError::Optimizer(format!(
                "weight decay must be finite and non-negative, got {weight_decay}"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<(), TensorError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(TensorError::Optimizer(format!(
                "learning rate must be finite and positive, got {lr}"
            )));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient this step are left untouched (their velocity keeps
    /// its value but does not advance).
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<(), TensorError> {
        let lr = S::from_f64(self.lr);
        let momentum = S::from_f64(self.momentum);
        let weight_decay = S::from_f64(self.weight_decay);
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name) else {
                continue;
            };
            if grad.shape() != param.shape() {
                return Err(TensorError::Optimizer(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(param.shape()));
            for ((v, p), &g) in vel
                .data_mut()
                .iter_mut()
                .zip(param.data_mut())
                .zip(grad.data())
            {
                *v = momentum * *v + g + weight_decay * *p;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.velocity
    }

    /// Replaces the velocity state, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor<S>>) {
        self.velocity = velocity;
    }
}
