//! Minimal trainable-layer toolkit: explicit forward/backward layers, losses,
//! and SGD with a step learning-rate schedule.
//!
//! Layers cache what they need during `forward` and consume it in `backward`.
//! There is no autodiff graph; networks chain layers by hand.

mod activation;
mod batchnorm;
mod conv;
mod gradcheck;
mod linear;
mod loss;
mod optim;
mod sequential;
mod tensor;
mod upsample;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use activation::{relu, softmax, softmax_rows, Dropout, Flatten, Relu, Softmax};
pub use batchnorm::{BatchNorm, BN_EPSILON, BN_MOMENTUM};
pub use conv::Conv2d;
pub use gradcheck::{grad_check, GradCheckFailure, GradCoordinate, GradReport, ParamKind};
pub use linear::Linear;
pub use loss::{bce, bce_batch, bce_from_logits, cross_entropy, cross_entropy_batch, sigmoid, BCE_EPSILON};
pub use optim::{effective_learning_rate, sgd_step, zero_grad};
pub use sequential::{AnyLayer, Sequential};
pub use tensor::{Scalar, Tensor};
pub use upsample::UpsampleBilinear;
pub(crate) use tensor::{axpy, dot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {context} at flat index {index}")]
    NonFinite { context: String, index: usize },
    #[error("batch-norm needs a batch of at least 2 in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward called on {0} without a cached forward pass")]
    NoForwardCache(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of one layer plus their gradients and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Tensor<T>,
    /// Batch-norm only.
    pub running_mean: Option<Vec<T>>,
    /// Batch-norm only; strictly positive.
    pub running_var: Option<Vec<T>>,
    pub(crate) velocity_weights: Vec<T>,
    pub(crate) velocity_bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(weights: Tensor<T>, bias: Tensor<T>) -> Self {
        let grad_weights = Tensor::zeros(weights.dims());
        let grad_bias = Tensor::zeros(bias.dims());
        let velocity_weights = vec![T::zero(); weights.len()];
        let velocity_bias = vec![T::zero(); bias.len()];
        Self {
            weights,
            bias,
            grad_weights,
            grad_bias,
            running_mean: None,
            running_var: None,
            velocity_weights,
            velocity_bias,
        }
    }

    /// Fan-in-scaled uniform init: `U(-b, b)` with `b = gain * sqrt(6 / fan_in)`.
    /// `gain = 1` is the He-uniform bound; zero bias.
    pub fn he_uniform(
        weight_dims: &[usize],
        bias_len: usize,
        fan_in: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let weights = Tensor::from_fn(weight_dims, |_| T::of(rng.random_range(-bound..=bound)));
        Self::new(weights, Tensor::zeros(&[bias_len]))
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        let mut out = LayerParams::new(self.weights.cast(), self.bias.cast());
        out.running_mean = self
            .running_mean
            .as_ref()
            .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect());
        out.running_var = self
            .running_var
            .as_ref()
            .map(|v| v.iter().map(|x| U::of(x.as_f64())).collect());
        out
    }
}

/// A differentiable layer. `forward` in train mode caches activations needed
/// by the following `backward` call; `backward` accumulates parameter
/// gradients and returns the gradient with respect to the input.
pub trait Layer<T: Scalar>: Send {
    fn kind(&self) -> &'static str;
    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError>;
    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError>;
    fn params(&self) -> Option<&LayerParams<T>> {
        None
    }
    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        None
    }
}

/// Optimization hyperparameters shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_step_epochs: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            lr_step_epochs: 3,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            max_epochs: 10,
            early_stop_patience: 3,
            batch_size: 32,
            dropout_p: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |msg: &str| Err(TensorError::Config(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if self.lr_step_epochs < 1 {
            return bad("lr_step_epochs must be >= 1");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_matches_schedule() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.lr_step_epochs, 3);
        assert_eq!(c.max_epochs, 10);
    }

    #[test]
    fn config_rejects_out_of_range_values() {
        let mut c = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        c.learning_rate = 0.1;
        c.dropout_p = 1.0;
        assert!(c.validate().is_err());
        c.dropout_p = 0.0;
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
