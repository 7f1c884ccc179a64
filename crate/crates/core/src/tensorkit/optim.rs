use super::{LayerParams, Scalar, TrainConfig};

/// Step schedule: `lr * decay^floor(epoch / step)`.
pub fn effective_learning_rate(config: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / config.lr_step_epochs.max(1)) as i32;
    config.learning_rate * config.lr_decay_factor.powi(steps)
}

/// One SGD-with-momentum update: `v = m v + g; p -= lr_e v`.
/// Gradients are left untouched; call [`zero_grad`] before the next batch.
pub fn sgd_step<T: Scalar>(params: &mut LayerParams<T>, config: &TrainConfig, epoch: usize) {
    let lr = T::of(effective_learning_rate(config, epoch));
    let momentum = T::of(config.momentum);
    let LayerParams {
        weights,
        bias,
        grad_weights,
        grad_bias,
        velocity_weights,
        velocity_bias,
        ..
    } = params;
    update(weights.data_mut(), grad_weights.data(), velocity_weights, lr, momentum);
    update(bias.data_mut(), grad_bias.data(), velocity_bias, lr, momentum);
}

fn update<T: Scalar>(p: &mut [T], g: &[T], v: &mut [T], lr: T, momentum: T) {
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = momentum * *v + g;
        *p = *p - lr * *v;
    }
}

pub fn zero_grad<T: Scalar>(params: &mut LayerParams<T>) {
    params.grad_weights.fill(T::zero());
    params.grad_bias.fill(T::zero());
}
