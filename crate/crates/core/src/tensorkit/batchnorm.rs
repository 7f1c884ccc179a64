use super::{Layer, LayerParams, Mode, Scalar, Tensor, TensorError};

/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Batch normalization over the last (channel) axis of `[batch, C]` or
/// `[batch, H, W, C]` input. `weights` holds gamma, `bias` holds beta.
#[derive(Clone, Debug)]
pub struct BatchNorm<T: Scalar = f32> {
    pub params: LayerParams<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    dims: Vec<usize>,
    normalized: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let mut params = LayerParams::new(Tensor::filled(&[channels], T::one()), Tensor::zeros(&[channels]));
        params.running_mean = Some(vec![T::zero(); channels]);
        params.running_var = Some(vec![T::one(); channels]);
        Self {
            params,
            cache: None,
        }
    }

    pub fn from_params(params: LayerParams<T>) -> Result<Self, TensorError> {
        let c = params.weights.len();
        let ok_stats = params.running_mean.as_ref().is_some_and(|m| m.len() == c)
            && params
                .running_var
                .as_ref()
                .is_some_and(|v| v.len() == c && v.iter().all(|&x| x > T::zero()));
        if params.bias.len() != c || !ok_stats {
            return Err(TensorError::Config(
                "batch-norm parameters need gamma, beta and positive running stats per channel".into(),
            ));
        }
        Ok(Self {
            params,
            cache: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.params.weights.len()
    }

    fn check_dims(&self, dims: &[usize]) -> Result<(), TensorError> {
        let ok = matches!(dims.len(), 2 | 4) && dims[dims.len() - 1] == self.channels();
        if ok {
            Ok(())
        } else {
            Err(TensorError::Config(format!(
                "batch-norm expects [batch, ..., {}], got {dims:?}",
                self.channels()
            )))
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        self.check_dims(input.dims())?;
        let c = self.channels();
        let x = input.data();
        let count = x.len() / c;
        let eps = T::of(BN_EPSILON);
        let (mean, var) = match mode {
            Mode::Train => {
                if input.batch() < 2 {
                    return Err(TensorError::BatchTooSmall(input.batch()));
                }
                let mut mean = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                let inv_n = T::of(1.0 / count as f64);
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                let mut var = vec![T::zero(); c];
                for row in x.chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                let unbiased = T::of(1.0 / (count - 1) as f64);
                let momentum = T::of(BN_MOMENTUM);
                let rm = self.params.running_mean.get_or_insert_with(|| vec![T::zero(); c]);
                for (r, &m) in rm.iter_mut().zip(&mean) {
                    *r = momentum * *r + (T::one() - momentum) * m;
                }
                let rv = self.params.running_var.get_or_insert_with(|| vec![T::one(); c]);
                for (r, &s) in rv.iter_mut().zip(&var) {
                    *r = momentum * *r + (T::one() - momentum) * s * unbiased;
                }
                var.iter_mut().for_each(|s| *s = *s * inv_n);
                (mean, var)
            }
            Mode::Eval => (
                self.params.running_mean.clone().unwrap_or_else(|| vec![T::zero(); c]),
                self.params.running_var.clone().unwrap_or_else(|| vec![T::one(); c]),
            ),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.params.weights.data();
        let beta = self.params.bias.data();
        let mut normalized = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for ((row, nrow), orow) in x
            .chunks_exact(c)
            .zip(normalized.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for j in 0..c {
                let xh = (row[j] - mean[j]) * inv_std[j];
                nrow[j] = xh;
                orow[j] = gamma[j] * xh + beta[j];
            }
        }
        let out = Tensor::new(input.dims().to_vec(), out)?;
        out.ensure_finite("batchnorm forward")?;
        self.cache = Some(BnCache {
            dims: input.dims().to_vec(),
            normalized,
            inv_std,
            train: mode == Mode::Train,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("batchnorm".into()))?;
        if grad_output.dims() != cache.dims.as_slice() {
            return Err(TensorError::Config("batch-norm grad shape mismatch".into()));
        }
        let c = self.channels();
        let dy = grad_output.data();
        let count = dy.len() / c;
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xh = vec![T::zero(); c];
        for (drow, nrow) in dy.chunks_exact(c).zip(cache.normalized.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] = sum_dy[j] + drow[j];
                sum_dy_xh[j] = sum_dy_xh[j] + drow[j] * nrow[j];
            }
        }
        {
            let gg = self.params.grad_weights.data_mut();
            for (g, &s) in gg.iter_mut().zip(&sum_dy_xh) {
                *g = *g + s;
            }
            let gb = self.params.grad_bias.data_mut();
            for (g, &s) in gb.iter_mut().zip(&sum_dy) {
                *g = *g + s;
            }
        }
        let gamma = self.params.weights.data();
        let mut dx = vec![T::zero(); dy.len()];
        if cache.train {
            let inv_n = T::of(1.0 / count as f64);
            for ((drow, nrow), xrow) in dy
                .chunks_exact(c)
                .zip(cache.normalized.chunks_exact(c))
                .zip(dx.chunks_exact_mut(c))
            {
                for j in 0..c {
                    let centered = drow[j] - inv_n * sum_dy[j] - nrow[j] * inv_n * sum_dy_xh[j];
                    xrow[j] = gamma[j] * cache.inv_std[j] * centered;
                }
            }
        } else {
            for (drow, xrow) in dy.chunks_exact(c).zip(dx.chunks_exact_mut(c)) {
                for j in 0..c {
                    xrow[j] = gamma[j] * cache.inv_std[j] * drow[j];
                }
            }
        }
        let grad = Tensor::new(cache.dims, dx)?;
        grad.ensure_finite("batchnorm backward")?;
        Ok(grad)
    }

    fn params(&self) -> Option<&LayerParams<T>> {
        Some(&self.params)
    }

    fn params_mut(&mut self) -> Option<&mut LayerParams<T>> {
        Some(&mut self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizes_two_values() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-4);
        assert!((y.data()[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn scale_and_shift() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.params.weights.data_mut()[0] = 2.0;
        bn.params.bias.data_mut()[0] = 5.0;
        let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        assert!((y.data()[0] - 3.0).abs() < 1e-4);
        assert!((y.data()[1] - 7.0).abs() < 1e-4);
    }

    #[test]
    fn single_sample_train_batch_is_rejected() {
        let mut bn = BatchNorm::<f32>::new(3);
        let x = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(
            bn.forward(&x, Mode::Train).unwrap_err(),
            TensorError::BatchTooSmall(1)
        );
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum_and_stay_positive() {
        let mut bn = BatchNorm::<f64>::new(1);
        let x = Tensor::new(vec![2, 1], vec![4.0, 4.0]).unwrap();
        bn.forward(&x, Mode::Train).unwrap();
        let rm = bn.params.running_mean.as_ref().unwrap()[0];
        let rv = bn.params.running_var.as_ref().unwrap()[0];
        assert!((rm - 0.4).abs() < 1e-12);
        assert!((rv - 0.9).abs() < 1e-12);
        assert!(rv > 0.0);
    }

    #[test]
    fn eval_mode_is_deterministic_and_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.5]).unwrap();
        let a = bn.forward(&x, Mode::Eval).unwrap();
        let b = bn.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        // Fresh stats: mean 0, var 1.
        let scale = 1.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((a.data()[3] - 5.0 * scale).abs() < 1e-12);
    }
}
