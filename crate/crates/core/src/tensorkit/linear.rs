use rand::Rng;

use super::{axpy, dot, Layer, LayerParams, Mode, Scalar, Tensor, TensorError};

/// Fully connected layer `y = W x + b` with `W` of shape `[out, in]`.
///
/// Accepts `[batch, in]` or a single `[in]` vector.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar = f32> {
    pub params: LayerParams<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(params: LayerParams<T>) -> Result<Self, TensorError> {
        let wd = params.weights.dims();
        if wd.len() != 2 || params.bias.dims() != [wd[0]] {
            return Err(TensorError::Config(format!(
                "linear weights {:?} / bias {:?} inconsistent",
                wd,
                params.bias.dims()
            )));
        }
        Ok(Self {
            params,
            cache: None,
        })
    }

    pub fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let params = LayerParams::he_uniform(&[outputs, inputs], outputs, inputs, gain, rng);
        Self {
            params,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.params.weights.dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.params.weights.dims()[0]
    }

    fn batch_view(&self, input: &Tensor<T>) -> Result<usize, TensorError> {
        let n = self.in_features();
        match input.dims() {
            [k] if *k == n => Ok(1),
            [b, k] if *k == n => Ok(*b),
            d => Err(TensorError::Config(format!(
                "linear expects [batch, {n}], got {d:?}"
            ))),
        }
    }
}

impl<T: Scalar> Layer<T> for Linear<T> {
    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let batch = self.batch_view(input)?;
        let (m, n) = (self.out_features(), self.in_features());
        let w = self.params.weights.data();
        let b = self.params.bias.data();
        let mut out = vec![T::zero(); batch * m];
        // Weight-row outer loop: each row is read once per batch.
        let x = input.data();
        for j in 0..m {
            let wj = &w[j * n..(j + 1) * n];
            for s in 0..batch {
                out[s * m + j] = dot(wj, &x[s * n..(s + 1) * n]) + b[j];
            }
        }
        let dims = if input.dims().len() == 1 {
            vec![m]
        } else {
            vec![batch, m]
        };
        let out = Tensor::new(dims, out)?;
        out.ensure_finite("linear forward")?;
        if mode == Mode::Train {
            self.cache = Some(input.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("linear".into()))?;
        let (m, n) = (self.out_features(), self.in_features());
        if grad_output.len() != input.len() / n * m {
            return Err(TensorError::Config(format!(
                "linear grad {:?} does not match output",
                grad_output.dims()
            )));
        }
        let mut grad_input = vec![T::zero(); input.len()];
        let LayerParams {
            weights,
            grad_weights,
            grad_bias,
            ..
        } = &mut self.params;
        let w = weights.data();
        let gw = grad_weights.data_mut();
        let gb = grad_bias.data_mut();
        let x = input.data();
        let dy = grad_output.data();
        let batch = x.len() / n;
        for j in 0..m {
            let wj = &w[j * n..(j + 1) * n];
            let gwj = &mut gw[j * n..(j + 1) * n];
            for s in 0..batch {
                let g = dy[s * m + j];
                if g == T::zero() {
                    continue;
                }
                gb[j] = gb[j] + g;
                axpy(g, &x[s * n..(s + 1) * n], gwj);
                axpy(g, wj, &mut grad_input[s * n..(s + 1) * n]);
            }
        }
        let grad = Tensor::new(input.dims().to_vec(), grad_input)?;
        grad.ensure_finite("linear backward")?;
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

    fn layer(w: Vec<f64>, dims: [usize; 2], b: Vec<f64>) -> Linear<f64> {
        let params = LayerParams::new(
            Tensor::new(dims.to_vec(), w).unwrap(),
            Tensor::new(vec![dims[0]], b).unwrap(),
        );
        Linear::new(params).unwrap()
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut l = layer(vec![1.0, 0.0, 0.0, 1.0], [2, 2], vec![0.0, 0.0]);
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(l.forward(&x, Mode::Eval).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn row_vector_with_bias() {
        let mut l = layer(vec![1.0, 1.0], [1, 2], vec![1.0]);
        let x = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap();
        assert_eq!(l.forward(&x, Mode::Eval).unwrap().data(), &[6.0]);
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let mut l = layer(vec![1.0, 1.0], [1, 2], vec![1.0]);
        let x = Tensor::new(vec![3], vec![2.0, 3.0, 4.0]).unwrap();
        assert!(matches!(
            l.forward(&x, Mode::Eval),
            Err(TensorError::Config(_))
        ));
    }

    #[test]
    fn backward_without_forward_errors() {
        let mut l = layer(vec![1.0, 1.0], [1, 2], vec![1.0]);
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(matches!(
            l.backward(&g),
            Err(TensorError::NoForwardCache(_))
        ));
    }
}
