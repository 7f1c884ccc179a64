use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Mode, Scalar, Tensor, TensorError};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = if *v > T::zero() { *v } else { T::zero() });
    out
}

/// Numerically stable softmax of one logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let k = *input.dims().last().expect("non-empty dims");
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let s = softmax(row);
        row.copy_from_slice(&s);
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T: Scalar = f32> {
    mask: Option<(Vec<usize>, Vec<bool>)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self {
            mask: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for Relu<T> {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let out = relu(input);
        out.ensure_finite("relu forward")?;
        if mode == Mode::Train {
            let mask = input.data().iter().map(|&v| v > T::zero()).collect();
            self.mask = Some((input.dims().to_vec(), mask));
        }
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (dims, mask) = self
            .mask
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("relu".into()))?;
        if grad_output.dims() != dims.as_slice() {
            return Err(TensorError::Config("relu grad shape mismatch".into()));
        }
        let data = grad_output
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { T::zero() })
            .collect();
        Tensor::new(dims, data)
    }
}

/// Inverted dropout. Train mode zeroes each value with probability `p` and
/// scales survivors by `1 / (1 - p)`; eval mode is the identity.
///
/// The mask stream is a seeded ChaCha generator advanced once per train-mode
/// forward call, so identical seeds reproduce identical masks.
#[derive(Clone, Debug)]
pub struct Dropout<T: Scalar = f32> {
    pub p: f64,
    rng: ChaCha8Rng,
    mask: Option<(Vec<usize>, Vec<T>)>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(p: f64, seed: u64) -> Result<Self, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!("dropout p={p} outside [0, 1)")));
        }
        Ok(Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        })
    }
}

impl<T: Scalar> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        if mode == Mode::Eval || self.p == 0.0 {
            if mode == Mode::Train {
                self.mask = Some((input.dims().to_vec(), vec![T::one(); input.len()]));
            }
            return Ok(input.clone());
        }
        let scale = T::of(1.0 / (1.0 - self.p));
        let mask: Vec<T> = (0..input.len())
            .map(|_| {
                if self.rng.random::<f64>() < self.p {
                    T::zero()
                } else {
                    scale
                }
            })
            .collect();
        let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.mask = Some((input.dims().to_vec(), mask));
        Tensor::new(input.dims().to_vec(), data)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (dims, mask) = self
            .mask
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("dropout".into()))?;
        if grad_output.dims() != dims.as_slice() {
            return Err(TensorError::Config("dropout grad shape mismatch".into()));
        }
        let data = grad_output.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
        Tensor::new(dims, data)
    }
}

/// Row-wise softmax as a layer (Jacobian-vector product in backward).
#[derive(Clone, Debug, Default)]
pub struct Softmax<T: Scalar = f32> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Softmax<T> {
    pub fn new() -> Self {
        Self { output: None }
    }
}

impl<T: Scalar> Layer<T> for Softmax<T> {
    fn kind(&self) -> &'static str {
        "softmax"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let out = softmax_rows(input);
        out.ensure_finite("softmax forward")?;
        if mode == Mode::Train {
            self.output = Some(out.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let out = self
            .output
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("softmax".into()))?;
        if grad_output.dims() != out.dims() {
            return Err(TensorError::Config("softmax grad shape mismatch".into()));
        }
        let k = *out.dims().last().expect("non-empty dims");
        let mut grad = grad_output.clone();
        for (grow, srow) in grad.data_mut().chunks_exact_mut(k).zip(out.data().chunks_exact(k)) {
            let inner: T = grow.iter().zip(srow).map(|(&g, &s)| g * s).sum();
            for (g, &s) in grow.iter_mut().zip(srow) {
                *g = s * (*g - inner);
            }
        }
        Ok(grad)
    }
}

/// Collapses `[batch, ...]` to `[batch, features]`.
#[derive(Clone, Debug, Default)]
pub struct Flatten {
    dims: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self { dims: None }
    }
}

impl<T: Scalar> Layer<T> for Flatten {
    fn kind(&self) -> &'static str {
        "flatten"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, TensorError> {
        let b = input.batch();
        if mode == Mode::Train {
            self.dims = Some(input.dims().to_vec());
        }
        input.clone().reshape(&[b, input.len() / b])
    }

    fn backward(&mut self, grad_output: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let dims = self
            .dims
            .take()
            .ok_or_else(|| TensorError::NoForwardCache("flatten".into()))?;
        grad_output.clone().reshape(&dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::new(vec![2], vec![-1.0f32, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let s = softmax(&[1000.0f64, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_p_is_identity_in_train_mode() {
        for seed in [0, 1, 99] {
            let mut d = Dropout::<f32>::new(0.0, seed).unwrap();
            let x = Tensor::from_fn(&[4, 5], |i| i as f32 - 7.0);
            assert_eq!(d.forward(&x, Mode::Train).unwrap(), x);
        }
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut d = Dropout::<f32>::new(0.5, 3).unwrap();
        let x = Tensor::from_fn(&[4, 5], |i| i as f32);
        assert_eq!(d.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn dropout_train_zeroes_or_scales() {
        let mut d = Dropout::<f64>::new(0.5, 3).unwrap();
        let x = Tensor::filled(&[1, 2000], 1.0);
        let y = d.forward(&x, Mode::Train).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!((800..1200).contains(&zeros), "zeros={zeros}");
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        assert!(Dropout::<f32>::new(1.0, 0).is_err());
    }
}
