//! Finite-difference verification of every tensorkit layer in 64-bit mode.

use midpose_core::tensorkit::{
    grad_check, BatchNorm, Conv2d, Dropout, GradCheckFailure, Layer, LayerParams, Linear, Mode,
    Relu, Softmax, Tensor, TensorError, UpsampleBilinear,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const SEEDS: std::ops::Range<u64> = 0..10;

fn random_input(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

/// Keeps every value at least 0.05 away from the ReLU kink.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random::<bool>() {
            v
        } else {
            -v
        }
    })
}

#[test]
fn conv2d_passes_on_ten_seeds() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv2d::<f64>::init(3, 2, 4, 1, 1, &mut rng);
        let mut conv = conv;
        conv.params.bias = random_input(&[4], &mut rng);
        let x = random_input(&[1, 8, 8, 2], &mut rng);
        let report = grad_check(&conv, &x, Mode::Train, TOL, seed).unwrap();
        assert!(report.checked > 8 * 8 * 2 + 72);
    }
}

#[test]
fn strided_padded_conv_passes() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let conv = Conv2d::<f64>::init(5, 3, 2, 4, 2, &mut rng);
        let x = random_input(&[2, 9, 9, 3], &mut rng);
        grad_check(&conv, &x, Mode::Train, TOL, seed).unwrap();
    }
}

#[test]
fn linear_passes_on_ten_seeds() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fc = Linear::<f64>::init(16, 8, 1.0, &mut rng);
        fc.params.bias = random_input(&[8], &mut rng);
        let x = random_input(&[3, 16], &mut rng);
        grad_check(&fc, &x, Mode::Train, TOL, seed).unwrap();
    }
}

#[test]
fn batchnorm_passes_in_both_modes() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bn = BatchNorm::<f64>::new(3);
        bn.params.weights = Tensor::from_fn(&[3], |_| rng.random_range(0.5..2.0));
        bn.params.bias = random_input(&[3], &mut rng);
        let x = random_input(&[4, 3], &mut rng);
        grad_check(&bn, &x, Mode::Train, TOL, seed).unwrap();
        grad_check(&bn, &x, Mode::Eval, TOL, seed).unwrap();
        let x4 = random_input(&[2, 3, 3, 3], &mut rng);
        grad_check(&bn, &x4, Mode::Train, TOL, seed).unwrap();
    }
}

#[test]
fn relu_dropout_softmax_pass() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = away_from_zero(&[3, 7], &mut rng);
        grad_check(&Relu::<f64>::new(), &x, Mode::Train, TOL, seed).unwrap();
        let drop = Dropout::<f64>::new(0.5, seed).unwrap();
        grad_check(&drop, &x, Mode::Train, TOL, seed).unwrap();
        grad_check(&Softmax::<f64>::new(), &x, Mode::Train, TOL, seed).unwrap();
    }
}

#[test]
fn upsample_passes_on_ten_seeds() {
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let up = UpsampleBilinear::new(7, 9);
        let x = random_input(&[2, 3, 4, 2], &mut rng);
        grad_check(&up, &x, Mode::Train, TOL, seed).unwrap();
    }
}

/// Linear layer whose backward pass returns the negated input gradient.
#[derive(Clone)]
struct SignFlipped(Linear<f64>);

impl Layer<f64> for SignFlipped {
    fn kind(&self) -> &'static str {
        "sign_flipped"
    }
    fn forward(&mut self, input: &Tensor<f64>, mode: Mode) -> Result<Tensor<f64>, TensorError> {
        self.0.forward(input, mode)
    }
    fn backward(&mut self, grad_output: &Tensor<f64>) -> Result<Tensor<f64>, TensorError> {
        let mut g = self.0.backward(grad_output)?;
        g.data_mut().iter_mut().for_each(|v| *v = -*v);
        Ok(g)
    }
    fn params(&self) -> Option<&LayerParams<f64>> {
        self.0.params()
    }
    fn params_mut(&mut self) -> Option<&mut LayerParams<f64>> {
        self.0.params_mut()
    }
}

#[test]
fn corrupted_backward_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layer = SignFlipped(Linear::init(6, 4, 1.0, &mut rng));
    let x = random_input(&[2, 6], &mut rng);
    match grad_check(&layer, &x, Mode::Train, TOL, 7) {
        Err(GradCheckFailure::Exceeded { report, .. }) => {
            let worst = report.worst.expect("worst coordinate reported");
            assert!(worst.rel_error > 1.0, "{worst}");
        }
        other => panic!("sign flip not detected: {other:?}"),
    }
}
