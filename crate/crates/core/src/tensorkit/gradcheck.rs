use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{Layer, Mode, Tensor, TensorError};

/// Central-difference step.
const STEP: f64 = 1e-5;
/// Denominator floor so coordinates with vanishing gradients do not report
/// huge relative errors from round-off alone.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Input,
    Weight,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCoordinate {
    pub kind: ParamKind,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl fmt::Display for GradCoordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
            self.kind, self.index, self.analytic, self.numeric, self.rel_error
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst: Option<GradCoordinate>,
    pub checked: usize,
}

#[derive(Debug, Error)]
pub enum GradCheckFailure {
    #[error("gradient check exceeded tolerance {tolerance:e}; worst {}", .report.worst.map(|w| w.to_string()).unwrap_or_default())]
    Exceeded { tolerance: f64, report: GradReport },
    #[error("layer failed during gradient check: {0}")]
    Layer(#[from] TensorError),
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients against central differences for every input
/// coordinate and every weight/bias of `layer`, using the scalar probe loss
/// `sum(R * layer(x))` with a fixed random `R`.
///
/// The layer is cloned before every evaluation, so stateful layers (dropout
/// masks, running statistics) see identical state on each probe.
pub fn grad_check<L: Layer<f64> + Clone>(
    layer: &L,
    input: &Tensor<f64>,
    mode: Mode,
    tolerance: f64,
    seed: u64,
) -> Result<GradReport, GradCheckFailure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe_dims = layer.clone().forward(input, mode)?.dims().to_vec();
    let probe = Tensor::from_fn(&probe_dims, |_| rng.random_range(-1.0..1.0));
    let loss = |l: &mut L, x: &Tensor<f64>| -> Result<f64, TensorError> {
        let y = l.forward(x, mode)?;
        Ok(y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
    };

    let mut analytic_layer = layer.clone();
    if let Some(p) = analytic_layer.params_mut() {
        super::zero_grad(p);
    }
    analytic_layer.forward(input, mode)?;
    let grad_input = analytic_layer.backward(&probe)?;

    let mut coords = Vec::new();
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += STEP;
        let mut minus = input.clone();
        minus.data_mut()[i] -= STEP;
        let numeric = (loss(&mut layer.clone(), &plus)? - loss(&mut layer.clone(), &minus)?) / (2.0 * STEP);
        coords.push((ParamKind::Input, i, grad_input.data()[i], numeric));
    }

    if let Some(params) = analytic_layer.params() {
        let kinds = [
            (ParamKind::Weight, params.grad_weights.data().to_vec()),
            (ParamKind::Bias, params.grad_bias.data().to_vec()),
        ];
        for (kind, analytic) in kinds {
            for (i, &a) in analytic.iter().enumerate() {
                let perturbed = |delta: f64| -> Result<f64, TensorError> {
                    let mut l = layer.clone();
                    let p = l.params_mut().expect("layer has params");
                    let target = match kind {
                        ParamKind::Weight => &mut p.weights,
                        _ => &mut p.bias,
                    };
                    target.data_mut()[i] += delta;
                    loss(&mut l, input)
                };
                let numeric = (perturbed(STEP)? - perturbed(-STEP)?) / (2.0 * STEP);
                coords.push((kind, i, a, numeric));
            }
        }
    }

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: coords.len(),
    };
    for (kind, index, analytic, numeric) in coords {
        let e = rel_error(analytic, numeric);
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some(GradCoordinate {
                kind,
                index,
                analytic,
                numeric,
                rel_error: e,
            });
        }
    }
    if report.max_rel_error < tolerance {
        Ok(report)
    } else {
        Err(GradCheckFailure::Exceeded { tolerance, report })
    }
}
