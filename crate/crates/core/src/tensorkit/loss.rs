use super::{softmax, Scalar, Tensor, TensorError};

/// Clamp applied to probabilities before taking logarithms in BCE.
pub const BCE_EPSILON: f64 = 1e-7;

/// `-log softmax(logits)[target]`, computed with log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &[T], target: usize) -> Result<T, TensorError> {
    if target >= logits.len() {
        return Err(TensorError::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    Ok(lse - logits[target])
}

/// Mean cross-entropy over a `[batch, K]` logit tensor and the gradient
/// `(softmax - onehot) / batch` with respect to the logits.
pub fn cross_entropy_batch<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<(T, Tensor<T>), TensorError> {
    let k = *logits.dims().last().expect("non-empty dims");
    let batch = logits.len() / k;
    if targets.len() != batch {
        return Err(TensorError::Config(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }
    let inv_b = T::of(1.0 / batch as f64);
    let mut total = T::zero();
    let mut grad = logits.clone();
    for (row, &t) in grad.data_mut().chunks_exact_mut(k).zip(targets) {
        total = total + cross_entropy(row, t)?;
        let p = softmax(row);
        for (j, (g, pj)) in row.iter_mut().zip(p).enumerate() {
            let onehot = if j == t { T::one() } else { T::zero() };
            *g = (pj - onehot) * inv_b;
        }
    }
    Ok((total * inv_b, grad))
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy of one prediction against a 0/1 target, with the
/// prediction clamped to `[eps, 1 - eps]`.
pub fn bce<T: Scalar>(prediction: T, target: T) -> T {
    let eps = T::of(BCE_EPSILON);
    let y = prediction.max(eps).min(T::one() - eps);
    -(target * y.ln() + (T::one() - target) * (T::one() - y).ln())
}

/// Batch-mean BCE over `(prediction, target)` pairs.
pub fn bce_batch<T: Scalar>(pairs: &[(T, T)]) -> T {
    if pairs.is_empty() {
        return T::zero();
    }
    let total: T = pairs.iter().map(|&(y, t)| bce(y, t)).sum();
    total / T::of(pairs.len() as f64)
}

/// Mean BCE of `sigmoid(logits)` and its gradient with respect to the logits,
/// `(sigmoid(z) - target) / n`.
pub fn bce_from_logits<T: Scalar>(logits: &[T], targets: &[T]) -> Result<(T, Vec<T>), TensorError> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(TensorError::Config(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let inv_n = T::of(1.0 / logits.len() as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &t) in logits.iter().zip(targets) {
        let y = sigmoid(z);
        total = total + bce(y, t);
        grad.push((y - t) * inv_n);
    }
    Ok((total * inv_n, grad))
}
