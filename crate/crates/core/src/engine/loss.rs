//! Mean categorical cross-entropy over a batch of two-class probabilities.

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-7;

fn check<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<usize> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::shape(format!("probabilities {s:?} for {} labels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= s[1]) {
        return Err(Error::shape(format!("label {l} for {} classes", s[1])));
    }
    Ok(s[1])
}

/// `mean(-ln(clamp(p[label], 1e-7, 1 - 1e-7)))`.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<f64> {
    let k = check(probs, labels)?;
    Ok(per_sample_losses(probs.data(), k, labels).sum::<f64>() / labels.len() as f64)
}

pub(crate) fn per_sample_losses<'a, T: Scalar>(
    probs: &'a [T],
    k: usize,
    labels: &'a [u8],
) -> impl Iterator<Item = f64> + 'a {
    labels.iter().enumerate().map(move |(i, &l)| {
        let p = probs[i * k + l as usize].f64().clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        -p.ln()
    })
}

/// Gradient of [`cross_entropy_loss`] with respect to the probabilities.
/// Clamped entries have zero gradient.
pub fn cross_entropy_grad<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    let k = check(probs, labels)?;
    let b = labels.len() as f64;
    let mut g = vec![T::zero(); probs.len()];
    for (i, &l) in labels.iter().enumerate() {
        let j = i * k + l as usize;
        let p = probs.data()[j].f64();
        if p > PROB_FLOOR && p < 1.0 - PROB_FLOOR {
            g[j] = T::of(-1.0 / (b * p));
        }
    }
    Tensor::from_vec(probs.shape(), g)
}
