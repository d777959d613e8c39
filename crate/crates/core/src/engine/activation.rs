use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn infer<T: Scalar>(&self, input: &Tensor<T>) -> Tensor<T> {
        let data = input.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        Tensor::from_vec(input.shape(), data).expect("same shape")
    }

    pub fn forward_train<T: Scalar>(&mut self, input: &Tensor<T>) -> Tensor<T> {
        self.cache = Some(input.data().iter().map(|&v| v > T::zero()).collect());
        self.infer(input)
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.cache.take().ok_or(Error::NoForwardState)?;
        if mask.len() != grad_out.len() {
            return Err(Error::shape("relu gradient size differs from forward input"));
        }
        let data = grad_out.data().iter().zip(&mask).map(|(&g, &m)| if m { g } else { T::zero() }).collect();
        Tensor::from_vec(grad_out.shape(), data)
    }

    pub(crate) fn cached_mask(&self) -> Option<&[bool]> {
        self.cache.as_deref()
    }
}

/// Softmax over the last axis of `[B, K]`, computed with max-subtraction.
pub struct Softmax<T: Scalar> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Clone for Softmax<T> {
    fn clone(&self) -> Self {
        Softmax { cache: None }
    }
}

impl<T: Scalar> Default for Softmax<T> {
    fn default() -> Self {
        Softmax { cache: None }
    }
}

impl<T: Scalar> Softmax<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.shape().len() != 2 {
            return Err(Error::shape(format!("softmax expects [B, K], got {:?}", input.shape())));
        }
        if input.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let k = input.shape()[1];
        let mut out = input.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Tensor::from_vec(input.shape(), out)
    }

    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.cache = Some(y.clone());
        Ok(y)
    }

    /// Probabilities of the last train-mode forward pass.
    pub fn cached_output(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref()
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let p = self.cache.take().ok_or(Error::NoForwardState)?;
        if p.shape() != grad_out.shape() {
            return Err(Error::shape("softmax gradient shape differs from forward output"));
        }
        let k = p.shape()[1];
        let mut dx = vec![T::zero(); p.len()];
        for ((d, pr), gr) in dx.chunks_exact_mut(k).zip(p.data().chunks_exact(k)).zip(grad_out.data().chunks_exact(k)) {
            let dot: T = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..k {
                d[j] = pr[j] * (gr[j] - dot);
            }
        }
        Tensor::from_vec(p.shape(), dx)
    }
}
