use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over `[B, C, ...]`.
///
/// Train mode normalizes with the (biased) batch statistics and folds them
/// into the running estimates as `running = momentum * running + (1 -
/// momentum) * batch`; infer mode uses the running estimates.
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: f64,
    pub momentum: f64,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    x_hat: Vec<T>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl<T: Scalar> Clone for BatchNorm<T> {
    fn clone(&self) -> Self {
        BatchNorm {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            epsilon: self.epsilon,
            momentum: self.momentum,
            cache: None,
        }
    }
}

fn layout(shape: &[usize], channels: usize) -> Result<(usize, usize)> {
    if shape.len() < 2 || shape[1] != channels {
        return Err(Error::shape(format!("batch norm over {channels} channels got {shape:?}")));
    }
    Ok((shape[0], shape[2..].iter().product()))
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::filled(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], T::one()),
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        if sample.first() != Some(&self.channels()) {
            return Err(Error::shape(format!("batch norm over {} channels got {sample:?}", self.channels())));
        }
        Ok(sample.to_vec())
    }

    /// Inference transform folded to `y = scale * x + shift` per channel.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            let s = self.gamma.data()[c].f64() / (self.running_var.data()[c].f64() + self.epsilon).sqrt();
            scale.push(T::of(s));
            shift.push(T::of(self.beta.data()[c].f64() - self.running_mean.data()[c].f64() * s));
        }
        (scale, shift)
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, s) = layout(input.shape(), self.channels())?;
        let (scale, shift) = self.affine();
        let c = self.channels();
        let mut y = input.data().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                for v in &mut y[(bi * c + ch) * s..(bi * c + ch + 1) * s] {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        }
        Tensor::from_vec(input.shape(), y)
    }

    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (b, s) = layout(input.shape(), self.channels())?;
        if b < 2 {
            return Err(Error::SingleSampleTrainBatch);
        }
        let c = self.channels();
        let n = (b * s) as f64;
        let x = input.data();
        let mut x_hat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for bi in 0..b {
                sum += x[(bi * c + ch) * s..(bi * c + ch + 1) * s].iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / n;
            let mut ss = 0.0;
            for bi in 0..b {
                ss += x[(bi * c + ch) * s..(bi * c + ch + 1) * s]
                    .iter()
                    .map(|v| (v.f64() - mean) * (v.f64() - mean))
                    .sum::<f64>();
            }
            let var = ss / n;
            let is = 1.0 / (var + self.epsilon).sqrt();
            inv_std[ch] = is;
            let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
            for bi in 0..b {
                let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                for (i, v) in x[r.clone()].iter().enumerate() {
                    let h = T::of((v.f64() - mean) * is);
                    x_hat[r.start + i] = h;
                    y[r.start + i] = g * h + be;
                }
            }
            let m = self.momentum;
            let rm = &mut self.running_mean.data_mut()[ch];
            *rm = T::of(m * rm.f64() + (1.0 - m) * mean);
            let rv = &mut self.running_var.data_mut()[ch];
            *rv = T::of(m * rv.f64() + (1.0 - m) * var);
        }
        self.cache = Some(BnCache { x_hat, inv_std, shape: input.shape().to_vec() });
        Tensor::from_vec(input.shape(), y)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, grads: &mut [Tensor<T>]) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoForwardState)?;
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::shape("batch norm gradient shape differs from forward input"));
        }
        let (b, s) = layout(&cache.shape, self.channels())?;
        let c = self.channels();
        let n = (b * s) as f64;
        let g = grad_out.data();
        let mut dx = vec![T::zero(); g.len()];
        for ch in 0..c {
            let (mut dbeta, mut dgamma) = (0.0, 0.0);
            for bi in 0..b {
                let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                for (gv, hv) in g[r.clone()].iter().zip(&cache.x_hat[r]) {
                    dbeta += gv.f64();
                    dgamma += gv.f64() * hv.f64();
                }
            }
            let k = self.gamma.data()[ch].f64() * cache.inv_std[ch] / n;
            for bi in 0..b {
                let r = (bi * c + ch) * s..(bi * c + ch + 1) * s;
                for i in r {
                    dx[i] = T::of(k * (n * g[i].f64() - dbeta - cache.x_hat[i].f64() * dgamma));
                }
            }
            grads[0].data_mut()[ch] = grads[0].data()[ch] + T::of(dgamma);
            grads[1].data_mut()[ch] = grads[1].data()[ch] + T::of(dbeta);
        }
        Tensor::from_vec(&cache.shape, dx)
    }
}
