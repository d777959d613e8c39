use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fully-connected layer; flattens everything after the batch axis.
pub struct FullyConnected<T: Scalar> {
    /// `[units, in_features]`
    pub weight: Tensor<T>,
    /// `[units]`
    pub bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Clone for FullyConnected<T> {
    fn clone(&self) -> Self {
        FullyConnected { weight: self.weight.clone(), bias: self.bias.clone(), cache: None }
    }
}

impl<T: Scalar> FullyConnected<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::shape(format!(
                "fully-connected parameters {:?}/{:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(FullyConnected { weight, bias, cache: None })
    }

    pub fn units(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        let m: usize = sample.iter().product();
        if m != self.in_features() {
            return Err(Error::shape(format!(
                "fully-connected layer takes {} features, got {sample:?}",
                self.in_features()
            )));
        }
        Ok(vec![self.units()])
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let b = input.batch();
        let m = self.in_features();
        let u = self.units();
        if input.sample_len() != m {
            return Err(Error::shape(format!("fully-connected input {:?}", input.shape())));
        }
        let mut y = Vec::with_capacity(b * u);
        for _ in 0..b {
            y.extend_from_slice(self.bias.data());
        }
        gemm(b, m, u, T::one(), input.data(), false, self.weight.data(), true, T::one(), &mut y);
        Tensor::from_vec(&[b, u], y)
    }

    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.cache = Some(input.clone());
        Ok(y)
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let x = self.cache.take().ok_or(Error::NoForwardState)?;
        let b = x.batch();
        let m = self.in_features();
        let u = self.units();
        if grad_out.shape() != [b, u] {
            return Err(Error::shape(format!("fully-connected gradient {:?}", grad_out.shape())));
        }
        let g = grad_out.data();
        gemm(u, b, m, T::one(), g, true, x.data(), false, T::one(), grads[0].data_mut());
        let db = grads[1].data_mut();
        for j in 0..u {
            let s: f64 = (0..b).map(|i| g[i * u + j].f64()).sum();
            db[j] = db[j] + T::of(s);
        }
        if !need_input_grad {
            return Ok(None);
        }
        let mut dx = vec![T::zero(); b * m];
        gemm(b, u, m, T::one(), g, false, self.weight.data(), false, T::zero(), &mut dx);
        Ok(Some(Tensor::from_vec(x.shape(), dx)?))
    }
}
