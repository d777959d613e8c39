use rand::Rng;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; inference is the
/// identity.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub rate: f64,
    cache: Option<Option<Vec<bool>>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidLayer(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate, cache: None })
    }

    pub fn infer<T: Scalar>(&self, input: &Tensor<T>) -> Tensor<T> {
        input.clone()
    }

    pub fn forward_train<T: Scalar>(&mut self, input: &Tensor<T>, seed: u64) -> Tensor<T> {
        if self.rate == 0.0 {
            self.cache = Some(None);
            return input.clone();
        }
        let mut rng = seed::rng(seed);
        let keep: Vec<bool> = (0..input.len()).map(|_| rng.random::<f64>() >= self.rate).collect();
        let scale = T::of(1.0 / (1.0 - self.rate));
        let data = input
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        self.cache = Some(Some(keep));
        Tensor::from_vec(input.shape(), data).expect("same shape")
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        match self.cache.take().ok_or(Error::NoForwardState)? {
            None => Ok(grad_out.clone()),
            Some(keep) => {
                if keep.len() != grad_out.len() {
                    return Err(Error::shape("dropout gradient size differs from forward input"));
                }
                let scale = T::of(1.0 / (1.0 - self.rate));
                let data = grad_out
                    .data()
                    .iter()
                    .zip(&keep)
                    .map(|(&g, &k)| if k { g * scale } else { T::zero() })
                    .collect();
                Tensor::from_vec(grad_out.shape(), data)
            }
        }
    }
}
