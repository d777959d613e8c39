use rayon::prelude::*;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// 3D max pooling. Ties resolve to the first (lowest flat index) element
/// of the window, so the backward routing is deterministic.
#[derive(Clone, Debug)]
pub struct MaxPool3d {
    pub size: usize,
    pub stride: usize,
    cache: Option<PoolCache>,
}

#[derive(Clone, Debug)]
struct PoolCache {
    in_shape: Vec<usize>,
    /// Per output element, the flat index of its maximum within the input
    /// channel volume.
    argmax: Vec<u32>,
}

impl MaxPool3d {
    pub fn new(size: usize, stride: usize) -> Result<Self> {
        if size == 0 || stride == 0 {
            return Err(Error::InvalidLayer(format!("max-pool size {size} stride {stride}")));
        }
        Ok(MaxPool3d { size, stride, cache: None })
    }

    fn out_len(&self, n: usize) -> Result<usize> {
        if n < self.size {
            return Err(Error::shape(format!("pool window {} exceeds extent {n}", self.size)));
        }
        Ok((n - self.size) / self.stride + 1)
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        if sample.len() != 4 {
            return Err(Error::shape(format!("max-pool expects [C, D, H, W], got {sample:?}")));
        }
        Ok(vec![sample[0], self.out_len(sample[1])?, self.out_len(sample[2])?, self.out_len(sample[3])?])
    }

    /// Returns pooled output and argmax indices.
    pub fn forward_with_argmax<T: Scalar>(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
        let shape = input.shape();
        if shape.len() != 5 {
            return Err(Error::shape(format!("max-pool expects [B, C, D, H, W], got {shape:?}")));
        }
        let (b, c, d, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
        let out = self.output_shape(&shape[1..])?;
        let (od, oh, ow) = (out[1], out[2], out[3]);
        let op = od * oh * ow;
        let ip = d * h * w;
        let mut y = vec![T::zero(); b * c * op];
        let mut arg = vec![0u32; b * c * op];
        let x = input.data();
        let (k, s) = (self.size, self.stride);
        y.par_chunks_mut(op).zip(arg.par_chunks_mut(op)).enumerate().for_each(|(bc, (yo, ao))| {
            let xi = &x[bc * ip..(bc + 1) * ip];
            let mut o = 0;
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = ((z * s) * h + yy * s) * w + xx * s;
                        for dz in 0..k {
                            for dy in 0..k {
                                let row = ((z * s + dz) * h + yy * s + dy) * w + xx * s;
                                for dx in 0..k {
                                    let v = xi[row + dx];
                                    if v > best {
                                        best = v;
                                        best_i = row + dx;
                                    }
                                }
                            }
                        }
                        yo[o] = xi[best_i];
                        ao[o] = best_i as u32;
                        o += 1;
                    }
                }
            }
        });
        Ok((Tensor::from_vec(&[b, c, od, oh, ow], y)?, arg))
    }

    pub fn infer<T: Scalar>(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_argmax(input)?.0)
    }

    pub fn forward_train<T: Scalar>(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, argmax) = self.forward_with_argmax(input)?;
        self.cache = Some(PoolCache { in_shape: input.shape().to_vec(), argmax });
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::NoForwardState)?;
        if grad_out.len() != cache.argmax.len() {
            return Err(Error::shape("max-pool gradient size differs from forward output"));
        }
        let s = &cache.in_shape;
        let ip = s[2] * s[3] * s[4];
        let op = grad_out.sample_len() / s[1];
        let mut dx = vec![T::zero(); s.iter().product()];
        let g = grad_out.data();
        dx.par_chunks_mut(ip).enumerate().for_each(|(bc, dxi)| {
            for o in 0..op {
                let j = cache.argmax[bc * op + o] as usize;
                dxi[j] = dxi[j] + g[bc * op + o];
            }
        });
        Tensor::from_vec(s, dx)
    }

    /// Argmax indices of the last train-mode forward pass.
    pub(crate) fn cached_argmax(&self) -> Option<&[u32]> {
        self.cache.as_ref().map(|c| c.argmax.as_slice())
    }
}
