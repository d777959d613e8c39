//! 3D convolution (cross-correlation, no kernel flip) via im2col + GEMM.

use rayon::prelude::*;

use super::scalar::{gemm, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Samples per weight-gradient accumulation group. Groups are summed in
/// order, so results do not depend on the thread count.
const GRAD_GROUP: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub size: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.stride == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidLayer(format!("bad convolution geometry {self:?}")));
        }
        Ok(())
    }

    /// Output spatial extent for one input axis.
    pub fn out_len(&self, n: usize) -> Result<usize> {
        let padded = n + 2 * self.pad;
        if padded < self.size {
            return Err(Error::shape(format!(
                "kernel {} exceeds padded input extent {padded}",
                self.size
            )));
        }
        Ok((padded - self.size) / self.stride + 1)
    }

    pub fn out_spatial(&self, spatial: [usize; 3]) -> Result<[usize; 3]> {
        Ok([self.out_len(spatial[0])?, self.out_len(spatial[1])?, self.out_len(spatial[2])?])
    }

    /// Rows of the im2col matrix, `c_in * k^3`.
    pub fn patch_rows(&self) -> usize {
        self.in_channels * self.size * self.size * self.size
    }
}

/// Expands one sample `[c_in, d, h, w]` into a `[c_in*k^3, d'*h'*w']`
/// column matrix.
pub(crate) fn im2col<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    spatial: [usize; 3],
    out: [usize; 3],
    col: &mut [T],
) {
    let [d, h, w] = spatial;
    let [od, oh, ow] = out;
    let k = g.size;
    let p = od * oh * ow;
    let pad = g.pad as isize;
    let s = g.stride as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let chan = &input[ci * d * h * w..(ci + 1) * d * h * w];
        for tz in 0..k as isize {
            for ty in 0..k as isize {
                for tx in 0..k as isize {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut i = 0;
                    for z in 0..od as isize {
                        let iz = z * s + tz - pad;
                        for y in 0..oh as isize {
                            let iy = y * s + ty - pad;
                            let line = &mut dst[i..i + ow];
                            i += ow;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let base = ((iz as usize * h) + iy as usize) * w;
                            for (x, v) in line.iter_mut().enumerate() {
                                let ix = x as isize * s + tx - pad;
                                *v = if ix < 0 || ix >= w as isize {
                                    T::zero()
                                } else {
                                    chan[base + ix as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatters a column-gradient matrix back onto the input layout (adds).
pub(crate) fn col2im<T: Scalar>(
    g: &ConvGeometry,
    col: &[T],
    spatial: [usize; 3],
    out: [usize; 3],
    dx: &mut [T],
) {
    let [d, h, w] = spatial;
    let [od, oh, ow] = out;
    let k = g.size;
    let p = od * oh * ow;
    let pad = g.pad as isize;
    let s = g.stride as isize;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let chan = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for tz in 0..k as isize {
            for ty in 0..k as isize {
                for tx in 0..k as isize {
                    let src = &col[row * p..(row + 1) * p];
                    let mut i = 0;
                    for z in 0..od as isize {
                        let iz = z * s + tz - pad;
                        for y in 0..oh as isize {
                            let iy = y * s + ty - pad;
                            let line = &src[i..i + ow];
                            i += ow;
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = ((iz as usize * h) + iy as usize) * w;
                            for (x, v) in line.iter().enumerate() {
                                let ix = x as isize * s + tx - pad;
                                if ix >= 0 && ix < w as isize {
                                    chan[base + ix as usize] = chan[base + ix as usize] + *v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn spatial_of(shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 5 {
        return Err(Error::shape(format!("conv3d expects [B, C, D, H, W], got {shape:?}")));
    }
    Ok([shape[2], shape[3], shape[4]])
}

struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: Vec<usize>,
    out_spatial: [usize; 3],
}

pub struct Conv3d<T: Scalar> {
    pub geometry: ConvGeometry,
    /// `[c_out, c_in, k, k, k]`
    pub weight: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Clone for Conv3d<T> {
    fn clone(&self) -> Self {
        Conv3d { geometry: self.geometry, weight: self.weight.clone(), bias: self.bias.clone(), cache: None }
    }
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(geometry: ConvGeometry, weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        geometry.validate()?;
        let k = geometry.size;
        let wshape = [geometry.out_channels, geometry.in_channels, k, k, k];
        if weight.shape() != wshape || bias.shape() != [geometry.out_channels] {
            return Err(Error::shape(format!(
                "conv3d parameters {:?}/{:?} do not match geometry {geometry:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Conv3d { geometry, weight, bias, cache: None })
    }

    pub fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        if sample.len() != 4 || sample[0] != self.geometry.in_channels {
            return Err(Error::shape(format!(
                "conv3d with {} input channels cannot take {sample:?}",
                self.geometry.in_channels
            )));
        }
        let o = self.geometry.out_spatial([sample[1], sample[2], sample[3]])?;
        Ok(vec![self.geometry.out_channels, o[0], o[1], o[2]])
    }

    fn run(&self, input: &Tensor<T>, keep_cols: bool) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
        let spatial = spatial_of(input.shape())?;
        let g = &self.geometry;
        if input.shape()[1] != g.in_channels {
            return Err(Error::shape(format!(
                "conv3d expects {} channels, got {}",
                g.in_channels,
                input.shape()[1]
            )));
        }
        let out = g.out_spatial(spatial)?;
        let b = input.batch();
        let p = out[0] * out[1] * out[2];
        let kr = g.patch_rows();
        let co = g.out_channels;
        let in_len = input.sample_len();
        let mut y = vec![T::zero(); b * co * p];
        let mut cols = if keep_cols { vec![T::zero(); b * kr * p] } else { Vec::new() };
        let w = self.weight.data();
        let bias = self.bias.data();
        let x = input.data();
        let body = |bi: usize, y_b: &mut [T], col: &mut [T]| {
            im2col(g, &x[bi * in_len..(bi + 1) * in_len], spatial, out, col);
            for (o, row) in y_b.chunks_exact_mut(p).enumerate() {
                row.fill(bias[o]);
            }
            gemm(co, kr, p, T::one(), w, false, col, false, T::one(), y_b);
        };
        if keep_cols {
            y.par_chunks_mut(co * p)
                .zip(cols.par_chunks_mut(kr * p))
                .enumerate()
                .for_each(|(bi, (y_b, col))| body(bi, y_b, col));
        } else {
            y.par_chunks_mut(co * p).enumerate().for_each_init(
                || vec![T::zero(); kr * p],
                |col, (bi, y_b)| body(bi, y_b, col),
            );
        }
        let output = Tensor::from_vec(&[b, co, out[0], out[1], out[2]], y)?;
        let cache = keep_cols.then(|| ConvCache { cols, in_shape: input.shape().to_vec(), out_spatial: out });
        Ok((output, cache))
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(input, false)?.0)
    }

    pub fn forward_train(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, cache) = self.run(input, true)?;
        self.cache = cache;
        Ok(y)
    }

    /// Accumulates `[dW, db]` into `grads` and returns the input gradient
    /// when `need_input_grad`.
    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        grads: &mut [Tensor<T>],
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let cache = self.cache.take().ok_or(Error::NoForwardState)?;
        let g = self.geometry;
        let b = cache.in_shape[0];
        let out = cache.out_spatial;
        let p = out[0] * out[1] * out[2];
        let kr = g.patch_rows();
        let co = g.out_channels;
        if grad_out.shape() != [b, co, out[0], out[1], out[2]] {
            return Err(Error::shape(format!("conv3d gradient shape {:?}", grad_out.shape())));
        }
        let gy = grad_out.data();

        // bias: sum over batch and positions, f64 accumulation
        let (dw_all, db_all) = grads.split_at_mut(1);
        let db = db_all[0].data_mut();
        for o in 0..co {
            let mut s = 0.0f64;
            for bi in 0..b {
                s += gy[(bi * co + o) * p..(bi * co + o + 1) * p].iter().map(|v| v.f64()).sum::<f64>();
            }
            db[o] = db[o] + T::of(s);
        }

        // weights: per-group partial sums, reduced in group order
        let wlen = co * kr;
        let groups: Vec<Vec<T>> = (0..b.div_ceil(GRAD_GROUP))
            .into_par_iter()
            .map(|gi| {
                let mut acc = vec![T::zero(); wlen];
                for bi in gi * GRAD_GROUP..((gi + 1) * GRAD_GROUP).min(b) {
                    let gy_b = &gy[bi * co * p..(bi + 1) * co * p];
                    let col = &cache.cols[bi * kr * p..(bi + 1) * kr * p];
                    gemm(co, p, kr, T::one(), gy_b, false, col, true, T::one(), &mut acc);
                }
                acc
            })
            .collect();
        let dw = dw_all[0].data_mut();
        for acc in &groups {
            for (d, a) in dw.iter_mut().zip(acc) {
                *d = *d + *a;
            }
        }

        if !need_input_grad {
            return Ok(None);
        }
        let spatial = [cache.in_shape[2], cache.in_shape[3], cache.in_shape[4]];
        let in_len = g.in_channels * spatial[0] * spatial[1] * spatial[2];
        let mut dx = vec![T::zero(); b * in_len];
        let w = self.weight.data();
        dx.par_chunks_mut(in_len).enumerate().for_each_init(
            || vec![T::zero(); kr * p],
            |dcol, (bi, dx_b)| {
                let gy_b = &gy[bi * co * p..(bi + 1) * co * p];
                gemm(kr, co, p, T::one(), w, true, gy_b, false, T::zero(), dcol);
                col2im(&g, dcol, spatial, out, dx_b);
            },
        );
        Ok(Some(Tensor::from_vec(&cache.in_shape, dx)?))
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

/// Direct (loop) convolution of a single sample; reference for tests.
#[cfg(test)]
pub(crate) fn conv3d_direct(
    g: &ConvGeometry,
    input: &[f64],
    spatial: [usize; 3],
    weight: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let out = g.out_spatial(spatial).unwrap();
    let [d, h, w] = spatial;
    let k = g.size;
    let mut y = vec![0.0; g.out_channels * out[0] * out[1] * out[2]];
    let mut idx = 0;
    for o in 0..g.out_channels {
        for z in 0..out[0] {
            for yy in 0..out[1] {
                for x in 0..out[2] {
                    let mut s = bias[o];
                    for ci in 0..g.in_channels {
                        for tz in 0..k {
                            for ty in 0..k {
                                for tx in 0..k {
                                    let iz = (z * g.stride + tz) as isize - g.pad as isize;
                                    let iy = (yy * g.stride + ty) as isize - g.pad as isize;
                                    let ix = (x * g.stride + tx) as isize - g.pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let wi = (((o * g.in_channels + ci) * k + tz) * k + ty) * k + tx;
                                    let xi = ((ci * d + iz as usize) * h + iy as usize) * w + ix as usize;
                                    s += weight[wi] * input[xi];
                                }
                            }
                        }
                    }
                    y[idx] = s;
                    idx += 1;
                }
            }
        }
    }
    y
}
