//! CNET network checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "CNET" | version u16 = 1
//! input rank u32 | input dims u32 * rank
//! layer count u32
//! per layer: tag u8 | hyperparameters | tensor count u32 | tensors
//!   0 conv3d     maps, size, stride, pad (u32)   tensors: weight, bias
//!   1 maxpool3d  size, stride (u32)
//!   2 fc         units (u32)                     tensors: weight, bias
//!   3 batchnorm  epsilon, momentum (f64)         tensors: gamma, beta, running mean, running var
//!   4 dropout    rate (f64)
//!   5 relu
//!   6 softmax
//! tensor: rank u32 | dims u32 * rank | f32 payload
//! optimizer flag u8; when 1, E[g^2] and E[dx^2] tensors for every parameter
//! ```

use std::fs;
use std::path::Path;

use super::activation::{Relu, Softmax};
use super::adadelta::AdadeltaState;
use super::batchnorm::BatchNorm;
use super::conv::{Conv3d, ConvGeometry};
use super::dense::FullyConnected;
use super::dropout::Dropout;
use super::network::{Layer, Network};
use super::pool::MaxPool3d;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CNET";
pub const VERSION: u16 = 1;

const MAX_RANK: usize = 8;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        self.u32(t.shape().len());
        for &d in t.shape() {
            self.u32(d);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tensors(&mut self, ts: &[&Tensor<f32>]) {
        self.u32(ts.len());
        for t in ts {
            self.tensor(t);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::BadCheckpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(bad(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u32()?;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = self.u32()?;
            n = n.checked_mul(d).filter(|&n| n <= self.bytes.len()).ok_or_else(|| bad("tensor too large"))?;
            shape.push(d);
        }
        let data = self.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::from_vec(&shape, data)
    }
    fn tensors(&mut self, expected: usize) -> Result<Vec<Tensor<f32>>> {
        let n = self.u32()?;
        if n != expected {
            return Err(bad(format!("{n} tensors where {expected} expected")));
        }
        (0..n).map(|_| self.tensor()).collect()
    }
}

/// Serializes the network, optionally with its ADADELTA accumulators.
pub fn encode(net: &Network<f32>, with_optimizer: bool) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u32(net.input_shape().len());
    for &d in net.input_shape() {
        w.u32(d);
    }
    w.u32(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                w.u8(0);
                let g = c.geometry;
                for v in [g.out_channels, g.size, g.stride, g.pad] {
                    w.u32(v);
                }
                w.tensors(&[&c.weight, &c.bias]);
            }
            Layer::Pool(p) => {
                w.u8(1);
                w.u32(p.size);
                w.u32(p.stride);
                w.tensors(&[]);
            }
            Layer::Fc(f) => {
                w.u8(2);
                w.u32(f.units());
                w.tensors(&[&f.weight, &f.bias]);
            }
            Layer::Bn(b) => {
                w.u8(3);
                w.f64(b.epsilon);
                w.f64(b.momentum);
                w.tensors(&[&b.gamma, &b.beta, &b.running_mean, &b.running_var]);
            }
            Layer::Dropout(d) => {
                w.u8(4);
                w.f64(d.rate);
                w.tensors(&[]);
            }
            Layer::Relu(_) => {
                w.u8(5);
                w.tensors(&[]);
            }
            Layer::Softmax(_) => {
                w.u8(6);
                w.tensors(&[]);
            }
        }
    }
    w.u8(with_optimizer as u8);
    if with_optimizer {
        for s in net.optimizer_state() {
            w.tensor(&s.sq_grad);
            w.tensor(&s.sq_update);
        }
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<Network<f32>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic { what: "checkpoint".into(), expected: "CNET" });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion { what: "CNET", version });
    }
    let rank = r.u32()?;
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(format!("input rank {rank}")));
    }
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let count = r.u32()?;
    if count > bytes.len() {
        return Err(bad(format!("layer count {count}")));
    }
    let mut layers = Vec::with_capacity(count);
    let mut channels = input_shape[0];
    for _ in 0..count {
        let tag = r.u8()?;
        let layer = match tag {
            0 => {
                let (maps, size, stride, pad) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
                let mut t = r.tensors(2)?;
                let b = t.pop().unwrap();
                let w = t.pop().unwrap();
                let g = ConvGeometry { in_channels: w.shape().get(1).copied().unwrap_or(0), out_channels: maps, size, stride, pad };
                if g.in_channels != channels {
                    return Err(bad(format!("conv3d expects {} channels after {channels}", g.in_channels)));
                }
                channels = maps;
                Layer::Conv(Conv3d::new(g, w, b)?)
            }
            1 => {
                let (size, stride) = (r.u32()?, r.u32()?);
                r.tensors(0)?;
                Layer::Pool(MaxPool3d::new(size, stride)?)
            }
            2 => {
                let units = r.u32()?;
                let mut t = r.tensors(2)?;
                let b = t.pop().unwrap();
                let w = t.pop().unwrap();
                if w.shape()[0] != units {
                    return Err(bad(format!("fc with {units} units has weight {:?}", w.shape())));
                }
                channels = units;
                Layer::Fc(FullyConnected::new(w, b)?)
            }
            3 => {
                let (epsilon, momentum) = (r.f64()?, r.f64()?);
                let mut t = r.tensors(4)?.into_iter();
                let mut bn = BatchNorm::new(channels);
                for (slot, v) in [&mut bn.gamma, &mut bn.beta, &mut bn.running_mean, &mut bn.running_var].into_iter().zip(&mut t) {
                    if v.shape() != [channels] {
                        return Err(bad(format!("batch-norm tensor {:?} for {channels} channels", v.shape())));
                    }
                    *slot = v;
                }
                bn.epsilon = epsilon;
                bn.momentum = momentum;
                Layer::Bn(bn)
            }
            4 => {
                let rate = r.f64()?;
                r.tensors(0)?;
                Layer::Dropout(Dropout::new(rate)?)
            }
            5 => {
                r.tensors(0)?;
                Layer::Relu(Relu::new())
            }
            6 => {
                r.tensors(0)?;
                Layer::Softmax(Softmax::new())
            }
            other => return Err(bad(format!("unknown layer tag {other}"))),
        };
        layers.push(layer);
    }
    let mut net = Network::from_layers(&input_shape, layers)?;
    match r.u8()? {
        0 => {}
        1 => {
            let n = net.parameters().len();
            let mut state = Vec::with_capacity(n);
            for _ in 0..n {
                state.push(AdadeltaState { sq_grad: r.tensor()?, sq_update: r.tensor()? });
            }
            net.set_optimizer_state(state)?;
        }
        other => return Err(bad(format!("optimizer flag {other}"))),
    }
    if r.pos != bytes.len() {
        return Err(Error::TrailingData(bytes.len() - r.pos));
    }
    Ok(net)
}

pub fn save(path: impl AsRef<Path>, net: &Network<f32>, with_optimizer: bool) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(net, with_optimizer)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network<f32>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
