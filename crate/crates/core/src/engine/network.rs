use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::activation::{Relu, Softmax};
use super::adadelta::{adadelta_step, AdadeltaConfig, AdadeltaState};
use super::batchnorm::BatchNorm;
use super::conv::{Conv3d, ConvGeometry};
use super::dense::FullyConnected;
use super::dropout::Dropout;
use super::init::glorot_uniform;
use super::loss::{cross_entropy_grad, cross_entropy_loss};
use super::pool::MaxPool3d;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// Hyperparameters of one layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LayerSpec {
    Conv3d { maps: usize, size: usize, stride: usize, pad: usize },
    MaxPool3d { size: usize, stride: usize },
    FullyConnected { units: usize },
    BatchNorm,
    Dropout { rate: f64 },
    Relu,
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv3d { .. } => "conv3d",
            LayerSpec::MaxPool3d { .. } => "maxpool3d",
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// The 7-layer patch classifier: two conv/batch-norm/ReLU/max-pool stacks
/// with 32 and 64 maps, dropout, a 256-unit hidden layer and a two-way
/// softmax.
pub fn standard_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv3d { maps: 32, size: 3, stride: 1, pad: 1 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool3d { size: 2, stride: 2 },
        LayerSpec::Conv3d { maps: 64, size: 3, stride: 1, pad: 1 },
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool3d { size: 2, stride: 2 },
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::FullyConnected { units: 256 },
        LayerSpec::Relu,
        LayerSpec::FullyConnected { units: 2 },
        LayerSpec::Softmax,
    ]
}

#[derive(Clone)]
pub enum Layer<T: Scalar> {
    Conv(Conv3d<T>),
    Pool(MaxPool3d),
    Fc(FullyConnected<T>),
    Bn(BatchNorm<T>),
    Dropout(Dropout),
    Relu(Relu),
    Softmax(Softmax<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv3d {
                maps: c.geometry.out_channels,
                size: c.geometry.size,
                stride: c.geometry.stride,
                pad: c.geometry.pad,
            },
            Layer::Pool(p) => LayerSpec::MaxPool3d { size: p.size, stride: p.stride },
            Layer::Fc(f) => LayerSpec::FullyConnected { units: f.units() },
            Layer::Bn(_) => LayerSpec::BatchNorm,
            Layer::Dropout(d) => LayerSpec::Dropout { rate: d.rate },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Softmax(_) => LayerSpec::Softmax,
        }
    }

    fn output_shape(&self, sample: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => c.output_shape(sample),
            Layer::Pool(p) => p.output_shape(sample),
            Layer::Fc(f) => f.output_shape(sample),
            Layer::Bn(b) => b.output_shape(sample),
            Layer::Dropout(_) | Layer::Relu(_) => Ok(sample.to_vec()),
            Layer::Softmax(_) => {
                if sample.len() != 1 {
                    return Err(Error::shape(format!("softmax needs a flat input, got {sample:?}")));
                }
                Ok(sample.to_vec())
            }
        }
    }

    /// Trainable tensors: weight then bias, or gamma then beta.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Fc(f) => vec![&f.weight, &f.bias],
            Layer::Bn(b) => vec![&b.gamma, &b.beta],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Fc(f) => vec![&mut f.weight, &mut f.bias],
            Layer::Bn(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => c.infer(x),
            Layer::Pool(p) => p.infer(x),
            Layer::Fc(f) => f.infer(x),
            Layer::Bn(b) => b.infer(x),
            Layer::Dropout(d) => Ok(d.infer(x)),
            Layer::Relu(r) => Ok(r.infer(x)),
            Layer::Softmax(s) => s.infer(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCount {
    pub total: usize,
    pub without_batchnorm: usize,
}

/// An ordered stack of layers with per-parameter ADADELTA accumulators.
#[derive(Clone)]
pub struct Network<T: Scalar> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
    shapes: Vec<Vec<usize>>,
    optimizer: Vec<AdadeltaState<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network for per-sample input `input_shape`, Glorot-initializing
    /// weights from `seed` (one derived stream per layer) with zero biases.
    pub fn build(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shape = input_shape.to_vec();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(format!("input shape {shape:?}")));
        }
        for (i, spec) in specs.iter().enumerate() {
            let layer_seed = seed::derive(seed, i as u64);
            let layer = match *spec {
                LayerSpec::Conv3d { maps, size, stride, pad } => {
                    if shape.len() != 4 {
                        return Err(Error::shape(format!("conv3d after {shape:?}")));
                    }
                    let g = ConvGeometry { in_channels: shape[0], out_channels: maps, size, stride, pad };
                    g.validate()?;
                    let k3 = size * size * size;
                    let w = glorot_uniform(&[maps, shape[0], size, size, size], shape[0] * k3, maps * k3, layer_seed);
                    Layer::Conv(Conv3d::new(g, w, Tensor::zeros(&[maps]))?)
                }
                LayerSpec::MaxPool3d { size, stride } => Layer::Pool(MaxPool3d::new(size, stride)?),
                LayerSpec::FullyConnected { units } => {
                    if units == 0 {
                        return Err(Error::InvalidLayer("fully-connected layer with 0 units".into()));
                    }
                    let m: usize = shape.iter().product();
                    let w = glorot_uniform(&[units, m], m, units, layer_seed);
                    Layer::Fc(FullyConnected::new(w, Tensor::zeros(&[units]))?)
                }
                LayerSpec::BatchNorm => Layer::Bn(BatchNorm::new(shape[0])),
                LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)?),
                LayerSpec::Relu => Layer::Relu(Relu::new()),
                LayerSpec::Softmax => Layer::Softmax(Softmax::new()),
            };
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Self::from_layers(input_shape, layers)
    }

    /// Assembles a network from already-parameterized layers, checking that
    /// shapes chain; optimizer state starts at zero.
    pub fn from_layers(input_shape: &[usize], layers: Vec<Layer<T>>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut shapes = Vec::with_capacity(layers.len());
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        let optimizer = layers.iter().flat_map(|l| l.params()).map(|p| AdadeltaState::new(p.shape())).collect();
        Ok(Network { input_shape: input_shape.to_vec(), layers, shapes, optimizer })
    }

    /// The 7-layer classifier for `channels`-channel patches of edge `patch`.
    pub fn standard(channels: usize, patch: usize, seed: u64) -> Result<Self> {
        Self::build(&[channels, patch, patch, patch], &standard_specs(), seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    /// Per-sample output shape after every layer.
    pub fn shape_chain(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().map(Vec::as_slice).unwrap_or(&self.input_shape)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] || x.batch() == 0 {
            return Err(Error::shape(format!(
                "network expects [B, {:?}], got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        Ok(())
    }

    /// Inference-mode forward pass (running batch-norm statistics, no dropout).
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.infer(&h)?;
        }
        Ok(h)
    }

    /// Train-mode forward pass recording the state needed by [`Self::backward`].
    /// Dropout masks are drawn from streams derived from `seed`.
    pub fn forward_train(&mut self, x: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            h = match layer {
                Layer::Conv(c) => c.forward_train(&h)?,
                Layer::Pool(p) => p.forward_train(&h)?,
                Layer::Fc(f) => f.forward_train(&h)?,
                Layer::Bn(b) => b.forward_train(&h)?,
                Layer::Dropout(d) => d.forward_train(&h, seed::derive(seed, i as u64)),
                Layer::Relu(r) => r.forward_train(&h),
                Layer::Softmax(s) => s.forward_train(&h)?,
            };
        }
        Ok(h)
    }

    /// Gradients of the mean cross-entropy of the last train-mode forward
    /// pass, one tensor per entry of [`Self::parameters`].
    pub fn backward(&mut self, labels: &[u8]) -> Result<Vec<Tensor<T>>> {
        let probs = match self.layers.last() {
            Some(Layer::Softmax(s)) => s.cached_output().ok_or(Error::NoForwardState)?.clone(),
            _ => return Err(Error::InvalidLayer("cross-entropy backward needs a final softmax".into())),
        };
        let g = cross_entropy_grad(&probs, labels)?;
        self.backward_from(&g)
    }

    /// Back-propagates `grad` (gradient w.r.t. the network output).
    pub fn backward_from(&mut self, grad: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut grads: Vec<Vec<Tensor<T>>> =
            self.layers.iter().map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect()).collect();
        let first_param = self.layers.iter().position(|l| !l.params().is_empty()).unwrap_or(0);
        let mut g = grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let need_input = i > first_param;
            let gi = &mut grads[i];
            g = match layer {
                Layer::Conv(c) => match c.backward(&g, gi, need_input)? {
                    Some(dx) => dx,
                    None => break,
                },
                Layer::Fc(f) => match f.backward(&g, gi, need_input)? {
                    Some(dx) => dx,
                    None => break,
                },
                Layer::Bn(b) => b.backward(&g, gi)?,
                Layer::Pool(p) => p.backward(&g)?,
                Layer::Dropout(d) => d.backward(&g)?,
                Layer::Relu(r) => r.backward(&g)?,
                Layer::Softmax(s) => s.backward(&g)?,
            };
        }
        Ok(grads.into_iter().flatten().collect())
    }

    /// Train-mode forward, loss and backward in one call.
    pub fn loss_and_gradients(&mut self, x: &Tensor<T>, labels: &[u8], seed: u64) -> Result<(f64, Vec<Tensor<T>>)> {
        let probs = self.forward_train(x, seed)?;
        let loss = cross_entropy_loss(&probs, labels)?;
        Ok((loss, self.backward(labels)?))
    }

    /// Trainable tensors in layer order.
    pub fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn optimizer_state(&self) -> &[AdadeltaState<T>] {
        &self.optimizer
    }

    pub fn set_optimizer_state(&mut self, state: Vec<AdadeltaState<T>>) -> Result<()> {
        let params = self.parameters();
        if state.len() != params.len()
            || state.iter().zip(&params).any(|(s, p)| s.sq_grad.shape() != p.shape() || s.sq_update.shape() != p.shape())
        {
            return Err(Error::shape("optimizer state does not match parameters"));
        }
        self.optimizer = state;
        Ok(())
    }

    pub fn apply_adadelta(&mut self, grads: &[Tensor<T>], cfg: &AdadeltaConfig) -> Result<()> {
        let n = self.optimizer.len();
        if grads.len() != n {
            return Err(Error::shape(format!("{} gradients for {n} parameters", grads.len())));
        }
        let mut optimizer = std::mem::take(&mut self.optimizer);
        let result = self
            .parameters_mut()
            .into_iter()
            .zip(grads)
            .zip(optimizer.iter_mut())
            .try_for_each(|((p, g), s)| adadelta_step(p, g, s, cfg));
        self.optimizer = optimizer;
        result
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let mut total = 0;
        let mut bn = 0;
        for layer in &self.layers {
            let n: usize = layer.params().iter().map(|p| p.len()).sum();
            total += n;
            if matches!(layer, Layer::Bn(_)) {
                bn += n;
            }
        }
        ParameterCount { total, without_batchnorm: total - bn }
    }

    /// Copy of the network in another scalar type (optimizer state included).
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => Layer::Conv(Conv3d::new(c.geometry, c.weight.cast(), c.bias.cast()).expect("valid")),
                Layer::Fc(f) => Layer::Fc(FullyConnected::new(f.weight.cast(), f.bias.cast()).expect("valid")),
                Layer::Bn(b) => {
                    let mut n = BatchNorm::new(b.channels());
                    n.gamma = b.gamma.cast();
                    n.beta = b.beta.cast();
                    n.running_mean = b.running_mean.cast();
                    n.running_var = b.running_var.cast();
                    n.epsilon = b.epsilon;
                    n.momentum = b.momentum;
                    Layer::Bn(n)
                }
                Layer::Pool(p) => Layer::Pool(MaxPool3d::new(p.size, p.stride).expect("valid")),
                Layer::Dropout(d) => Layer::Dropout(Dropout::new(d.rate).expect("valid")),
                Layer::Relu(_) => Layer::Relu(Relu::new()),
                Layer::Softmax(_) => Layer::Softmax(Softmax::new()),
            })
            .collect();
        let mut net = Network::from_layers(&self.input_shape, layers).expect("shapes already chained");
        net.optimizer = self
            .optimizer
            .iter()
            .map(|s| AdadeltaState { sq_grad: s.sq_grad.cast(), sq_update: s.sq_update.cast() })
            .collect();
        net
    }

    /// Hash of every ReLU activation pattern and max-pool argmax recorded by
    /// the last train-mode forward pass. Two passes with equal signatures
    /// took the same branch of every piecewise-linear unit.
    pub fn branch_signature(&self) -> Option<u64> {
        let mut h = DefaultHasher::new();
        for layer in &self.layers {
            match layer {
                Layer::Relu(r) => r.cached_mask()?.hash(&mut h),
                Layer::Pool(p) => p.cached_argmax()?.hash(&mut h),
                _ => {}
            }
        }
        Some(h.finish())
    }
}
