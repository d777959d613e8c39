//! Minimal neural-network engine: the layer kinds of the patch classifier
//! with hand-written backward passes, ADADELTA and Glorot initialization.
//! Storage is f32 for training; the same code runs in f64 for gradient
//! checks. Reductions are accumulated in f64 and in a fixed order, so results
//! are independent of the thread count.

pub mod activation;
pub mod adadelta;
pub mod batchnorm;
pub mod checkpoint;
pub mod conv;
pub mod dense;
pub mod dropout;
pub mod init;
pub mod loss;
pub mod network;
pub mod pool;
pub mod scalar;
pub mod tensor;

pub use activation::{Relu, Softmax};
pub use adadelta::{adadelta_step, AdadeltaConfig, AdadeltaState};
pub use batchnorm::BatchNorm;
pub use conv::{Conv3d, ConvGeometry};
pub use dense::FullyConnected;
pub use dropout::Dropout;
pub use init::{glorot_bound, glorot_uniform};
pub use loss::{cross_entropy_grad, cross_entropy_loss};
pub use network::{standard_specs, Layer, LayerSpec, Network, ParameterCount};
pub use pool::MaxPool3d;
pub use scalar::Scalar;
pub use tensor::Tensor;
