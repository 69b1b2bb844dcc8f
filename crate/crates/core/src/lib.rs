#![allow(clippy::type_complexity, clippy::too_many_arguments)]

pub mod autodiff;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod coder;
pub mod config;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod imageio;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Backend, Eager, Graph, Var};
pub use codec::{CodecNet, LatentBundle};
pub use config::{Metric, ModelConfig};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type CodecNet32 = CodecNet<f32>;
pub type CodecNet64 = CodecNet<f64>;
