//! Minimal f64 neural-network substrate: parameters, convolution (im2col +
//! GEMM), batch normalization, linear layers, pooling, activation, and
//! momentum SGD. Everything is single-threaded and deterministic given a
//! seeded RNG.

pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod param;
pub mod pool;
pub mod relu;
pub mod sgd;

pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use param::{Param, ParamKind};
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2};
pub use relu::Relu;
pub use sgd::{Sgd, SgdConfig};

use ndarray::Array4;

/// Batched activation tensor: (batch, channels, height, width).
pub type Tensor4 = Array4<f64>;
