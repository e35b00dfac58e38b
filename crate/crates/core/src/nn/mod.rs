//! Layers of the classification network, forward and backward.

pub mod batchnorm;
pub mod conv;
pub mod factorized;
pub mod head;
pub mod network;

pub use batchnorm::{BatchNorm, BnMode};
pub use conv::{conv2d_backward, conv2d_forward, ConvGeometry, ConvGrads};
pub use factorized::{FactorizedConvLayer, FactorizedGrads};
pub use head::{argmax_rows, global_average_pool, relu, softmax_cross_entropy, Linear};
pub use network::{build_table1_network, Layer, LayerCompression, Network, NetworkSpec, Tape, TABLE1_STRIDES};

use crate::error::Result;
use crate::exec::ExecMode;
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

pub fn factorized_conv_forward<T: Scalar>(
    layer: &FactorizedConvLayer<T>,
    x: &DenseTensor<T>,
    mode: ExecMode,
) -> Result<DenseTensor<T>> {
    layer.forward(x, mode)
}

pub fn factorized_conv_backward<T: Scalar>(
    layer: &FactorizedConvLayer<T>,
    x: &DenseTensor<T>,
    dy: &DenseTensor<T>,
    mode: ExecMode,
) -> Result<FactorizedGrads<T>> {
    layer.backward(x, dy, mode)
}
