//! Forward and backward kernels for every layer primitive.
//!
//! These are plain functions on [`Tensor`](crate::Tensor)s. The tape in
//! [`graph`](crate::graph) records which of them ran and calls the matching
//! backward function in reverse order.

mod activation;
mod batchnorm;
mod channels;
mod conv;
mod pool;
mod upsample;

pub use activation::{relu, relu_backward, softmax_channels, softmax_channels_backward};
pub use batchnorm::{
    batchnorm, batchnorm_backward, batchnorm_forward, BatchStats, NormMode, Normalized, RunningStats, BATCHNORM_EPS,
    BATCHNORM_MOMENTUM,
};
pub(crate) use channels::scatter_channels;
pub use channels::{concat_channels, slice_channels};
pub use conv::{conv_nd, conv_nd_backward, ConvGrads, Padding};
pub use pool::{maxpool_nd, maxpool_nd_backward, Pooled};
pub use upsample::{upsample_linear_nd, upsample_linear_nd_backward};
