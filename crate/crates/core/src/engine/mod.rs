//! Numeric execution of factor chains on feature maps.

mod bench;
mod block;
pub mod io;
mod ops;
mod tensor;

pub use bench::{benchmark, BenchReport};
pub use block::{compose_dense_kernel, forward_block, forward_igcv3_block, BlockMode, Igcv3Spec};
pub(crate) use ops::{accumulate_shifted, check_stride, tap_offsets};
pub use ops::{
    add, channel_affine, dense_conv, depthwise_spatial, fully_connected, global_avg_pool,
    group_conv, group_spatial, grouped_pointwise, permute_channels, relu,
};
pub use tensor::{Affine, BlockKernel, DenseKernel, FactorWeights, FeatureMap, Scalar, Shape};
