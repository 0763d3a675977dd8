//! Deterministic single-threaded kernels.
//!
//! Every forward op has a matching backward op that consumes the cache the
//! forward produced. Filter gradients are never computed: convolution weights
//! stay frozen for the lifetime of a backbone.

mod adam;
mod batchnorm;
mod conv;
mod layers;
mod normal;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use batchnorm::{
    batchnorm_backward, batchnorm_eval, batchnorm_forward, BnCache, BnGrads, BnMode, BnParams,
    BN_EPS, BN_MOMENTUM,
};
pub use conv::{conv2d_backward_input, conv2d_forward, same_padding, ConvCache};
pub use layers::{
    global_avg_pool_backward, global_avg_pool_forward, linear_backward, linear_forward,
    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward, GapCache, LinearCache,
    LinearGrads, PoolCache, ReluCache,
};
pub use normal::{normal_cdf, normal_pdf};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;
