//! Tensor building blocks on top of candle: seeded parameter storage,
//! layers and the custom unfold kernels.

pub mod gradcheck;
pub mod kernels;
mod layers;
mod ops;
mod params;

pub use layers::{
    from_tokens, global_avg_pool, global_max_pool, max_pool2x, relu, sigmoid, silu,
    softmax_last_dim, to_tokens, upsample_nearest2x, Conv2d, GroupNorm, LayerNorm, Linear,
};
pub use ops::{deform_unfold, unfold, unfold_batched};
pub use params::{Init, ParamBuilder, ParamStore};
