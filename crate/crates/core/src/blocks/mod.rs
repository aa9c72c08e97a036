//! Differentiable building blocks of the denoiser: attention, channel
//! gating, deformable convolution and the composite UNet stages.

mod attention;
mod channel_attention;
mod dcn;
mod mca;
mod resblock;
mod rsi;
mod si;
mod updown;

pub use attention::{scaled_dot_product, CrossAttention, StyleAttention};
pub use channel_attention::ChannelAttention;
pub use dcn::{deformable_conv, DeformConv2d};
pub use mca::{McaBlock, McaDims};
pub use resblock::{norm_groups, sinusoidal_embedding, ResBlock, TimeEmbedding};
pub use rsi::{RsiBlock, DCN_KERNEL};
pub use si::SiBlock;
pub use updown::{DownBlock, UpBlock};
