//! Minimal f64 neural-network substrate with hand-written backward passes.
//! Everything trainable in the crate (encoders, adapter, denoiser) sits on
//! this, so one finite-difference harness covers the whole stack.

mod attention;
mod layers;
mod store;

pub use attention::{CrossAttention, CrossAttentionCache};
pub use layers::{
    conv_out_size, silu, silu_backward, timestep_features, upsample2, upsample2_backward, Conv2d,
    Conv2dCache, GroupNorm, GroupNormCache, Linear, LinearCache,
};
pub use store::{Adam, ParamRef, ParamStore};
