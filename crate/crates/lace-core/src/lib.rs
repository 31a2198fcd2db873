//! Desk-scale guided-diffusion laboratory: dual-token conditioning,
//! multi-domain control guidance over noise predictions, and DDIM inversion,
//! verified against an analytic Gaussian world and a procedural
//! multi-attribute shapes dataset.

pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod schedule;
pub mod world;

pub use error::{LaceError, Result};
