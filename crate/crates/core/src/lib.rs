//! Toy latent-diffusion inpainting with sketch and masked-image conditioning.
//!
//! The crate assembles a small frozen text-conditioned U-Net denoiser with
//! three trainable adapters:
//!
//! - a masked-image encoder that injects multi-scale context features
//!   additively into the denoiser encoder,
//! - a sketch encoder that extracts multi-scale features from a partial
//!   sketch, and
//! - per-scale fusion modules that predict a visual mask from the fused
//!   context and apply a sketch-conditioned affine transform after group
//!   normalization.
//!
//! All tensors are f64 grids in `[batch, channel, height, width]` layout.
//! Everything is deterministic given explicit seeds.

pub mod error;
pub mod fusion;
pub mod graph;
pub mod mie;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod text;
pub mod unet;
pub mod vae;

pub use error::{Error, Result};
pub use graph::{Grads, Graph, Var};
pub use nn::{ParamGroup, ParamId, ParamStore};
pub use rng::Rng64;
pub use tensor::Tensor;
