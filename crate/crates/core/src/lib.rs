//! On-demand quantized federated diffusion training in a simulated mobile
//! edge network.
//!
//! - [`quant`]: stochastic weight quantization and the bit-packed payload codec.
//! - [`linkmodel`]: per-device computation and uplink time/energy models.
//! - [`allocator`]: energy-minimal computation/communication time split.
//! - [`diffusion`]: a small 2-D denoising diffusion model trained by SGD.
//! - [`federation`]: the federated training loop with per-round accounting.
//! - [`metrics`]: Gaussian-fit Fréchet distance.
//! - [`cli`]: configuration and the experiment commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod federation;
pub mod linkmodel;
pub mod metrics;
pub mod quant;
pub mod rng;

pub use error::{Error, Result};
