//! Desk-scale text-to-image training stack for synthetic interior scenes.
//!
//! The crate is organised by pipeline phase:
//!
//! - [`corpus`]: procedural scene renderer, tag recaptioning and the 9:1 corpus split.
//! - [`codec`]: image <-> latent mapping (identity or a small learned autoencoder).
//! - [`dual_encoder`]: contrastive text-image model, two-stage training and retrieval.
//! - [`diffusion`]: noise schedule, text-conditioned UNet, denoising loss and sampler.
//! - [`curriculum`]: low-to-high resolution compound-loss training loop.
//! - [`rlcf`]: best-of-K generation, reward ranking and fine-tuning on winners.
//! - [`metrics`]: CLIP-style similarity, Inception Score and FID on a scene classifier.
//!
//! [`nn`], [`optim`] and [`checkpoint`] hold the shared model plumbing.

pub mod checkpoint;
pub mod codec;
pub mod corpus;
pub mod curriculum;
pub mod diffusion;
pub mod dual_encoder;
mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod rlcf;
pub mod seed;
pub mod text;

pub use error::{Error, Result};
