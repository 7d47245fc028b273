//! dirforge: a desk-scale laboratory for learning semantic edit
//! directions in a small diffusion model and applying them at sampling
//! time.
//!
//! The pipeline, end to end: a procedural world renders Gaussian-blob
//! images with known style attributes; an image encoder maps images into
//! a small embedding space; a conditional denoiser learns the world under
//! classifier-free guidance; a direction embedding is optimized so that
//! conditioning on it reproduces a known attribute edit; the editing
//! engine injects that direction into the sampler's noise predictions;
//! and the evaluation harness scores the result against the world's
//! analytic attribute read-back.
//!
//! Everything is seeded and bit-deterministic: same seed, same bytes.
//!
//! # Runnable examples
//!
//! The `examples/` directory is the front door. Each one is a small,
//! fast, self-contained run (`cargo run --release -p dirforge --example <name>`):
//!
//! - `world_tour` - render blobs, read attributes back, inspect pairs
//! - `train_tiny` - train the encoder and denoiser at miniature scale
//! - `learn_direction` - optimize one edit direction and inspect it
//! - `edit_generated` - sample, then steer the sample along a direction
//! - `edit_real_image` - invert a rendered image exactly, then edit it
//! - `interpolate_strength` - sweep edit strength and trace the attribute
//! - `rescoring_matrix` - small disentanglement matrix across directions
//!
//! The same capabilities are exposed as `dirforge` CLI subcommands
//! (`world gen`, `train`, `direction learn`, `sample`, `edit`,
//! `edit-real`, `interp`, `eval`, `ablate`, `report`, `reproduce`).

pub mod artifacts;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod editing;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod pipeline;
pub mod rng;
pub mod transfer;
pub mod world;

pub use error::{Error, Result};
