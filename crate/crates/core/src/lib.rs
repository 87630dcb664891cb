//! Gaussian-splat head avatars generated by graph networks over a tracked mesh.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, a define-by-run reverse-mode tape and Adam.
//! - [`mesh`]: triangle meshes, graph Laplacians and the decimation hierarchy.
//! - [`nn`]: linear layers and small perceptrons.
//! - [`unet`]: Chebyshev graph convolutions and the geometry/appearance U-nets.
//! - [`gaussians`]: Gaussian containers, covariance assembly and neural spawning.
//! - [`render`]: the tiled differentiable rasterizer and its brute-force oracle.
//! - [`ggo`]: temporal cross-attention that corrects tracked expressions and poses.
//! - [`enhancer`]: the depth-modulated image U-net.
//! - [`losses`]: training losses and evaluation metrics.
//! - [`synth`]: the synthetic animated-mesh dataset generator.
//! - [`pipeline`]: pseudo-Gaussian fit, warm-up, training, evaluation, checkpoints.

pub mod enhancer;
pub mod error;
pub mod gaussians;
pub mod ggo;
pub mod losses;
pub mod mesh;
pub mod nn;
pub mod pipeline;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod unet;
mod util;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
