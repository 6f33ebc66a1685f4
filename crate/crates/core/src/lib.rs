//! Variational latent-gated fusion of multi-scale convolutional features.
//!
//! A compact image encoder produces per-scale feature vectors; a small VAE
//! over their average drives a softmax gate that re-weights the scales, and
//! the centered, L2-normalized result feeds either a linear classifier or a
//! prototype-based episodic head. Everything trains end-to-end through the
//! reverse-mode graph in [`graph`], with finite-difference verification in
//! [`objective`].

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalmetrics;
pub mod graph;
pub mod heads;
pub mod model;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod report;
pub mod tensor;
pub mod train;
pub mod varfusion;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
