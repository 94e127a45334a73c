//! Discrete-latent sequence autoencoding with parallel decoding.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: a dense float64 tape with reverse-mode differentiation,
//!   including the stop-gradient operator.
//! - [`bottleneck`]: four discretization bottlenecks (Gumbel-Softmax,
//!   semantic hashing, sliced/projected decomposed vector quantization)
//!   behind one interface, with EMA codebook training and code
//!   composition/decomposition.
//! - [`model`]: the sequence autoencoder (compressing encoder + parallel
//!   decoder), the autoregressive latent predictor, and an autoregressive
//!   token baseline for comparison and rescoring.
//! - [`data`]: synthetic tasks (copy/reverse/cipher) and TSV corpora.
//! - [`train`]: Adam and the joint training step.

pub mod bottleneck;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
