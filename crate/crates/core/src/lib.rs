//! Core library for a multi-scale, self-guided attention segmentation stack.
//!
//! Everything is built on a small reverse-mode automatic differentiation
//! engine over `f64` tensors ([`Tape`]):
//!
//! * [`tensor`] — dense tensors, the autodiff tape, parameter storage, and
//!   the NST on-disk tensor format.
//! * [`nn`] — convolution blocks, the four-stage downsampling backbone, and
//!   the encoder-decoder used for latent guidance.
//! * [`attention`] — position (pixel-affinity) and channel (Gram-matrix)
//!   attention blocks with learnable residual gates, plus their dual fusion.
//! * [`guided`] — stacked refinement: each step gates the features by an
//!   encoder-decoder reconstruction and contributes latent-consistency and
//!   reconstruction losses.
//! * [`network`] — the full multi-scale network: shared fusion of upsampled
//!   backbone features, per-scale guided attention, and deeply supervised
//!   segmentation heads.
//! * [`metrics`] — Dice similarity, volume similarity, and mean surface
//!   distance with per-class reporting.
//! * [`data`] — seeded synthetic shape datasets and augmentation.
//! * [`trainer`] — Adam, plateau learning-rate schedule, the training loop,
//!   and the finite-difference gradient-check harness.

pub mod attention;
pub mod data;
pub mod error;
pub mod guided;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{read_nst, write_nst, ParamId, ParamStore, Tape, Tensor, Var};

// Re-exported so downstream binaries can seed RNGs without naming the RNG
// crates themselves.
pub use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha20Rng;
