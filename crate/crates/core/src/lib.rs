//! Remaining-useful-life prediction for hard drives with a dual-aspect
//! transformer whose time encoder uses an LSTM positional encoding.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode differentiation tape
//! - [`layers`]: linear, attention, feed-forward, layer norm, LSTM, encodings
//! - [`model`]: the bi-encoder network and its baselines
//! - [`data`]: S.M.A.R.T. ingestion, labeling, normalization and windowing
//! - [`train`]: RMSE loss, Adam and the training loop
//! - [`checkpoint`]: manifest + blob persistence
//! - [`eval`]: overlapping-window confidence intervals and reports
//! - [`cli`]: the `tfbest` command line

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ModelConfig, TfbestModel, Variant};
pub use tensor::{Real, Tape, Tensor, Var};
