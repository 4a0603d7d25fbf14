//! Heteroscedastic temporal variational autoencoder for sparse, irregularly
//! sampled multivariate time series.
//!
//! The crate is layered bottom-up: [`numgrad`] (arrays, reverse-mode
//! gradients, Adam), [`untan`] (continuous-time attention), [`model`],
//! [`objective`] (loss and training), [`eval`], and the [`cli`] front end.
//! [`data`] covers series I/O, the synthetic benchmark and preprocessing.

// `!(x > 0.0)` is used deliberately so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numgrad;
pub mod objective;
pub mod rng;
pub mod untan;

pub use error::{Error, Result};
