//! Appearance/pose disentangling gait autoencoder with LSTM aggregation,
//! trained and evaluated on procedurally generated walkers.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod frame;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod ppm;
pub mod tensor;
pub mod train;
pub mod walker;

pub use error::{Error, Result};
