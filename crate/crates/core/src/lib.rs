//! Core of the HDformer pipeline: a small reverse-mode tensor engine, square-token
//! tokenisation of 2D-wrapped long signals, global and shifted-window transformer
//! encoders, a softmax-gated mixture of experts, signal preprocessing and binary
//! classification metrics.
//!
//! The crate is `no_std` (with `alloc`); file formats, the CLI and threaded training
//! live in the `hdformer` crate.
#![no_std]

extern crate alloc;
#[cfg(any(feature = "std", test))]
extern crate std;

mod error;

pub mod numerics;

pub use error::{Error, Result};
pub mod encoder;
pub mod signal;
pub mod tsa;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod train;
