//! Bilevel continual learning on sequential task streams.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece:
//! a small dense reverse-mode autodiff with exact second-order products,
//! the split-parameter models, losses, the bilevel optimizer with Reptile
//! meta-steps, reservoir episodic memory, the task generators, the
//! evaluation metrics and the comparison baselines. File IO, configuration
//! and the command line live in the `bicl` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod baselines;
pub mod bilevel;
pub mod continuum;
mod error;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod models;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, IdxError, Result};
pub use params::ParamVector;
pub use tensor::Tensor;
