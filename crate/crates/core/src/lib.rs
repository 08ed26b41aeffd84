//! Joint transcription and translation with dual-path decoding and KL
//! agreement between the two decoding orders.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, run configuration and the command line live in the
//! companion `tda` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod rng;
pub mod tensor;
pub mod testing;
pub mod train;
pub mod vocab;

pub use autograd::{Tape, Var};
pub use error::*;
pub use tensor::{Real, Tensor};
