//! Boundary-context-semantic reconstruction network for lung-infection
//! segmentation on CT slices.
//!
//! The crate is `no_std` with `alloc`: everything here is a pure function of
//! its inputs (and a seed where randomness is involved). Image decoding,
//! checkpoint files, reports and the command line live in the `bcsnet`
//! companion crate.
//!
//! Layout:
//! - [`tensor`], [`graph`]: dense NCHW tensors and a reverse-mode tape.
//! - [`data`], [`synth`]: slices, masks, boundary labels, resize, split and
//!   the synthetic blob generator.
//! - [`encoder`], [`decoder`], [`model`]: the network.
//! - [`losses`], [`metrics`]: training objective and evaluation measures.
//! - [`optim`], [`train`], [`gradcheck`]: optimisation and verification.
#![no_std]
#![forbid(unsafe_op_in_unsafe_fn)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod losses;
mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
