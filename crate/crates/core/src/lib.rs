//! Numerical core for cross-modal single-object tracking.
//!
//! Everything here is pure computation over owned buffers: dense tensors with
//! hand-written backward passes, the RGB/NIR/invalid frame switch, the gated
//! NIR feature adapter, the reliability-weighted Kalman predictor, the training
//! losses and the PR/SR metrics. The crate is `no_std` and only needs `alloc`;
//! file formats, the simulator and the CLI live in the `xmodal` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod adapter;
pub mod bbox;
pub mod ctp;
mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod switch;
pub mod tensor;

pub use bbox::BBox;
pub use error::{Error, Result};
pub use tensor::Tensor;
