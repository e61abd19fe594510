//! Simulator, tracking harness, file formats and tooling around `xmodal-core`.

pub mod ablate;
pub mod formats;
pub mod gradcheck;
pub mod harness;
pub mod sim;
