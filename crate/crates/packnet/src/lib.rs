//! Self-supervised monocular depth and ego-motion estimation.
//!
//! The crate implements a depth network built from 3D packing/unpacking
//! blocks, a lightweight pose network, the photometric structure-from-motion
//! training objective (optionally with velocity supervision for metric
//! scale), and the standard depth/pose evaluation protocol. Everything runs
//! on the CPU on top of a small reverse-mode autodiff tape.

pub mod data;
pub mod depthnet;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod posenet;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;
pub mod trainer;

pub use error::Error;
