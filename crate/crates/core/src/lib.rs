//! Alignment and fusion of 3D image volumes with textualised clinical
//! records.
//!
//! The crate is self-contained: [`tensor`] provides the numeric substrate
//! with reverse-mode autodiff, [`data`] turns records into patch grids and
//! token sequences, [`model`] holds the network, [`objectives`] the four
//! losses, and [`trainer`] the AdamW loop, metrics and checkpoints.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
