//! Event-guided low-light image enhancement.
//!
//! The crate is organised bottom-up: [`numerics`] is a small tensor engine
//! with reverse-mode gradients, [`event`] and [`image`] hold the sensor data
//! types, and [`lightup`], [`blocks`] and [`model`] build the enhancement
//! network on top. [`training`] and [`alignment`] cover optimisation and
//! dataset pairing.

pub mod alignment;
pub mod blocks;
pub mod error;
pub mod eval;
pub mod event;
pub mod fixtures;
pub mod image;
pub mod layers;
pub mod lightup;
pub mod model;
pub mod numerics;
pub mod spatial;
pub mod training;

pub use error::{Error, Result};
