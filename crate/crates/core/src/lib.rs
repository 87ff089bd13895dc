//! One-stage scene graph generation with a relation-to-interaction transfer
//! head for human-object interaction detection.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod geometry;
pub mod hoinet;
pub mod matchloss;
pub mod model;
pub mod nn;
pub mod numeric;
pub mod relnet;
pub mod transformer;

pub use error::{Error, Result};
