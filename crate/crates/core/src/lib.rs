//! Detection and forecasting of nutrient-deficiency stress in sequences of
//! aerial field rasters.
//!
//! The crate is organized bottom-up: [`raster`] holds the image model and
//! vegetative indices, [`dataset`] the manifest/sampling pipeline, [`synth`]
//! a procedural field generator, [`nn`] the differentiation engine,
//! [`loss`] the objectives and scores, [`zoo`] the architectures and
//! [`train`] the optimization and evaluation loops.

pub mod dataset;
pub mod error;
pub mod loss;
pub mod nn;
pub mod raster;
pub mod synth;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use raster::{build_representation, compute_index, IndexKind, InputRepresentation, Raster};
