//! Watershed-energy instance segmentation: grids and file formats,
//! ground-truth energy targets, classical flooding watershed, single-cut
//! instance extraction, evaluation metrics and a synthetic scene generator.

pub mod error;
pub mod extract;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod synth;
pub mod targets;
pub mod watershed;

pub use error::{Error, Result};
pub use grid::{connected_components, Connectivity, LabelMap, Mask, Rgb8Image, ScalarField, VectorField};
