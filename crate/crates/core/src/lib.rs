//! LiDAR range-image synthesis from camera and FMCW RADAR inputs.
//!
//! The pipeline encodes four modality images (camera, depth, range-angle and
//! range-velocity maps) into 768-wide embeddings, fuses them with a
//! transformer encoder layer into a 1024-wide latent, and decodes that into a
//! polar LiDAR range image with a stack of transposed convolutions.

pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod io;
pub mod model;
pub mod radar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
