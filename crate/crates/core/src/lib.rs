//! Desk-scale two-stream conditioning for instruction-based image editing.

pub mod autodiff;
pub mod bridging;
pub mod checkpoint;
pub mod comprehension;
pub mod config;
pub mod datapipe;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod tensor;
pub mod training;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
