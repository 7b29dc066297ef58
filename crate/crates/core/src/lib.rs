//! Region-of-interest detection on grayscale radiographs: box geometry,
//! dataset tooling, anchor design, a small single-shot detector with its own
//! autodiff engine, training, evaluation and a command-line front end.

pub mod anchors;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod nnet;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Box in `f64` precision.
pub type Box64 = geometry::BBox<f64>;
/// Box in `f32` precision.
pub type Box32 = geometry::BBox<f32>;
pub type Tensor64 = nnet::Tensor<f64>;
pub type Tensor32 = nnet::Tensor<f32>;
pub type Detector64 = nnet::DetectorModel<f64>;
pub type Detector32 = nnet::DetectorModel<f32>;
