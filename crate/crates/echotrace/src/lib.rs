//! Tracing of snow accumulation layers in radar echograms.
//!
//! The crate provides, end to end:
//! - dense grids with reverse-mode differentiable operations ([`ops`], [`graph`])
//! - separable 2-D discrete wavelet transforms ([`wavelet`])
//! - multi-scale edge-detection networks with wavelet feature fusion ([`model`])
//! - class-balanced cross-entropy training ([`loss`], [`train`])
//! - echogram/layer file formats, augmentation and a synthetic generator ([`data`])
//! - column-wise non-maximum suppression ([`postproc`])
//! - correspondence-based detection metrics and layer depth errors ([`eval`])
//! - water-equivalent accumulation rates from traced layers ([`accum`])
//!
//! Numeric code is generic over the [`scalar::Scalar`] float type; the
//! aliases below fix f64, which everything downstream (training, CLI)
//! uses.

pub mod accum;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod grid;
pub mod loss;
pub mod model;
pub mod ops;
pub mod postproc;
pub mod scalar;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use grid::Shape;
pub use scalar::Scalar;

/// f32 grid.
pub type Grid32 = grid::Grid<f32>;
/// f64 grid, the default compute type.
pub type Grid64 = grid::Grid<f64>;
