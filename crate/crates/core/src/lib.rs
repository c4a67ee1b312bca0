//! Super-resolution of high emitter-density fluorescence movies from their
//! second-order temporal statistics.
//!
//! Two reconstruction routes share one forward model:
//!
//! * [`solver`]: proximal-gradient sparse recovery (ISTA / FISTA) on the
//!   covariance or variance of the movie, requiring a known PSF;
//! * [`unfolded`]: a ten-fold network obtained by unrolling that iteration,
//!   with learned convolution kernels and percentile-relative thresholds,
//!   requiring no PSF. [`training`] fits its weights.
//!
//! [`simulate`] produces blinking-emitter movies with ground truth and
//! [`pipeline`] ties everything together: patch tiling, file formats and
//! localization metrics.
//!
//! All numerics are generic over [`Scalar`] (`f32` / `f64`); the aliases below
//! fix the common `f64` instantiation.

pub mod conv;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod simulate;
pub mod solver;
pub mod stats;
pub mod training;
pub mod unfolded;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Psf = model::Psf<f64>;
pub type MeasurementOperator = model::MeasurementOperator<f64>;
pub type EmitterMap = model::EmitterMap<f64>;
pub type FrameStack = stats::FrameStack<f64>;
pub type VarianceImage = stats::VarianceImage<f64>;
pub type Weights = unfolded::LsparcomWeights<f64>;
pub type Weights32 = unfolded::LsparcomWeights<f32>;
pub type TrainingExample = training::TrainingExample<f64>;
