//! Anomaly detection for univariate time series using text-completion
//! language models.
//!
//! The crate converts a real-valued series into a textual digit
//! representation a language model can consume ([`codec`]), talks to
//! completion endpoints through a uniform interface with deterministic
//! local stubs ([`backend`]), and detects anomalies two ways:
//!
//! - [`prompter`]: ask the model directly which values in each window
//!   are anomalous, then merge the votes across samples and overlapping
//!   windows.
//! - [`detector`]: have the model forecast each window's continuation,
//!   reconstruct a predicted series, and flag indices whose residual
//!   exceeds a sliding-window threshold.
//!
//! [`eval`] scores detections against ground-truth intervals with an
//! overlap-aware F1 and provides a moving-average baseline.
//!
//! The numeric kernels are generic over the scalar type via
//! [`Real`]; the aliases below fix the common `f64` instantiation.

pub mod backend;
pub mod codec;
pub mod detector;
pub mod eval;
pub mod pipeline;
pub mod prompter;

mod scalar;

pub use pipeline::{AnomalyInterval, Detection, PipelineError, PipelineFailure, RunMetadata};
pub use scalar::Real;

/// `f64` signal, the default instantiation.
pub type Signal = codec::Signal<f64>;
/// `f32` signal, for memory-constrained batch runs.
pub type Signal32 = codec::Signal<f32>;
pub type ScaleTransform = codec::ScaleTransform<f64>;
pub type QuantizedSeries = codec::QuantizedSeries<f64>;
pub type ErrorSignal = detector::ErrorSignal<f64>;
pub type ForecastEnsemble = detector::ForecastEnsemble<f64>;
pub type DetectorRun = detector::DetectorRun<f64>;
pub type Dataset = eval::Dataset<f64>;
