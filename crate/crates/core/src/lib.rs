//! Synthetic tableware-dirt dataset pipeline: prompt combinatorics,
//! low-rank adapter algebra, cross-modal quality filtering, inference
//! service client, content-addressed dataset store and classification
//! metrics.
//!
//! Numeric code is generic over the scalar. [`Real`] covers `f32` and
//! `f64`; adapter merge and the regularizer also run over exact rationals.
//! The aliases below fix the scalar used by the pipeline.

pub mod adapter;
pub mod filter;
pub mod gateway;
pub mod image;
pub mod labels;
pub mod metrics;
pub mod prompt;
pub mod seed;
pub mod store;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive};

/// Floating-point scalar accepted by the filter and metrics code.
pub trait Real: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}

impl<T> Real for T where T: Float + FromPrimitive + Debug + Display + Send + Sync + 'static {}

/// Exact scalar for adapter algebra checks.
pub type Rational = num_rational::Ratio<i64>;

pub type Matrix = adapter::Matrix<f64>;
pub type MatrixF32 = adapter::Matrix<f32>;
pub type ExactMatrix = adapter::Matrix<Rational>;
pub type LowRankAdapter = adapter::LowRankAdapter<f64>;
pub type LowRankAdapterF32 = adapter::LowRankAdapter<f32>;
pub type ExactLowRankAdapter = adapter::LowRankAdapter<Rational>;
pub type RegularizerConfig = adapter::RegularizerConfig<f64>;

pub type FilterConfig = filter::FilterConfig<f64>;
pub type ScoredSample = filter::ScoredSample<f64>;
pub type PromptGroupStats = filter::PromptGroupStats<f64>;
pub type FilterReport = filter::FilterReport<f64>;

pub use labels::Task;
pub use seed::ContentHash;
