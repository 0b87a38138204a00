//! Fairness sensitivity profiling and routing intervention for toy
//! mixture-of-experts language models.

pub mod capture;
pub mod error;
pub mod evaluation;
pub mod intervention;
pub mod model;
pub mod pipeline;
pub mod planted;
pub mod profiling;
pub mod prompts;
pub mod scalar;
pub mod stats;

pub use error::{FareError, Result};
pub use scalar::Scalar;

pub type Model = model::MoeModel<f64>;
pub type ModelF32 = model::MoeModel<f32>;
pub type RoutingLog64 = capture::RoutingLog<f64>;
pub type Stats64 = capture::ActivationStats<f64>;
pub type Profile = profiling::SensitivityProfile<f64>;
pub type Metrics64 = profiling::MetricTensor<f64>;
pub type Intervention = intervention::InterventionSpec<f64>;
