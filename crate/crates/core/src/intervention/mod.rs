//! Routing interventions: logit reweighting, profile transforms, layer
//! selection, strength search, masking and ablation drivers.

mod aals;
mod ablation;
mod arr;
mod masking;
mod pareto;
mod transform;

pub use aals::*;
pub use ablation::*;
pub use arr::*;
pub use masking::*;
pub use pareto::*;
pub use transform::*;
