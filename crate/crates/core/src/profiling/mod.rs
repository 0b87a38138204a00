//! Routing metrics and the composite fairness-sensitivity profile.

mod descriptive;
mod fsp;
mod metrics;

pub use descriptive::{average_ranks, descriptive_stats, gini, spearman, top_share, DescriptiveStats};
pub use fsp::{
    collapse_and_normalize, fsp_score, GroupCollapse, MetricWeights, NormalizedMetrics, Provenance,
    SensitivityProfile,
};
pub use metrics::{
    activation_rate_difference, ard, compute_metrics, entropy, jsd, normalize_per_layer, pmi,
    pmi_value, MetricOptions, MetricTensor, PmiForm, DEFAULT_PROB_FLOOR,
};

use crate::capture::ActivationStats;
use crate::error::Result;
use crate::scalar::Scalar;

/// Options for the full profiling pass.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct ProfileOptions {
    pub weights: MetricWeights,
    pub collapse: GroupCollapse,
    pub metrics: MetricOptions,
}

/// Metrics, normalization and scoring in one pass.
pub fn profile<T: Scalar>(
    stats: &ActivationStats<T>,
    options: &ProfileOptions,
    log_id: Option<String>,
) -> Result<(MetricTensor<T>, SensitivityProfile<T>)> {
    let metrics = compute_metrics(stats, options.metrics)?;
    let normalized = collapse_and_normalize(&metrics, options.collapse);
    let mut prof = fsp_score(&normalized, &options.weights)?;
    prof.provenance = Some(Provenance {
        weights: options.weights,
        aggregation: stats.mode,
        collapse: options.collapse,
        metric_options: options.metrics,
        log_id,
    });
    Ok((metrics, prof))
}

#[cfg(test)]
mod tests;
