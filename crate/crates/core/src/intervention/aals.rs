use serde::{Deserialize, Serialize};

use super::arr::InterventionSpec;
use super::transform::ProfileTransform;
use crate::error::{FareError, Result};
use crate::evaluation::{preference_score, EvalBundle};
use crate::model::{perplexity, LanguageModel};
use crate::profiling::SensitivityProfile;
use crate::scalar::Scalar;
use crate::stats::quantile_sorted;

/// Stabilizer in the ratio denominator.
pub const RATIO_EPSILON: f64 = 1e-6;
pub const DEFAULT_PROBE_LAMBDA: f64 = 1.0;
pub const DEFAULT_QUANTILE: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    /// Baseline preference minus intervened preference (fraction points).
    pub delta_bias: f64,
    /// Intervened perplexity minus baseline perplexity.
    pub delta_ppl: f64,
    /// `delta_bias / (|delta_ppl| + epsilon)`.
    pub ratio: f64,
}

pub fn fairness_efficiency_ratio(delta_bias: f64, delta_ppl: f64) -> f64 {
    delta_bias / (delta_ppl.abs() + RATIO_EPSILON)
}

/// Unintervened preference and perplexity of a validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeBaseline {
    pub preference: f64,
    pub ppl: f64,
}

pub fn probe_baseline<T: Scalar, M: LanguageModel<T> + ?Sized>(model: &M, validation: &EvalBundle) -> Result<ProbeBaseline> {
    Ok(ProbeBaseline {
        preference: preference_score(model, &validation.pairs, None, validation.scoring)?.preference,
        ppl: perplexity(model, &validation.ppl_corpus, None)?.as_f64(),
    })
}

/// Score one layer by intervening there alone at `lambda_probe`.
pub fn aals_probe<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    validation: &EvalBundle,
    layer: usize,
    profile: &SensitivityProfile<T>,
    lambda_probe: f64,
) -> Result<LayerScore> {
    let base = probe_baseline(model, validation)?;
    aals_probe_with_baseline(model, validation, layer, profile, lambda_probe, &base)
}

pub fn aals_probe_with_baseline<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    validation: &EvalBundle,
    layer: usize,
    profile: &SensitivityProfile<T>,
    lambda_probe: f64,
    base: &ProbeBaseline,
) -> Result<LayerScore> {
    let spec = InterventionSpec::new(
        model.config(),
        profile,
        ProfileTransform::Identity,
        [layer],
        T::lit(lambda_probe),
    )?;
    let pref = preference_score(model, &validation.pairs, Some(&spec), validation.scoring)?.preference;
    let ppl = perplexity(model, &validation.ppl_corpus, Some(&spec))?.as_f64();
    let delta_bias = base.preference - pref;
    let delta_ppl = ppl - base.ppl;
    Ok(LayerScore {
        layer,
        delta_bias,
        delta_ppl,
        ratio: fairness_efficiency_ratio(delta_bias, delta_ppl),
    })
}

/// Probe every MoE layer against one shared baseline.
pub fn aals_probe_all<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    validation: &EvalBundle,
    profile: &SensitivityProfile<T>,
    lambda_probe: f64,
) -> Result<Vec<LayerScore>> {
    let base = probe_baseline(model, validation)?;
    model
        .config()
        .moe_layer_ids()
        .into_iter()
        .map(|l| aals_probe_with_baseline(model, validation, l, profile, lambda_probe, &base))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layers: Vec<usize>,
    pub threshold: f64,
    pub quantile: f64,
    /// Set when no layer cleared the threshold and the max-ratio layer was used.
    pub fallback: bool,
}

/// Layers whose ratio is strictly above the `quantile` percentile (linear
/// interpolation). Never empty: falls back to the single best layer.
pub fn aals_select(scores: &[LayerScore], quantile: f64) -> Result<LayerSelection> {
    if scores.is_empty() {
        return Err(FareError::Input("no layer scores to select from".into()));
    }
    if !(0.0..=1.0).contains(&quantile) {
        return Err(FareError::Config(format!("quantile {quantile} outside [0, 1]")));
    }
    if scores.iter().any(|s| !s.ratio.is_finite()) {
        return Err(FareError::Input("layer ratios must be finite".into()));
    }
    let mut sorted: Vec<f64> = scores.iter().map(|s| s.ratio).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let threshold = quantile_sorted(&sorted, quantile);
    let mut layers: Vec<usize> = scores.iter().filter(|s| s.ratio > threshold).map(|s| s.layer).collect();
    let fallback = layers.is_empty();
    if fallback {
        let best = scores
            .iter()
            .fold(&scores[0], |b, s| if s.ratio > b.ratio { s } else { b });
        layers.push(best.layer);
    }
    layers.sort_unstable();
    Ok(LayerSelection {
        layers,
        threshold,
        quantile,
        fallback,
    })
}
