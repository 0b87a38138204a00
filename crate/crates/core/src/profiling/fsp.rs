use serde::{Deserialize, Serialize};

use super::metrics::{min_max, normalize_per_layer, MetricOptions, MetricTensor};
use crate::capture::AggregationMode;
use crate::error::{FareError, Result};
use crate::scalar::Scalar;

/// Weights of the normalized metrics in the composite score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWeights {
    pub ard: f64,
    pub jsd: f64,
    pub pmi: f64,
    pub entropy: f64,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights {
            ard: 1.0,
            jsd: 0.5,
            pmi: 0.3,
            entropy: 0.0,
        }
    }
}

impl MetricWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.ard, self.jsd, self.pmi, self.entropy];
        if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(FareError::Config("metric weights must be finite and non-negative".into()));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(FareError::Config("at least one metric weight must be positive".into()));
        }
        Ok(())
    }
}

/// How per-group expert metrics are reduced to one value per expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupCollapse {
    #[default]
    Mean,
    Max,
}

impl GroupCollapse {
    fn apply<T: Scalar>(self, v: &[T]) -> T {
        match self {
            GroupCollapse::Mean if v.is_empty() => T::zero(),
            GroupCollapse::Mean => v.iter().copied().sum::<T>() / T::lit(v.len() as f64),
            GroupCollapse::Max => v.iter().copied().fold(T::zero(), T::max),
        }
    }
}

/// Metrics collapsed over groups and scaled to `[0, 1]`.
///
/// Expert-level metrics are min-max normalized within each layer. Layer-level
/// metrics carry one value per layer, so they are min-max normalized across
/// layers and then broadcast to every expert of the layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct NormalizedMetrics<T> {
    pub layers: Vec<usize>,
    /// `[layer][expert]`
    pub ard: Vec<Vec<T>>,
    /// `[layer][expert]`
    pub pmi: Vec<Vec<T>>,
    /// `[layer]`
    pub jsd: Vec<T>,
    /// `[layer]`, normalized mean absolute entropy shift versus neutral.
    pub entropy: Vec<T>,
}

pub fn collapse_and_normalize<T: Scalar>(m: &MetricTensor<T>, collapse: GroupCollapse) -> NormalizedMetrics<T> {
    let per_expert = |t: &Vec<Vec<Vec<T>>>| -> Vec<Vec<T>> {
        t.iter()
            .map(|layer| layer.iter().map(|groups| collapse.apply(groups)).collect())
            .collect()
    };
    let jsd: Vec<T> = m.jsd.iter().map(|g| collapse.apply(g)).collect();
    let ent_shift: Vec<T> = m
        .entropy
        .iter()
        .map(|row| {
            let shifts: Vec<T> = row[1..].iter().map(|&h| (h - row[0]).abs()).collect();
            collapse.apply(&shifts)
        })
        .collect();
    NormalizedMetrics {
        layers: m.layers.clone(),
        ard: normalize_per_layer(&per_expert(&m.ard)),
        pmi: normalize_per_layer(&per_expert(&m.pmi)),
        jsd: min_max(&jsd),
        entropy: min_max(&ent_shift),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub weights: MetricWeights,
    pub aggregation: AggregationMode,
    pub collapse: GroupCollapse,
    pub metric_options: MetricOptions,
    /// Identifier of the routing log the profile was computed from.
    pub log_id: Option<String>,
}

/// Per-(layer, expert) sensitivity score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SensitivityProfile<T> {
    pub layers: Vec<usize>,
    pub n_experts: usize,
    /// `[layer][expert]`
    pub phi: Vec<Vec<T>>,
    pub provenance: Option<Provenance>,
}

impl<T: Scalar> SensitivityProfile<T> {
    pub fn new(layers: Vec<usize>, phi: Vec<Vec<T>>) -> Result<Self> {
        if layers.len() != phi.len() {
            return Err(FareError::Input("profile layer count mismatch".into()));
        }
        let n_experts = phi.first().map_or(0, Vec::len);
        if phi.iter().any(|r| r.len() != n_experts) {
            return Err(FareError::Input("profile rows have unequal lengths".into()));
        }
        if phi.iter().flatten().any(|x| !x.is_finite()) {
            return Err(FareError::Input("profile contains non-finite values".into()));
        }
        Ok(SensitivityProfile {
            layers,
            n_experts,
            phi,
            provenance: None,
        })
    }

    /// All-zero profile over the given layers.
    pub fn zeros(layers: Vec<usize>, n_experts: usize) -> Self {
        let phi = vec![vec![T::zero(); n_experts]; layers.len()];
        SensitivityProfile {
            layers,
            n_experts,
            phi,
            provenance: None,
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&[T]> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.phi[i].as_slice())
    }

    /// `(layer, expert, phi)` triples in layer-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.layers.iter().zip(&self.phi).flat_map(|(&l, row)| {
            row.iter().enumerate().map(move |(e, &v)| (l, e, v))
        })
    }

    /// `(layer, expert)` pairs sorted by descending phi; ties by (layer, expert).
    pub fn ranked(&self) -> Vec<(usize, usize)> {
        let mut all: Vec<(usize, usize, T)> = self.entries().collect();
        all.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then((a.0, a.1).cmp(&(b.0, b.1)))
        });
        all.into_iter().map(|(l, e, _)| (l, e)).collect()
    }

    /// Experts of one layer by descending phi; ties by expert id.
    pub fn ranked_in_layer(&self, layer: usize) -> Option<Vec<usize>> {
        let row = self.layer(layer)?;
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
        Some(idx)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("layer,expert,phi\n");
        for (l, e, v) in self.entries() {
            out.push_str(&format!("{l},{e},{v}\n"));
        }
        out
    }
}

/// `phi(e, l) = sum_i w_i * m_i(e, l)` over normalized metrics.
pub fn fsp_score<T: Scalar>(m: &NormalizedMetrics<T>, weights: &MetricWeights) -> Result<SensitivityProfile<T>> {
    weights.validate()?;
    let (wa, wj, wp, we) = (
        T::lit(weights.ard),
        T::lit(weights.jsd),
        T::lit(weights.pmi),
        T::lit(weights.entropy),
    );
    let phi: Vec<Vec<T>> = (0..m.layers.len())
        .map(|l| {
            m.ard[l]
                .iter()
                .zip(&m.pmi[l])
                .map(|(&a, &p)| wa * a + wj * m.jsd[l] + wp * p + we * m.entropy[l])
                .collect()
        })
        .collect();
    SensitivityProfile::new(m.layers.clone(), phi)
}
