use serde::{Deserialize, Serialize};

use crate::capture::ActivationStats;
use crate::error::{FareError, Result};
use crate::prompts::GroupKey;
use crate::scalar::Scalar;

/// Default zero-probability floor applied before logarithms.
pub const DEFAULT_PROB_FLOOR: f64 = 1e-6;

const NORMALIZATION_TOL: f64 = 1e-6;

/// `|P(e|g) - P(e)|`.
pub fn activation_rate_difference<T: Scalar>(conditional: T, baseline: T) -> T {
    (conditional - baseline).abs()
}

fn check_distribution<T: Scalar>(p: &[T], name: &str) -> Result<()> {
    if p.iter().any(|&x| x < T::zero() || !x.is_finite()) {
        return Err(FareError::Input(format!("{name} has negative or non-finite entries")));
    }
    let s: T = p.iter().copied().sum();
    if (s - T::one()).abs() > T::lit(NORMALIZATION_TOL) {
        return Err(FareError::Input(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence in bits, so the result lies in `[0, 1]`.
pub fn jsd<T: Scalar>(p: &[T], q: &[T]) -> Result<T> {
    if p.len() != q.len() {
        return Err(FareError::Input(format!(
            "distribution lengths differ: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "P_d")?;
    check_distribution(q, "P_n")?;
    let half = T::lit(0.5);
    let kl_to_mid = |a: &[T], b: &[T]| -> T {
        a.iter()
            .zip(b)
            .filter(|(&x, _)| x > T::zero())
            .map(|(&x, &y)| {
                let m = (x + y) * half;
                x * (x / m).log2()
            })
            .sum()
    };
    let d = half * kl_to_mid(p, q) + half * kl_to_mid(q, p);
    Ok(d.max(T::zero()).min(T::one()))
}

/// Shannon entropy in bits with `0 log 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    -p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| x * x.log2())
        .sum::<T>()
}

/// Which PMI denominator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PmiForm {
    /// `log2(P(e|g) / (P(e) P(g)))`.
    #[default]
    AsWritten,
    /// `log2(P(e|g) / P(e))`.
    Standard,
}

/// PMI with every probability clamped to at least `floor` first.
pub fn pmi_value<T: Scalar>(conditional: T, baseline: T, group_marginal: T, floor: T, form: PmiForm) -> T {
    let c = conditional.max(floor);
    let b = baseline.max(floor);
    match form {
        PmiForm::AsWritten => (c / (b * group_marginal.max(floor))).log2(),
        PmiForm::Standard => (c / b).log2(),
    }
}

/// Min-max normalize each row independently; constant rows map to zero.
pub fn normalize_per_layer<T: Scalar>(values: &[Vec<T>]) -> Vec<Vec<T>> {
    values.iter().map(|row| min_max(row)).collect()
}

pub(crate) fn min_max<T: Scalar>(row: &[T]) -> Vec<T> {
    let lo = row.iter().copied().fold(T::infinity(), T::min);
    let hi = row.iter().copied().fold(T::neg_infinity(), T::max);
    let range = hi - lo;
    if !(range > T::zero()) {
        return vec![T::zero(); row.len()];
    }
    row.iter()
        .map(|&x| ((x - lo) / range).max(T::zero()).min(T::one()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub prob_floor: f64,
    pub pmi_form: PmiForm,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            prob_floor: DEFAULT_PROB_FLOOR,
            pmi_form: PmiForm::AsWritten,
        }
    }
}

/// Raw routing metrics. Layer axes follow `layers`; group axes follow `groups`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MetricTensor<T> {
    pub layers: Vec<usize>,
    pub groups: Vec<GroupKey>,
    pub n_experts: usize,
    /// `[layer][expert][group]`
    pub ard: Vec<Vec<Vec<T>>>,
    /// `[layer][group]`
    pub jsd: Vec<Vec<T>>,
    /// `[layer][expert][group]`
    pub pmi: Vec<Vec<Vec<T>>>,
    /// `[layer][condition]`, condition 0 is neutral, then one per group.
    pub entropy: Vec<Vec<T>>,
    pub options: MetricOptions,
}

pub fn ard<T: Scalar>(stats: &ActivationStats<T>) -> Vec<Vec<Vec<T>>> {
    (0..stats.layers.len())
        .map(|l| {
            (0..stats.n_experts)
                .map(|e| {
                    stats
                        .conditional
                        .iter()
                        .map(|c| activation_rate_difference(c[l][e], stats.baseline[l][e]))
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn pmi<T: Scalar>(stats: &ActivationStats<T>, options: &MetricOptions) -> Vec<Vec<Vec<T>>> {
    let floor = T::lit(options.prob_floor);
    (0..stats.layers.len())
        .map(|l| {
            (0..stats.n_experts)
                .map(|e| {
                    stats
                        .conditional
                        .iter()
                        .zip(&stats.group_marginal)
                        .map(|(c, &pg)| pmi_value(c[l][e], stats.baseline[l][e], pg, floor, options.pmi_form))
                        .collect()
                })
                .collect()
        })
        .collect()
}

pub fn compute_metrics<T: Scalar>(stats: &ActivationStats<T>, options: MetricOptions) -> Result<MetricTensor<T>> {
    let n_layers = stats.layers.len();
    let mut jsd_t = Vec::with_capacity(n_layers);
    let mut ent_t = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let pn = stats.neutral_distribution(l);
        let mut row = Vec::with_capacity(stats.groups.len());
        let mut ent = vec![entropy(&pn)];
        for g in 0..stats.groups.len() {
            let pd = stats.group_distribution(g, l);
            row.push(jsd(&pd, &pn)?);
            ent.push(entropy(&pd));
        }
        jsd_t.push(row);
        ent_t.push(ent);
    }
    Ok(MetricTensor {
        layers: stats.layers.clone(),
        groups: stats.groups.clone(),
        n_experts: stats.n_experts,
        ard: ard(stats),
        jsd: jsd_t,
        pmi: pmi(stats, &options),
        entropy: ent_t,
        options,
    })
}

impl<T: Scalar> MetricTensor<T> {
    /// Long-format CSV: one row per (layer, expert, group).
    pub fn expert_csv(&self) -> String {
        let mut out = String::from("layer,expert,axis,group,ard,pmi\n");
        for (li, &layer) in self.layers.iter().enumerate() {
            for e in 0..self.n_experts {
                for (gi, g) in self.groups.iter().enumerate() {
                    out.push_str(&format!(
                        "{layer},{e},{},{},{},{}\n",
                        g.axis, g.group, self.ard[li][e][gi], self.pmi[li][e][gi]
                    ));
                }
            }
        }
        out
    }

    /// One row per (layer, group) with JSD and the group's routing entropy.
    pub fn layer_csv(&self) -> String {
        let mut out = String::from("layer,axis,group,jsd,entropy,neutral_entropy\n");
        for (li, &layer) in self.layers.iter().enumerate() {
            for (gi, g) in self.groups.iter().enumerate() {
                out.push_str(&format!(
                    "{layer},{},{},{},{},{}\n",
                    g.axis,
                    g.group,
                    self.jsd[li][gi],
                    self.entropy[li][gi + 1],
                    self.entropy[li][0]
                ));
            }
        }
        out
    }
}
