//! Routing telemetry: per-token router records, the routing log produced by
//! running a prompt suite, and the activation statistics aggregated from it.

mod codec;

pub use codec::{
    deserialize_log, deserialize_log_binary, read_log, serialize_log, serialize_log_binary,
    LOG_BINARY_MAGIC, LOG_SCHEMA_VERSION,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FareError, Result};
use crate::model::{LanguageModel, RouterHook};
use crate::prompts::{manifest, Condition, GroupKey, ManifestEntry, PromptSet};
use crate::scalar::Scalar;

/// Router state for one token at one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RoutingRecord<T> {
    pub layer: usize,
    pub position: usize,
    /// Raw router logits, present when a hook modified them.
    pub pre_logits: Option<Vec<T>>,
    /// Logits after any hook; these drive softmax and selection.
    pub logits: Vec<T>,
    pub probs: Vec<T>,
    /// Selected experts, highest logit first.
    pub selected: Vec<usize>,
    /// Renormalized gate weights aligned with `selected`.
    pub weights: Vec<T>,
}

impl<T: Scalar> RoutingRecord<T> {
    pub fn is_selected(&self, expert: usize) -> bool {
        self.selected.contains(&expert)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LogEntry<T> {
    pub prompt_id: String,
    pub condition: Condition,
    pub record: RoutingRecord<T>,
}

/// Routing records of a prompt suite plus its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct RoutingLog<T> {
    pub n_experts: usize,
    pub top_k: usize,
    pub moe_layers: Vec<usize>,
    pub manifest: Vec<ManifestEntry>,
    pub entries: Vec<LogEntry<T>>,
}

impl<T: Scalar> RoutingLog<T> {
    /// Every entry's prompt appears in the manifest with a matching condition.
    pub fn check_consistency(&self) -> Result<()> {
        let by_id: BTreeMap<&str, &ManifestEntry> = self
            .manifest
            .iter()
            .map(|m| (m.prompt_id.as_str(), m))
            .collect();
        for e in &self.entries {
            let m = by_id.get(e.prompt_id.as_str()).ok_or_else(|| {
                FareError::Protocol(format!("prompt `{}` missing from manifest", e.prompt_id))
            })?;
            let g = e.condition.group();
            if m.condition != e.condition.label()
                || m.axis != g.as_ref().map(|g| g.axis)
                || m.group != g.map(|g| g.group)
            {
                return Err(FareError::Protocol(format!(
                    "condition of `{}` disagrees with the manifest",
                    e.prompt_id
                )));
            }
            if !self.moe_layers.contains(&e.record.layer) {
                return Err(FareError::Protocol(format!(
                    "record for `{}` names non-MoE layer {}",
                    e.prompt_id, e.record.layer
                )));
            }
        }
        Ok(())
    }

    /// Groups listed in the manifest, sorted.
    pub fn manifest_groups(&self) -> Vec<GroupKey> {
        let mut g: Vec<GroupKey> = self
            .manifest
            .iter()
            .filter_map(|m| {
                Some(GroupKey {
                    axis: m.axis?,
                    group: m.group.clone()?,
                })
            })
            .collect();
        g.sort();
        g.dedup();
        g
    }
}

/// Run every prompt through the model and keep all routing records.
pub fn capture_run<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    prompts: &PromptSet,
    hook: Option<&dyn RouterHook<T>>,
) -> Result<RoutingLog<T>> {
    if prompts.is_empty() {
        return Err(FareError::Input("prompt set is empty".into()));
    }
    let per_prompt = prompts
        .prompts
        .par_iter()
        .map(|p| {
            let out = model
                .forward(&p.tokens, hook)
                .map_err(|e| e.context(format_args!("prompt `{}`", p.id)))?;
            Ok(out
                .routing
                .into_iter()
                .map(|record| LogEntry {
                    prompt_id: p.id.clone(),
                    condition: p.condition.clone(),
                    record,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let cfg = model.config();
    Ok(RoutingLog {
        n_experts: cfg.n_experts,
        top_k: cfg.top_k,
        moe_layers: cfg.moe_layer_ids(),
        manifest: manifest(prompts),
        entries: per_prompt.into_iter().flatten().collect(),
    })
}

/// What counts as an expert "activation".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Fraction of (token, layer) events whose top-k set contains the expert.
    #[default]
    SelectionFrequency,
    /// Mean routing probability assigned to the expert.
    ProbabilityMass,
}

/// Conditional activation statistics. Layer axes index `layers`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ActivationStats<T> {
    pub mode: AggregationMode,
    pub layers: Vec<usize>,
    pub n_experts: usize,
    pub groups: Vec<GroupKey>,
    /// `P(e)` from neutral prompts, `[layer][expert]`.
    pub baseline: Vec<Vec<T>>,
    /// `P(e|g)`, `[group][layer][expert]`.
    pub conditional: Vec<Vec<Vec<T>>>,
    /// `P(g)`: share of demographic tokens belonging to each group.
    pub group_marginal: Vec<T>,
    /// Routing frequency over all captured tokens, `[layer][expert]`.
    pub frequency: Vec<Vec<T>>,
    pub neutral_tokens: usize,
    pub group_tokens: Vec<usize>,
}

fn normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let s: T = v.iter().copied().sum();
    if s > T::zero() {
        v.iter().map(|&x| x / s).collect()
    } else {
        vec![T::one() / T::lit(v.len() as f64); v.len()]
    }
}

impl<T: Scalar> ActivationStats<T> {
    /// Neutral routing distribution `P_n` for a layer index.
    pub fn neutral_distribution(&self, layer_idx: usize) -> Vec<T> {
        normalize(&self.baseline[layer_idx])
    }

    /// Demographic routing distribution `P_d` for one group and layer index.
    pub fn group_distribution(&self, group_idx: usize, layer_idx: usize) -> Vec<T> {
        normalize(&self.conditional[group_idx][layer_idx])
    }

    pub fn layer_index(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }
}

struct Tally<T> {
    tokens: usize,
    /// `[layer][expert]`
    mass: Vec<Vec<T>>,
}

impl<T: Scalar> Tally<T> {
    fn new(layers: usize, experts: usize) -> Self {
        Tally {
            tokens: 0,
            mass: vec![vec![T::zero(); experts]; layers],
        }
    }

    fn rates(&self, layers: usize) -> Vec<Vec<T>> {
        let events = T::lit((self.tokens / layers.max(1)) as f64);
        self.mass
            .iter()
            .map(|row| row.iter().map(|&m| m / events).collect())
            .collect()
    }
}

/// Aggregate over the groups listed in the log manifest.
pub fn aggregate<T: Scalar>(log: &RoutingLog<T>, mode: AggregationMode) -> Result<ActivationStats<T>> {
    aggregate_for_groups(log, mode, &log.manifest_groups())
}

/// Aggregate with an explicit group list; every listed group must have tokens.
pub fn aggregate_for_groups<T: Scalar>(
    log: &RoutingLog<T>,
    mode: AggregationMode,
    groups: &[GroupKey],
) -> Result<ActivationStats<T>> {
    log.check_consistency()?;
    let n_layers = log.moe_layers.len();
    let k = log.n_experts;
    let layer_idx: BTreeMap<usize, usize> =
        log.moe_layers.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    let group_idx: BTreeMap<&GroupKey, usize> =
        groups.iter().enumerate().map(|(i, g)| (g, i)).collect();

    let mut neutral = Tally::new(n_layers, k);
    let mut per_group: Vec<Tally<T>> = groups.iter().map(|_| Tally::new(n_layers, k)).collect();
    let mut all = Tally::new(n_layers, k);

    // Fixed fold order makes the result independent of entry order.
    let mut order: Vec<&LogEntry<T>> = log.entries.iter().collect();
    order.sort_by(|a, b| {
        (a.prompt_id.as_str(), a.record.layer, a.record.position).cmp(&(
            b.prompt_id.as_str(),
            b.record.layer,
            b.record.position,
        ))
    });

    for entry in order {
        let li = layer_idx[&entry.record.layer];
        let tally = match entry.condition.group() {
            None => Some(&mut neutral),
            Some(g) => group_idx.get(&g).map(|&gi| &mut per_group[gi]),
        };
        let targets: Vec<&mut Tally<T>> = match tally {
            Some(t) => vec![t, &mut all],
            None => vec![&mut all],
        };
        for t in targets {
            t.tokens += 1;
            match mode {
                AggregationMode::SelectionFrequency => {
                    for &e in &entry.record.selected {
                        t.mass[li][e] += T::one();
                    }
                }
                AggregationMode::ProbabilityMass => {
                    for (m, &p) in t.mass[li].iter_mut().zip(&entry.record.probs) {
                        *m += p;
                    }
                }
            }
        }
    }

    if neutral.tokens == 0 {
        return Err(FareError::Protocol(
            "routing log has no neutral baseline records".into(),
        ));
    }
    if groups.is_empty() {
        return Err(FareError::Protocol(
            "routing log has no demographic condition".into(),
        ));
    }
    if let Some((g, _)) = groups.iter().zip(&per_group).find(|(_, t)| t.tokens == 0) {
        return Err(FareError::Protocol(format!("group {g} has no prompts in the log")));
    }

    let demo_tokens: usize = per_group.iter().map(|t| t.tokens).sum();
    Ok(ActivationStats {
        mode,
        layers: log.moe_layers.clone(),
        n_experts: k,
        groups: groups.to_vec(),
        baseline: neutral.rates(n_layers),
        conditional: per_group.iter().map(|t| t.rates(n_layers)).collect(),
        group_marginal: per_group
            .iter()
            .map(|t| T::lit(t.tokens as f64) / T::lit(demo_tokens as f64))
            .collect(),
        frequency: all.rates(n_layers),
        neutral_tokens: neutral.tokens / n_layers,
        group_tokens: per_group.iter().map(|t| t.tokens / n_layers).collect(),
    })
}

#[cfg(test)]
mod tests;
