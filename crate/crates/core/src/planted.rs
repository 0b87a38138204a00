//! Toy models with known expert-group associations and knowledge-critical
//! experts, plus a second, independent activation counter used as an oracle
//! for the capture pipeline.
//!
//! Planting edits a freshly built model layer by layer. Each planted expert
//! gets a router-row component fitted to separate its target groups'
//! descriptor inputs and its fact-subject inputs from everything else, and
//! spare hidden units are rewired into threshold detectors: one per
//! descriptor surface form writing the group's attribute word, one per
//! assigned fact writing the answer. Router and output gains climb a
//! geometric ladder until every measured effect reaches its target.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::capture::{aggregate, capture_run, ActivationStats, AggregationMode};
use crate::error::{FareError, Result};
use crate::evaluation::continuation_score;
use crate::model::{build_model, sequence_log_likelihood, LanguageModel, ModelConfig, MoeModel};
use crate::prompts::{DeskInventory, GroupKey, McItem, MinimalPair, PromptSet, Vocabulary};
use crate::scalar::{softmax, top_k_indices, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedExpert {
    pub layer: usize,
    pub expert: usize,
    pub group: GroupKey,
    /// Minimum activation-rate shift for `group`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub biased_experts: Vec<BiasedExpert>,
    pub knowledge_experts: Vec<(usize, usize)>,
    /// Knowledge experts are the biased experts.
    pub entangled: bool,
    /// Number of distinct experts the bias is spread over.
    pub breadth: usize,
}

impl Default for PlantSpec {
    fn default() -> Self {
        PlantSpec {
            biased_experts: Vec::new(),
            knowledge_experts: Vec::new(),
            entangled: false,
            breadth: 1,
        }
    }
}

impl PlantSpec {
    /// Spread `breadth` biased experts round-robin over `layers` and
    /// `groups`. Expert ids are taken in a seeded order without repeats
    /// inside a layer.
    pub fn distributed(
        config: &ModelConfig,
        layers: &[usize],
        groups: &[GroupKey],
        breadth: usize,
        delta: f64,
        seed: u64,
    ) -> Result<Self> {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        if layers.is_empty() || groups.is_empty() {
            return Err(FareError::Config("distributed plant needs layers and groups".into()));
        }
        if breadth > layers.len() * config.n_experts {
            return Err(FareError::Config(format!(
                "breadth {breadth} exceeds {} routed experts in the planted layers",
                layers.len() * config.n_experts
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let orders: Vec<Vec<usize>> = layers
            .iter()
            .map(|_| {
                let mut ids: Vec<usize> = (0..config.n_experts).collect();
                ids.shuffle(&mut rng);
                ids
            })
            .collect();
        let biased_experts = (0..breadth)
            .map(|i| BiasedExpert {
                layer: layers[i % layers.len()],
                expert: orders[i % layers.len()][i / layers.len()],
                group: groups[i % groups.len()].clone(),
                delta,
            })
            .collect();
        Ok(PlantSpec {
            biased_experts,
            knowledge_experts: Vec::new(),
            entangled: false,
            breadth: breadth.max(1),
        })
    }

    /// Like [`PlantSpec::distributed`], but expert `i` targets a window of
    /// `per_expert` groups starting at `groups[i * per_expert % len]`.
    #[allow(clippy::too_many_arguments)]
    pub fn across_groups(
        config: &ModelConfig,
        layers: &[usize],
        groups: &[GroupKey],
        breadth: usize,
        per_expert: usize,
        delta: f64,
        seed: u64,
    ) -> Result<Self> {
        if per_expert == 0 || per_expert > groups.len() {
            return Err(FareError::Config(format!(
                "groups per expert must be in 1..={}, got {per_expert}",
                groups.len()
            )));
        }
        let mut spec = Self::distributed(config, layers, groups, breadth, delta, seed)?;
        let experts = spec.biased_pairs();
        spec.biased_experts = experts
            .into_iter()
            .enumerate()
            .flat_map(|(i, (layer, expert))| {
                (0..per_expert).map(move |j| BiasedExpert {
                    layer,
                    expert,
                    group: groups[(i * per_expert + j) % groups.len()].clone(),
                    delta,
                })
            })
            .collect();
        Ok(spec)
    }

    pub fn entangled(mut self) -> Self {
        self.entangled = true;
        self.knowledge_experts.clear();
        self
    }

    pub fn is_empty(&self) -> bool {
        self.biased_experts.is_empty() && self.knowledge_experts.is_empty()
    }

    fn biased_pairs(&self) -> Vec<(usize, usize)> {
        let mut seen = BTreeSet::new();
        self.biased_experts
            .iter()
            .map(|b| (b.layer, b.expert))
            .filter(|p| seen.insert(*p))
            .collect()
    }

    /// Knowledge experts after applying the entanglement flag.
    pub fn effective_knowledge(&self) -> Vec<(usize, usize)> {
        if self.entangled {
            self.biased_pairs()
        } else {
            let mut seen = BTreeSet::new();
            self.knowledge_experts.iter().copied().filter(|p| seen.insert(*p)).collect()
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.breadth == 0 {
            return Err(FareError::Config("plant breadth must be >= 1".into()));
        }
        let capacity = config.moe_layers.len() * config.n_experts;
        if self.breadth > capacity {
            return Err(FareError::Config(format!(
                "plant breadth {} exceeds {capacity} routed experts",
                self.breadth
            )));
        }
        let distinct = self.biased_pairs().len();
        if distinct > 0 && distinct != self.breadth {
            return Err(FareError::Config(format!(
                "breadth is {} but {distinct} distinct biased experts are listed",
                self.breadth
            )));
        }
        if self.entangled && !self.knowledge_experts.is_empty() {
            let k: BTreeSet<_> = self.knowledge_experts.iter().copied().collect();
            let b: BTreeSet<_> = self.biased_pairs().into_iter().collect();
            if k != b {
                return Err(FareError::Config(
                    "entangled plant lists knowledge experts that differ from the biased experts".into(),
                ));
            }
        }
        let check = |layer: usize, expert: usize| -> Result<()> {
            if !config.is_moe_layer(layer) {
                return Err(FareError::Config(format!("planted layer {layer} is not an MoE layer")));
            }
            if expert >= config.n_experts {
                return Err(FareError::Config(format!(
                    "planted expert {expert} outside 0..{}",
                    config.n_experts
                )));
            }
            Ok(())
        };
        for b in &self.biased_experts {
            check(b.layer, b.expert)?;
            if !(b.delta > 0.0 && b.delta < 1.0) {
                return Err(FareError::Config(format!("shift delta must be in (0, 1), got {}", b.delta)));
            }
        }
        for &(l, e) in &self.knowledge_experts {
            check(l, e)?;
        }
        let per_layer = self
            .biased_pairs()
            .into_iter()
            .chain(self.effective_knowledge())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .fold(BTreeMap::<usize, usize>::new(), |mut m, (l, _)| {
                *m.entry(l).or_default() += 1;
                m
            });
        if let Some((l, n)) = per_layer.into_iter().find(|&(_, n)| n > config.n_experts - config.top_k) {
            return Err(FareError::Config(format!(
                "{n} planted experts in layer {l} leave fewer than top_k={} unplanted",
                config.top_k
            )));
        }
        Ok(())
    }
}

/// Ladder and threshold settings for planting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantTuning {
    pub router_gain_start: f64,
    pub gain_step: f64,
    pub max_steps: usize,
    /// Extra multiple applied to the router gain once the target is reached.
    pub router_headroom: f64,
    /// Required stereo-minus-anti log-likelihood margin (nats).
    pub bias_margin: f64,
    /// Share of a group's descriptor sites at which each of its biased
    /// experts must be selected.
    pub site_coverage: f64,
    /// Share of a group's minimal pairs that must clear `bias_margin`.
    pub pair_coverage: f64,
    /// Required correct-minus-best-distractor margin (nats).
    pub fact_margin: f64,
    /// Minimum gate weight of a knowledge expert at its fact's subject.
    pub fact_gate: f64,
    pub output_gain_start: f64,
}

impl Default for PlantTuning {
    fn default() -> Self {
        PlantTuning {
            router_gain_start: 0.5,
            gain_step: 1.25,
            max_steps: 48,
            router_headroom: 1.0,
            bias_margin: 0.5,
            site_coverage: 0.25,
            pair_coverage: 0.75,
            fact_margin: 3.0,
            fact_gate: 0.25,
            output_gain_start: 0.25,
        }
    }
}

/// Data a plant is calibrated against.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantTarget {
    pub vocab: Vocabulary,
    pub suite: PromptSet,
    pub pairs: Vec<MinimalPair>,
    pub items: Vec<McItem>,
    /// Attribute token per group.
    pub attributes: Vec<(GroupKey, usize)>,
}

impl PlantTarget {
    pub fn from_inventory(inventory: &DeskInventory, demographic_budget: Option<usize>) -> Result<Self> {
        let vocab = inventory.vocabulary();
        let suite = inventory.suite(&vocab, demographic_budget)?;
        let pairs = inventory.minimal_pairs(&vocab)?;
        let items = inventory.mc_items(&vocab)?;
        let attributes = inventory
            .attributes
            .iter()
            .map(|(g, a)| {
                vocab
                    .id(a)
                    .map(|id| (g.clone(), id))
                    .ok_or_else(|| FareError::Config(format!("attribute `{a}` not in vocabulary")))
            })
            .collect::<Result<_>>()?;
        Ok(PlantTarget {
            vocab,
            suite,
            pairs,
            items,
            attributes,
        })
    }

    fn attribute(&self, group: &GroupKey) -> Option<usize> {
        self.attributes.iter().find(|(g, _)| g == group).map(|&(_, t)| t)
    }

    /// Descriptor-final token id -> group, from the suite.
    fn surface_groups(&self) -> BTreeMap<usize, GroupKey> {
        let neutral_len: BTreeMap<&str, usize> =
            self.suite.neutral().map(|p| (p.id.as_str(), p.tokens.len())).collect();
        self.suite
            .demographic()
            .filter_map(|p| {
                let start = p.descriptor_position?;
                let n = *neutral_len.get(p.paired_neutral.as_deref()?)?;
                Some((p.tokens[start + p.tokens.len().saturating_sub(n).max(1) - 1], p.condition.group()?))
            })
            .collect()
    }

    /// Group whose attribute token appears in the stereotyped sentence.
    fn pair_group(&self, pair: &MinimalPair) -> Option<(&GroupKey, usize)> {
        self.attributes.iter().find_map(|(g, t)| {
            pair.stereo.iter().position(|x| x == t).map(|pos| (g, pos))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedShift {
    pub layer: usize,
    pub expert: usize,
    pub group: GroupKey,
    pub delta: f64,
    /// Activation-rate shift measured on the calibration suite.
    pub measured: f64,
    pub router_gain: f64,
    pub output_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactRoute {
    pub item: usize,
    pub answer: usize,
    pub layer: usize,
    pub expert: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Biased experts per layer.
    pub planted: BTreeMap<usize, Vec<usize>>,
    pub knowledge: BTreeMap<usize, Vec<usize>>,
    pub shifts: Vec<PlantedShift>,
    pub fact_routes: Vec<FactRoute>,
    pub entangled: bool,
}

impl GroundTruth {
    pub fn planted_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.planted.iter().flat_map(|(&l, es)| es.iter().map(move |&e| (l, e))).collect()
    }

    pub fn knowledge_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.knowledge.iter().flat_map(|(&l, es)| es.iter().map(move |&e| (l, e))).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mean_of(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    let n = rows.len().max(1) as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Direction through the origin that scores every cluster of `pos` above
/// `neg`: logistic regression by gradient descent from `start`, with the
/// positive weight split evenly over clusters.
fn separating_direction(start: &[f64], pos: &[Vec<Vec<f64>>], neg: &[&Vec<f64>]) -> Vec<f64> {
    const STEPS: usize = 1500;
    const RATE: f64 = 1.0;
    const RIDGE: f64 = 1e-3;
    let mut weighted: Vec<(&[f64], f64, f64)> = Vec::new();
    for cluster in pos.iter().filter(|c| !c.is_empty()) {
        let w = 0.5 / (pos.len() * cluster.len()) as f64;
        weighted.extend(cluster.iter().map(|h| (h.as_slice(), 1.0, w)));
    }
    let wn = 0.5 / neg.len().max(1) as f64;
    weighted.extend(neg.iter().map(|h| (h.as_slice(), 0.0, wn)));
    let mut w = start.to_vec();
    let mut grad = vec![0.0; w.len()];
    for _ in 0..STEPS {
        grad.iter_mut().zip(&w).for_each(|(g, x)| *g = RIDGE * x);
        for &(h, label, weight) in &weighted {
            let p = 1.0 / (1.0 + (-dot(&w, h)).exp());
            let c = weight * (p - label);
            grad.iter_mut().zip(h).for_each(|(g, x)| *g += c * x);
        }
        w.iter_mut().zip(&grad).for_each(|(x, g)| *x -= RATE * g);
    }
    unit(&w)
}

/// Router inputs of one layer, grouped by role.
struct LayerInputs {
    /// All positions of neutral prompts.
    neutral: Vec<Vec<f64>>,
    /// Per descriptor-final token id: inputs at that position (suite and pairs).
    surface: BTreeMap<usize, Vec<Vec<f64>>>,
    /// Per MC item: input at the last context position.
    subject: Vec<Vec<f64>>,
    /// Every position seen.
    everything: Vec<Vec<f64>>,
    /// Suite prompts in order: group (None for neutral) and per-position inputs.
    suite: Vec<(Option<GroupKey>, Vec<Vec<f64>>)>,
    /// Per group: inputs at descriptor-final positions of minimal-pair sentences.
    sites: BTreeMap<GroupKey, Vec<Vec<f64>>>,
}

fn collect_inputs(model: &MoeModel<f64>, layer: usize, target: &PlantTarget) -> Result<LayerInputs> {
    let li = model
        .config
        .moe_layer_ids()
        .iter()
        .position(|&l| l == layer)
        .expect("validated MoE layer");
    let neutral_len: BTreeMap<&str, usize> = target
        .suite
        .neutral()
        .map(|p| (p.id.as_str(), p.tokens.len()))
        .collect();
    let mut out = LayerInputs {
        neutral: Vec::new(),
        surface: BTreeMap::new(),
        subject: Vec::new(),
        everything: Vec::new(),
        suite: Vec::new(),
        sites: BTreeMap::new(),
    };
    let surface_groups = target.surface_groups();
    for p in &target.suite.prompts {
        let h = model.router_inputs(&p.tokens)?.swap_remove(li);
        let h: Vec<Vec<f64>> = h.into_iter().map(|v| v.iter().map(|x| x.as_f64()).collect()).collect();
        out.suite.push((p.condition.group(), h.clone()));
        match (p.condition.group(), p.descriptor_position) {
            (Some(_), Some(start)) => {
                let width = p.paired_neutral.as_deref().and_then(|id| neutral_len.get(id)).map_or(1, |&n| {
                    p.tokens.len().saturating_sub(n).max(1)
                });
                let last = start + width - 1;
                out.surface.entry(p.tokens[last]).or_default().push(h[last].clone());
                out.everything.extend(h);
            }
            _ => {
                out.neutral.extend(h.iter().cloned());
                out.everything.extend(h);
            }
        }
    }
    for pair in &target.pairs {
        for seq in [&pair.stereo, &pair.anti] {
            let Some((_, attr_pos)) = target.pair_group(pair) else { continue };
            let h = model.router_inputs(seq)?.swap_remove(li);
            for (t, v) in h.into_iter().enumerate() {
                let v: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
                let is_desc = t + 1 == attr_pos;
                if is_desc {
                    out.surface.entry(seq[t]).or_default().push(v.clone());
                    if let Some(g) = surface_groups.get(&seq[t]) {
                        out.sites.entry(g.clone()).or_default().push(v.clone());
                    }
                }
                out.everything.push(v);
            }
        }
    }
    for item in &target.items {
        let mut seq = item.context.clone();
        seq.extend(&item.correct);
        let h = model.router_inputs(&seq)?.swap_remove(li);
        let last = item.context.len() - 1;
        for (t, v) in h.into_iter().enumerate() {
            let v: Vec<f64> = v.iter().map(|x| x.as_f64()).collect();
            if t == last {
                out.subject.push(v.clone());
            }
            out.everything.push(v);
        }
    }
    Ok(out)
}

/// Input weights and bias of a threshold detector along `dir` that reads
/// about 1 on `targets` and 0 on every other recorded input.
fn detector(dir: &[f64], targets: &[Vec<f64>], inputs: &LayerInputs) -> (Vec<f64>, f64) {
    let on: Vec<f64> = targets.iter().map(|h| dot(dir, h)).collect();
    let min_on = on.iter().copied().fold(f64::INFINITY, f64::min);
    let mut off: Vec<f64> = inputs
        .everything
        .iter()
        .filter(|h| !targets.contains(h))
        .map(|h| dot(dir, h))
        .collect();
    off.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let max_off = off.last().copied().unwrap_or(f64::NEG_INFINITY);
    let tau = if max_off < min_on {
        0.5 * (max_off + min_on)
    } else {
        let leaks = off.iter().filter(|&&x| x > 0.9 * min_on).count();
        warn!("detector is not separable: {leaks} of {} other inputs leak", off.len());
        0.9 * min_on
    };
    // The weakest target reads exactly 1.
    let gain = 1.0 / (min_on - tau).max(1e-3);
    (dir.iter().map(|x| x * gain).collect(), -tau * gain)
}

/// Selected experts and their renormalized gate weights for one input.
fn route_cached(router: &[f64], h: &[f64], n_experts: usize, top_k: usize) -> (Vec<usize>, Vec<f64>) {
    let d = h.len();
    let logits: Vec<f64> = (0..n_experts).map(|e| dot(&router[e * d..(e + 1) * d], h)).collect();
    let probs = softmax(&logits);
    let selected = top_k_indices(&logits, top_k);
    let mass: f64 = selected.iter().map(|&e| probs[e]).sum();
    let weights = selected.iter().map(|&e| probs[e] / mass).collect();
    (selected, weights)
}

/// Selection frequencies of one layer, counted as in capture aggregation.
struct CachedRates {
    baseline: Vec<f64>,
    conditional: BTreeMap<GroupKey, Vec<f64>>,
}

impl CachedRates {
    fn shift(&self, group: &GroupKey, expert: usize) -> f64 {
        self.conditional.get(group).map_or(0.0, |c| c[expert]) - self.baseline[expert]
    }
}

fn cached_rates(
    inputs: &LayerInputs,
    route: &dyn Fn(&[f64]) -> (Vec<usize>, Vec<f64>),
    n_experts: usize,
) -> CachedRates {
    let mut tallies: BTreeMap<Option<&GroupKey>, (Vec<f64>, usize)> = BTreeMap::new();
    for (group, hs) in &inputs.suite {
        let t = tallies.entry(group.as_ref()).or_insert_with(|| (vec![0.0; n_experts], 0));
        for h in hs {
            for e in route(h).0 {
                t.0[e] += 1.0;
            }
            t.1 += 1;
        }
    }
    let rate = |(counts, n): &(Vec<f64>, usize)| -> Vec<f64> { counts.iter().map(|c| c / (*n).max(1) as f64).collect() };
    CachedRates {
        baseline: tallies.get(&None).map(rate).unwrap_or_else(|| vec![0.0; n_experts]),
        conditional: tallies
            .iter()
            .filter_map(|(g, t)| g.map(|g| (g.clone(), rate(t))))
            .collect(),
    }
}

fn selection_rates(model: &MoeModel<f64>, suite: &PromptSet) -> Result<ActivationStats<f64>> {
    aggregate(&capture_run(model, suite, None)?, AggregationMode::SelectionFrequency)
}

fn group_shift(stats: &ActivationStats<f64>, layer: usize, expert: usize, group: &GroupKey) -> f64 {
    let li = stats.layer_index(layer).expect("captured layer");
    let gi = stats.groups.iter().position(|g| g == group).expect("group in suite");
    stats.conditional[gi][li][expert] - stats.baseline[li][expert]
}

/// Which hidden units of an expert have been rewired, and what they do.
#[derive(Default)]
struct ExpertPlan {
    /// Router inputs the expert must be selected on, one cluster per
    /// descriptor surface or fact subject.
    positives: Vec<Vec<Vec<f64>>>,
    route_dir: Vec<f64>,
    /// (hidden unit, output direction, is bias unit)
    units: Vec<(usize, Vec<f64>, bool)>,
}

/// Build a model from `config` and plant `spec` into it, calibrating against
/// `target`.
pub fn build_planted_model(
    config: &ModelConfig,
    spec: &PlantSpec,
    target: &PlantTarget,
) -> Result<(MoeModel<f64>, GroundTruth)> {
    build_planted_model_with(config, spec, target, &PlantTuning::default())
}

pub fn build_planted_model_with(
    config: &ModelConfig,
    spec: &PlantSpec,
    target: &PlantTarget,
    tuning: &PlantTuning,
) -> Result<(MoeModel<f64>, GroundTruth)> {
    spec.validate(config)?;
    if config.vocab_size != target.vocab.len() {
        return Err(FareError::Config(format!(
            "model vocabulary ({}) does not match plant target vocabulary ({})",
            config.vocab_size,
            target.vocab.len()
        )));
    }
    let mut model = build_model::<f64>(config)?;
    let knowledge = spec.effective_knowledge();
    let mut truth = GroundTruth {
        planted: BTreeMap::new(),
        knowledge: BTreeMap::new(),
        shifts: Vec::new(),
        fact_routes: Vec::new(),
        entangled: spec.entangled,
    };
    for b in &spec.biased_experts {
        if target.attribute(&b.group).is_none() || !target.suite.groups().contains(&b.group) {
            return Err(FareError::Config(format!("group {} has no prompts or attribute", b.group)));
        }
        let es = truth.planted.entry(b.layer).or_default();
        if !es.contains(&b.expert) {
            es.push(b.expert);
        }
    }
    for &(l, e) in &knowledge {
        truth.knowledge.entry(l).or_default().push(e);
    }
    if spec.is_empty() {
        return Ok((model, truth));
    }
    // Facts are dealt round-robin to knowledge experts.
    let fact_owner: Vec<Option<(usize, usize)>> = (0..target.items.len())
        .map(|i| (!knowledge.is_empty()).then(|| knowledge[i % knowledge.len()]))
        .collect();

    let d = config.d_model;
    let surface_groups = target.surface_groups();
    let layers: BTreeSet<usize> = spec
        .biased_experts
        .iter()
        .map(|b| b.layer)
        .chain(knowledge.iter().map(|&(l, _)| l))
        .collect();
    for &layer in &layers {
        let inputs = collect_inputs(&model, layer, target)?;
        // Group directions are centred on the all-group means so that only
        // the group-specific part of the input drives routing.
        let surface_mean = mean_of(&inputs.surface.values().flatten().cloned().collect::<Vec<_>>(), d);
        let mut plans: BTreeMap<usize, ExpertPlan> = BTreeMap::new();
        let mut next_unit: BTreeMap<usize, usize> = BTreeMap::new();
        let mut take_unit = |e: usize| -> Result<usize> {
            let u = next_unit.entry(e).or_default();
            if *u >= config.d_expert_hidden {
                return Err(FareError::Config(format!(
                    "expert {e} in layer {layer} has too few hidden units for its plant"
                )));
            }
            *u += 1;
            Ok(*u - 1)
        };

        let centered = |rows: &[Vec<f64>], around: &[f64]| -> Vec<f64> {
            unit(&mean_of(rows, d).iter().zip(around).map(|(a, m)| a - m).collect::<Vec<_>>())
        };
        let neutral_mean = mean_of(&inputs.neutral, d);
        let mut targets_of: BTreeMap<usize, BTreeSet<&GroupKey>> = BTreeMap::new();
        for b in spec.biased_experts.iter().filter(|b| b.layer == layer) {
            targets_of.entry(b.expert).or_default().insert(&b.group);
        }
        for (&e, groups) in &targets_of {
            let own = inputs
                .surface
                .iter()
                .filter(|(t, _)| surface_groups.get(t).is_some_and(|g| groups.contains(g)))
                .map(|(_, v)| v.clone());
            plans.entry(e).or_default().positives.extend(own);
            for &g in groups {
                let attr = target.attribute(g).expect("checked above");
                let out_dir = head_direction(&model, attr, target.attributes.iter().map(|&(_, t)| t));
                for (s, _) in surface_groups.iter().filter(|(_, sg)| *sg == g) {
                    let Some(hs) = inputs.surface.get(s) else { continue };
                    let u = take_unit(e)?;
                    let (w, bias) = detector(&centered(hs, &surface_mean), hs, &inputs);
                    set_unit_input(&mut model, layer, e, u, &w, bias);
                    plans.get_mut(&e).expect("inserted").units.push((u, out_dir.clone(), true));
                }
            }
        }
        for (i, owner) in fact_owner.iter().enumerate() {
            let Some((l, e)) = *owner else { continue };
            if l != layer {
                continue;
            }
            let h = &inputs.subject[i];
            let answer = target.items[i].correct[0];
            let candidates = std::iter::once(answer).chain(target.items[i].distractors.iter().map(|c| c[0]));
            let out_dir = head_direction(&model, answer, candidates);
            let u = take_unit(e)?;
            let (w, bias) = detector(&unit(h), std::slice::from_ref(h), &inputs);
            set_unit_input(&mut model, layer, e, u, &w, bias);
            let plan = plans.entry(e).or_default();
            plan.units.push((u, out_dir, false));
            plan.positives.push(vec![h.clone()]);
            truth.fact_routes.push(FactRoute {
                item: i,
                answer,
                layer,
                expert: e,
            });
        }
        for plan in plans.values_mut() {
            if plan.positives.is_empty() {
                plan.route_dir = vec![0.0; d];
                continue;
            }
            let others: Vec<&Vec<f64>> = inputs
                .everything
                .iter()
                .filter(|h| !plan.positives.iter().flatten().any(|p| p == *h))
                .collect();
            let all: Vec<Vec<f64>> = plan.positives.iter().flatten().cloned().collect();
            let start = unit(&mean_of(&all, d).iter().zip(&neutral_mean).map(|(a, b)| a - b).collect::<Vec<_>>());
            plan.route_dir = separating_direction(&start, &plan.positives, &others);
        }

        // Router gains, raised until every biased expert shifts by delta and
        // covers its descriptor sites, and every fact is routed to its expert.
        let biased_here: Vec<&BiasedExpert> = spec.biased_experts.iter().filter(|b| b.layer == layer).collect();
        let base_router = model.moe_block(layer).expect("MoE layer").router.clone();
        let apply_router = |model: &mut MoeModel<f64>, gain: &BTreeMap<usize, f64>| {
            let block = model.moe_block_mut(layer).expect("MoE layer");
            block.router.copy_from_slice(&base_router);
            for (&e, plan) in &plans {
                let row = &mut block.router[e * d..(e + 1) * d];
                row.iter_mut().zip(&plan.route_dir).for_each(|(r, x)| *r += gain[&e] * x);
            }
        };
        let mut gain: BTreeMap<usize, f64> = plans.keys().map(|&e| (e, tuning.router_gain_start)).collect();
        let mut shortfall = String::new();
        // Inputs to this layer are fixed while its router changes, so routing
        // is evaluated on the cached inputs.
        for step in 0..=tuning.max_steps {
            apply_router(&mut model, &gain);
            let router = &model.moe_block(layer).expect("MoE layer").router;
            let route = |h: &[f64]| route_cached(router, h, config.n_experts, config.top_k);
            let mut short: BTreeSet<usize> = BTreeSet::new();
            if !biased_here.is_empty() {
                let rates = cached_rates(&inputs, &route, config.n_experts);
                for b in &biased_here {
                    let shift = rates.shift(&b.group, b.expert);
                    let own = inputs.sites.get(&b.group).map(Vec::as_slice).unwrap_or(&[]);
                    let covered = if own.is_empty() {
                        1.0
                    } else {
                        own.iter().filter(|h| route(h).0.contains(&b.expert)).count() as f64 / own.len() as f64
                    };
                    if shift < b.delta || covered < tuning.site_coverage {
                        short.insert(b.expert);
                        shortfall = format!("expert {} on {}: shift {shift:.3}, coverage {covered:.2}", b.expert, b.group);
                    }
                }
            }
            for r in truth.fact_routes.iter().filter(|r| r.layer == layer) {
                let (selected, weights) = route(&inputs.subject[r.item]);
                let weight = selected.iter().position(|&x| x == r.expert).map_or(0.0, |i| weights[i]);
                if weight < tuning.fact_gate {
                    short.insert(r.expert);
                    shortfall = format!("expert {} has gate weight {weight:.3} on fact {}", r.expert, r.item);
                }
            }
            if short.is_empty() {
                break;
            }
            if step == tuning.max_steps {
                return Err(FareError::Config(format!(
                    "plant in layer {layer} did not reach its targets within {} gain steps ({shortfall})",
                    tuning.max_steps
                )));
            }
            for e in short {
                *gain.get_mut(&e).expect("seeded") *= tuning.gain_step;
            }
        }
        if tuning.router_headroom != 1.0 {
            gain.values_mut().for_each(|g| *g *= tuning.router_headroom);
            apply_router(&mut model, &gain);
        }
        let mut measured: BTreeMap<(usize, &GroupKey), f64> = BTreeMap::new();
        if !biased_here.is_empty() {
            let stats = selection_rates(&model, &target.suite)?;
            for b in &biased_here {
                measured.insert((b.expert, &b.group), group_shift(&stats, layer, b.expert, &b.group));
            }
        }

        // Output gains.
        let mut out_gain: BTreeMap<(usize, bool), f64> = BTreeMap::new();
        for (&e, plan) in &plans {
            for is_bias in [true, false] {
                if plan.units.iter().any(|u| u.2 == is_bias) {
                    out_gain.insert((e, is_bias), tuning.output_gain_start);
                }
            }
        }
        for step in 0..=tuning.max_steps {
            for (&(e, is_bias), &g) in &out_gain {
                for (u, dir, _) in plans[&e].units.iter().filter(|u| u.2 == is_bias) {
                    set_unit_output(&mut model, layer, e, *u, dir, g);
                }
            }
            // Each group and fact is checked once per step, then shared by
            // every expert that serves it.
            let mut missed: BTreeMap<&GroupKey, String> = BTreeMap::new();
            for g in biased_here.iter().map(|b| &b.group).collect::<BTreeSet<_>>() {
                if let Some(why) = bias_shortfall(&model, target, g, tuning)? {
                    missed.insert(g, why);
                }
            }
            let mut weak_facts: BTreeSet<usize> = BTreeSet::new();
            for r in truth.fact_routes.iter().filter(|r| r.layer == layer) {
                if !fact_satisfied(&model, &target.items[r.item], tuning.fact_margin)? {
                    weak_facts.insert(r.item);
                }
            }
            let mut pending = false;
            for (&(e, is_bias), g) in out_gain.iter_mut() {
                let why = if is_bias {
                    biased_here
                        .iter()
                        .filter(|b| b.expert == e)
                        .find_map(|b| missed.get(&b.group))
                        .map(|why| format!("expert {e}, {why}"))
                } else {
                    truth
                        .fact_routes
                        .iter()
                        .find(|r| r.layer == layer && r.expert == e && weak_facts.contains(&r.item))
                        .map(|r| format!("expert {e}, fact {} below margin", r.item))
                };
                if let Some(why) = why {
                    shortfall = why;
                    pending = true;
                    if step < tuning.max_steps {
                        *g *= tuning.gain_step;
                    }
                }
            }
            if !pending {
                break;
            }
            if step == tuning.max_steps {
                return Err(FareError::Config(format!(
                    "plant outputs in layer {layer} did not reach their margins within {} gain steps ({shortfall})",
                    tuning.max_steps
                )));
            }
        }
        for b in &biased_here {
            truth.shifts.push(PlantedShift {
                layer,
                expert: b.expert,
                group: b.group.clone(),
                delta: b.delta,
                measured: measured[&(b.expert, &b.group)],
                router_gain: gain[&b.expert],
                output_gain: out_gain.get(&(b.expert, true)).copied().unwrap_or(0.0),
            });
        }
        debug!("planted layer {layer}: router gains {gain:?}");
    }
    Ok((model, truth))
}

/// Unit vector moving the final normalized state toward `token` and away
/// from the mean of `competitors`.
fn head_direction(model: &MoeModel<f64>, token: usize, competitors: impl Iterator<Item = usize>) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = competitors.map(|t| model.head_row(t).to_vec()).collect();
    let m = mean_of(&rows, model.config.d_model);
    unit(&model.head_row(token).iter().zip(&m).map(|(a, b)| a - b).collect::<Vec<_>>())
}

fn set_unit_input(model: &mut MoeModel<f64>, layer: usize, expert: usize, unit: usize, w: &[f64], bias: f64) {
    let d = model.config.d_model;
    let mlp = &mut model.moe_block_mut(layer).expect("MoE layer").experts[expert];
    mlp.w_in[unit * d..(unit + 1) * d].copy_from_slice(w);
    mlp.b_in[unit] = bias;
}

fn set_unit_output(model: &mut MoeModel<f64>, layer: usize, expert: usize, unit: usize, dir: &[f64], gain: f64) {
    let mlp = &mut model.moe_block_mut(layer).expect("MoE layer").experts[expert];
    let h = mlp.hidden;
    for (row, &x) in dir.iter().enumerate() {
        mlp.w_out[row * h + unit] = gain * x;
    }
}

/// Why `group`'s minimal pairs miss the required margin, if they do.
fn bias_shortfall(model: &MoeModel<f64>, target: &PlantTarget, group: &GroupKey, tuning: &PlantTuning) -> Result<Option<String>> {
    let pairs: Vec<&MinimalPair> = target
        .pairs
        .iter()
        .filter(|p| target.pair_group(p).is_some_and(|(pg, _)| pg == group))
        .collect();
    let mut won = 0;
    for p in &pairs {
        let s = sequence_log_likelihood(model, &p.stereo, None)?;
        let a = sequence_log_likelihood(model, &p.anti, None)?;
        if s - a >= tuning.bias_margin {
            won += 1;
        }
    }
    Ok(((won as f64) < tuning.pair_coverage * pairs.len() as f64)
        .then(|| format!("{group}: {won} of {} pairs clear the margin", pairs.len())))
}

fn fact_satisfied(model: &MoeModel<f64>, item: &McItem, margin: f64) -> Result<bool> {
    let correct: f64 = continuation_score(model, &item.context, &item.correct, None)?;
    for dist in &item.distractors {
        let s: f64 = continuation_score(model, &item.context, dist, None)?;
        if correct - s < margin {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Direct per-prompt counting of expert selections, written independently of
/// the capture aggregation. Groups with no prompts are absent.
pub fn oracle_activation_rates<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    prompts: &PromptSet,
    mode: AggregationMode,
) -> Result<ActivationStats<T>> {
    let cfg = model.config();
    let layers = cfg.moe_layer_ids();
    let k = cfg.n_experts;
    let mut group_list: Vec<GroupKey> = Vec::new();
    for p in &prompts.prompts {
        if let Some(g) = p.condition.group() {
            if !group_list.contains(&g) {
                group_list.push(g);
            }
        }
    }
    group_list.sort();

    // sums[c][l][e] with c = 0 for neutral, 1 + group index otherwise.
    let mut sums = vec![vec![vec![T::zero(); k]; layers.len()]; group_list.len() + 1];
    let mut all = vec![vec![T::zero(); k]; layers.len()];
    let mut counts = vec![0usize; group_list.len() + 1];
    let mut ordered: Vec<&crate::prompts::Prompt> = prompts.prompts.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    for p in ordered {
        let c = match p.condition.group() {
            None => 0,
            Some(g) => 1 + group_list.iter().position(|x| *x == g).expect("listed"),
        };
        counts[c] += p.tokens.len();
        let out = model.forward(&p.tokens, None)?;
        for (li, &layer) in layers.iter().enumerate() {
            for pos in 0..p.tokens.len() {
                let rec = out
                    .routing
                    .iter()
                    .find(|r| r.layer == layer && r.position == pos)
                    .ok_or_else(|| FareError::Protocol(format!("no routing for layer {layer} position {pos}")))?;
                for e in 0..k {
                    let v = match mode {
                        AggregationMode::SelectionFrequency => {
                            if rec.selected.contains(&e) {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        AggregationMode::ProbabilityMass => rec.probs[e],
                    };
                    sums[c][li][e] += v;
                    all[li][e] += v;
                }
            }
        }
    }
    let rate = |s: &Vec<Vec<T>>, n: usize| -> Vec<Vec<T>> {
        s.iter()
            .map(|row| row.iter().map(|&x| if n == 0 { T::zero() } else { x / T::lit(n as f64) }).collect())
            .collect()
    };
    let total: usize = counts.iter().sum();
    let demo: usize = counts[1..].iter().sum();
    Ok(ActivationStats {
        mode,
        layers,
        n_experts: k,
        groups: group_list.clone(),
        baseline: rate(&sums[0], counts[0]),
        conditional: (1..=group_list.len()).map(|c| rate(&sums[c], counts[c])).collect(),
        group_marginal: counts[1..].iter().map(|&n| T::lit(n as f64) / T::lit(demo as f64)).collect(),
        frequency: rate(&all, total),
        neutral_tokens: counts[0],
        group_tokens: counts[1..].to_vec(),
    })
}
