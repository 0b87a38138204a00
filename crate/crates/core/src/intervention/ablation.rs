use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arr::InterventionSpec;
use super::masking::{mask_experts, MaskSpec};
use super::transform::ProfileTransform;
use crate::error::{FareError, Result};
use crate::evaluation::{evaluate_endpoints, EndpointSummary, EvalBundle};
use crate::model::{LanguageModel, RouterHook};
use crate::profiling::SensitivityProfile;
use crate::scalar::Scalar;

pub const DEFAULT_RANDOM_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// One row of an ablation or masking table. Deltas are percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub condition: String,
    pub lambda: f64,
    pub delta_preference: f64,
    pub delta_utility: f64,
    pub ppl_ratio: f64,
    pub seeds: Vec<u64>,
}

impl AblationRow {
    fn versus(condition: String, lambda: f64, base: &EndpointSummary, run: &EndpointSummary, seeds: Vec<u64>) -> Self {
        AblationRow {
            condition,
            lambda,
            delta_preference: 100.0 * (run.preference - base.preference),
            delta_utility: 100.0 * (run.accuracy - base.accuracy),
            ppl_ratio: run.ppl / base.ppl,
            seeds,
        }
    }

    fn mean_of(condition: String, runs: &[AblationRow]) -> Self {
        let n = runs.len() as f64;
        AblationRow {
            condition,
            lambda: runs[0].lambda,
            delta_preference: runs.iter().map(|r| r.delta_preference).sum::<f64>() / n,
            delta_utility: runs.iter().map(|r| r.delta_utility).sum::<f64>() / n,
            ppl_ratio: runs.iter().map(|r| r.ppl_ratio).sum::<f64>() / n,
            seeds: runs.iter().flat_map(|r| r.seeds.iter().copied()).collect(),
        }
    }
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("condition,lambda,delta_preference,delta_utility,ppl_ratio,seeds\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.condition,
            r.lambda,
            r.delta_preference,
            r.delta_utility,
            r.ppl_ratio,
            seeds.join(";")
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AblationCondition {
    Fixed { label: String, transform: ProfileTransform },
    /// `Random` transform averaged over the given seeds.
    RandomAverage { label: String, seeds: Vec<u64> },
}

impl AblationCondition {
    pub fn fixed(label: &str, transform: ProfileTransform) -> Self {
        AblationCondition::Fixed {
            label: label.into(),
            transform,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            AblationCondition::Fixed { label, .. } | AblationCondition::RandomAverage { label, .. } => label,
        }
    }
}

/// The 13 listed synthetic-ablation rows: controls, power family, top-n.
pub fn default_conditions() -> Vec<AblationCondition> {
    let mut c = vec![
        AblationCondition::fixed("flatten", ProfileTransform::Flatten),
        AblationCondition::RandomAverage {
            label: "random".into(),
            seeds: DEFAULT_RANDOM_SEEDS.to_vec(),
        },
        AblationCondition::fixed("inverted", ProfileTransform::Inverted),
    ];
    for alpha in [0.25, 0.5, 1.0, 2.0, 4.0] {
        // alpha = 1 is the unmodified profile.
        let t = if alpha == 1.0 {
            ProfileTransform::Identity
        } else {
            ProfileTransform::Power { alpha }
        };
        let label = if alpha == 1.0 { "power-1 (fsp)".to_string() } else { format!("power-{alpha}") };
        c.push(AblationCondition::Fixed { label, transform: t });
    }
    for n in [5, 10, 25, 50, 100] {
        c.push(AblationCondition::fixed(&format!("top-{n}"), ProfileTransform::TopK { n, per_layer: false }));
    }
    c
}

fn summarize<T: Scalar, M: LanguageModel<T> + ?Sized>(
    model: &M,
    bundle: &EvalBundle,
    hook: Option<&dyn RouterHook<T>>,
) -> Result<EndpointSummary> {
    Ok(EndpointSummary::from(&evaluate_endpoints(model, bundle, hook)?))
}

/// Evaluate each condition at a fixed `lambda` against the unintervened baseline.
pub fn synthetic_ablation<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    profile: &SensitivityProfile<T>,
    conditions: &[AblationCondition],
    layers: &[usize],
    lambda: f64,
    bundle: &EvalBundle,
) -> Result<Vec<AblationRow>> {
    let base = summarize(model, bundle, None)?;
    let run = |transform: ProfileTransform| -> Result<EndpointSummary> {
        let spec = InterventionSpec::new(model.config(), profile, transform, layers.iter().copied(), T::lit(lambda))?;
        summarize(model, bundle, Some(&spec))
    };
    conditions
        .iter()
        .map(|c| match c {
            AblationCondition::Fixed { label, transform } => {
                Ok(AblationRow::versus(label.clone(), lambda, &base, &run(transform.clone())?, vec![]))
            }
            AblationCondition::RandomAverage { label, seeds } => {
                if seeds.is_empty() {
                    return Err(FareError::Config(format!("condition {label} has no seeds")));
                }
                let runs = seeds
                    .iter()
                    .map(|&seed| {
                        let s = run(ProfileTransform::Random { seed })?;
                        Ok(AblationRow::versus(label.clone(), lambda, &base, &s, vec![seed]))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AblationRow::mean_of(label.clone(), &runs))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingTable {
    /// Top, bottom and random-average rows, in that order.
    pub rows: Vec<AblationRow>,
    /// The individual random-group runs behind the average.
    pub random_runs: Vec<AblationRow>,
    pub top: MaskSpec,
    pub bottom: MaskSpec,
}

const MAX_DRAWS: usize = 10_000;

/// Uniform random group of `size` routed experts that keeps every layer
/// maskable. Rejection-sampled.
pub fn random_group(layers: &[usize], n_experts: usize, top_k: usize, size: usize, seed: u64) -> Result<MaskSpec> {
    let total = layers.len() * n_experts;
    if size > total {
        return Err(FareError::Config(format!("group of {size} exceeds {total} routed experts")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_DRAWS {
        let spec = MaskSpec::new(
            sample(&mut rng, total, size)
                .into_iter()
                .map(|i| (layers[i / n_experts], i % n_experts)),
        );
        let worst = layers
            .iter()
            .map(|&l| spec.masked.range((l, 0)..(l + 1, 0)).count())
            .max()
            .unwrap_or(0);
        if n_experts - worst >= top_k {
            return Ok(spec);
        }
    }
    Err(FareError::Config(format!(
        "no random group of {size} leaves {top_k} experts selectable in every layer"
    )))
}

/// Mask the `group_size` highest-phi, lowest-phi, and random expert groups
/// and measure utility and preference changes.
pub fn group_masking_experiment<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    profile: &SensitivityProfile<T>,
    group_size: usize,
    random_seeds: &[u64],
    bundle: &EvalBundle,
) -> Result<MaskingTable> {
    let cfg = model.config();
    let ranked = profile.ranked();
    if group_size > ranked.len() {
        return Err(FareError::Config(format!(
            "group size {group_size} exceeds {} profiled experts",
            ranked.len()
        )));
    }
    if random_seeds.is_empty() {
        return Err(FareError::Config("random masking needs at least one seed".into()));
    }
    let base = summarize(model, bundle, None)?;
    let eval_mask = |label: String, spec: MaskSpec, seeds: Vec<u64>| -> Result<AblationRow> {
        let masked = mask_experts(model, spec)?;
        let s = summarize(&masked, bundle, None)?;
        Ok(AblationRow::versus(label, 0.0, &base, &s, seeds))
    };
    let top = MaskSpec::new(ranked.iter().take(group_size).copied());
    let bottom = MaskSpec::new(ranked.iter().rev().take(group_size).copied());
    let random_runs = random_seeds
        .iter()
        .map(|&seed| {
            let spec = random_group(&profile.layers, cfg.n_experts, cfg.top_k, group_size, seed)?;
            eval_mask(format!("random-{group_size}"), spec, vec![seed])
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = vec![
        eval_mask(format!("top-{group_size}"), top.clone(), vec![])?,
        eval_mask(format!("bottom-{group_size}"), bottom.clone(), vec![])?,
        AblationRow::mean_of(format!("random-{group_size} (avg)"), &random_runs),
    ];
    Ok(MaskingTable {
        rows,
        random_runs,
        top,
        bottom,
    })
}
