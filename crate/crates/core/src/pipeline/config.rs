use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::capture::AggregationMode;
use crate::error::{FareError, Result};
use crate::intervention::{default_lambda_grid, DEFAULT_BETA, DEFAULT_LAMBDA_MAX, DEFAULT_PROBE_LAMBDA, DEFAULT_QUANTILE, DEFAULT_RANDOM_SEEDS};
use crate::model::{ModelConfig, ModelPreset};
use crate::profiling::{GroupCollapse, MetricWeights, PmiForm, DEFAULT_PROB_FLOOR};
use crate::stats::{DEFAULT_LEVEL, DEFAULT_PERMUTATIONS, DEFAULT_RESAMPLES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub prompts: PromptsSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Preset shape; ignored when `explicit` is given.
    pub preset: Option<ModelPreset>,
    /// Full shape. `vocab_size` is replaced by the prompt vocabulary size.
    pub explicit: Option<ModelConfig>,
    pub seed: u64,
    pub plant: Option<PlantSection>,
}

/// Planted bias: `breadth` experts spread over `layers`, each shifted by
/// `delta` for `groups_per_expert` groups taken one per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub layers: Vec<usize>,
    pub breadth: usize,
    pub delta: f64,
    #[serde(default = "default_groups_per_expert")]
    pub groups_per_expert: usize,
    #[serde(default)]
    pub entangled: bool,
    pub seed: u64,
}

fn default_groups_per_expert() -> usize {
    9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptsSection {
    pub n_templates: usize,
    pub n_professions: usize,
    pub surfaces_per_group: usize,
    pub n_facts: usize,
    /// Total number of demographic prompts; all variants when unset.
    pub demographic_budget: Option<usize>,
}

impl Default for PromptsSection {
    fn default() -> Self {
        PromptsSection {
            n_templates: 4,
            n_professions: 4,
            surfaces_per_group: 2,
            n_facts: 24,
            demographic_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub weights: MetricWeights,
    pub aggregation: AggregationMode,
    pub collapse: GroupCollapse,
    pub pmi_form: PmiForm,
    pub prob_floor: f64,
    pub lambda_grid: Vec<f64>,
    pub beta: f64,
    pub quantile: f64,
    pub probe_lambda: f64,
    /// Strength for the synthetic-ablation table.
    pub ablation_lambda: f64,
    pub mask_group_size: usize,
    pub n_perm: usize,
    pub n_boot: usize,
    pub level: f64,
    pub fdr_q: f64,
    pub seed: u64,
    pub random_seeds: Vec<u64>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            weights: MetricWeights::default(),
            aggregation: AggregationMode::default(),
            collapse: GroupCollapse::default(),
            pmi_form: PmiForm::AsWritten,
            prob_floor: DEFAULT_PROB_FLOOR,
            lambda_grid: default_lambda_grid(DEFAULT_LAMBDA_MAX),
            beta: DEFAULT_BETA,
            quantile: DEFAULT_QUANTILE,
            probe_lambda: DEFAULT_PROBE_LAMBDA,
            ablation_lambda: 1.0,
            mask_group_size: 10,
            n_perm: DEFAULT_PERMUTATIONS,
            n_boot: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            fdr_q: 0.05,
            seed: 0,
            random_seeds: DEFAULT_RANDOM_SEEDS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LogFormat {
    #[default]
    Jsonl,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub log_format: LogFormat,
    pub plots: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/default"),
            log_format: LogFormat::Jsonl,
            plots: true,
        }
    }
}

fn field(path: &str, msg: impl std::fmt::Display) -> FareError {
    FareError::Config(format!("{path}: {msg}"))
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "document".into());
            FareError::parse(source, at, e.message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FareError::io(path, e))?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Check every field; the first violation is reported by its dotted path.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.preset.is_none() && m.explicit.is_none() {
            return Err(field("model", "set `preset` or `explicit`"));
        }
        if let Some(e) = &m.explicit {
            let mut c = e.clone();
            c.vocab_size = c.vocab_size.max(1);
            c.validate().map_err(|err| field("model.explicit", err))?;
        }
        if let Some(p) = &m.plant {
            if p.layers.is_empty() {
                return Err(field("model.plant.layers", "must name at least one layer"));
            }
            if p.breadth == 0 {
                return Err(field("model.plant.breadth", "must be >= 1"));
            }
            if !(p.delta > 0.0 && p.delta < 1.0) {
                return Err(field("model.plant.delta", format!("must be in (0, 1), got {}", p.delta)));
            }
            if !(1..=9).contains(&p.groups_per_expert) {
                return Err(field("model.plant.groups_per_expert", "must be in 1..=9"));
            }
        }
        let pr = &self.prompts;
        if pr.n_templates == 0 || pr.n_professions == 0 {
            return Err(field("prompts", "n_templates and n_professions must be >= 1"));
        }
        if !(1..=2).contains(&pr.surfaces_per_group) {
            return Err(field("prompts.surfaces_per_group", "must be 1 or 2"));
        }
        if pr.n_facts < 4 {
            return Err(field("prompts.n_facts", "must be >= 4"));
        }
        if pr.demographic_budget == Some(0) {
            return Err(field("prompts.demographic_budget", "must be >= 1"));
        }
        let p = &self.pipeline;
        p.weights.validate().map_err(|e| field("pipeline.weights", e))?;
        if !(p.prob_floor > 0.0 && p.prob_floor < 1.0) {
            return Err(field("pipeline.prob_floor", "must be in (0, 1)"));
        }
        if p.lambda_grid.is_empty() || !p.lambda_grid.contains(&0.0) {
            return Err(field("pipeline.lambda_grid", "must be non-empty and contain 0"));
        }
        if p.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(field("pipeline.lambda_grid", "values must be finite and >= 0"));
        }
        if p.lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(field("pipeline.lambda_grid", "values must be strictly increasing"));
        }
        if !(p.beta >= 0.0 && p.beta.is_finite()) {
            return Err(field("pipeline.beta", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&p.quantile) {
            return Err(field("pipeline.quantile", "must be in [0, 1]"));
        }
        for (name, v) in [("probe_lambda", p.probe_lambda), ("ablation_lambda", p.ablation_lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(field(&format!("pipeline.{name}"), "must be finite and >= 0"));
            }
        }
        if p.mask_group_size == 0 {
            return Err(field("pipeline.mask_group_size", "must be >= 1"));
        }
        if p.n_perm == 0 || p.n_boot == 0 {
            return Err(field("pipeline", "n_perm and n_boot must be >= 1"));
        }
        if !(p.level > 0.0 && p.level < 1.0) {
            return Err(field("pipeline.level", "must be in (0, 1)"));
        }
        if !(p.fdr_q > 0.0 && p.fdr_q < 1.0) {
            return Err(field("pipeline.fdr_q", "must be in (0, 1)"));
        }
        if p.random_seeds.is_empty() {
            return Err(field("pipeline.random_seeds", "must list at least one seed"));
        }
        Ok(())
    }

    /// Apply a `--seed` override to every seed in the config.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        if let Some(p) = &mut self.model.plant {
            p.seed = seed;
        }
        self.pipeline.seed = seed;
        self
    }

    /// SHA-256 of the canonical JSON of everything except the output
    /// directory, so the same experiment hashes equally wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// The model shape for a vocabulary of `vocab_size` words.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut c = match (&self.model.explicit, self.model.preset) {
            (Some(e), _) => e.clone(),
            (None, Some(p)) => p.config(vocab_size, self.model.seed),
            (None, None) => unreachable!("validated"),
        };
        c.vocab_size = vocab_size;
        c.seed = self.model.seed;
        c
    }
}
