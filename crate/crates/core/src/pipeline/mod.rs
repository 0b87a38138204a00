//! Config-driven pipeline: each stage reads the artifacts of earlier stages
//! from a run directory and writes its own, all tagged with the config hash.

mod artifacts;
mod config;
mod plots;
mod report;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

pub use artifacts::{embedded_hash, sha256_hex, ArtifactStore, HeaderStyle, ARTIFACT_TAG};
pub use config::{LogFormat, ModelSection, OutputSection, PipelineSection, PlantSection, PromptsSection, RunConfig};
pub use plots::{lambda_sweep_svg, layer_ratio_svg, render_plots, PlotFile, PLOT_LAYER_RATIO_FILE, PLOT_SWEEP_FILE};
pub use report::{AalsSummary, ModelSummary, Recovery, Report};

use crate::capture::{aggregate, capture_run, deserialize_log, deserialize_log_binary, serialize_log, serialize_log_binary};
use crate::error::{FareError, Result};
use crate::evaluation::{evaluation_report, EvalBundle, EvalReport, StatsSettings};
use crate::intervention::{
    aals_probe_all, aals_select, default_conditions, group_masking_experiment, pareto_search, rows_csv,
    synthetic_ablation, AblationRow, InterventionSpec, LayerScore, LayerSelection, MaskingTable, ParetoResult,
    ProfileTransform,
};
use crate::model::{build_model, model_from_str, model_to_string};
use crate::planted::{build_planted_model, GroundTruth, PlantSpec, PlantTarget};
use crate::profiling::{profile, MetricOptions, ProfileOptions};
use crate::prompts::{DeskInventory, GroupKey, McItem, MinimalPair, PromptSet, Vocabulary};
use crate::{Model, Profile, Stats64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    Extract,
    Profile,
    Select,
    Intervene,
    Evaluate,
    Ablate,
    Mask,
    Report,
    All,
}

impl Stage {
    pub const ORDER: [Stage; 9] = [
        Stage::Generate,
        Stage::Extract,
        Stage::Profile,
        Stage::Select,
        Stage::Intervene,
        Stage::Evaluate,
        Stage::Ablate,
        Stage::Mask,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Extract => "extract",
            Stage::Profile => "profile",
            Stage::Select => "select",
            Stage::Intervene => "intervene",
            Stage::Evaluate => "evaluate",
            Stage::Ablate => "ablate",
            Stage::Mask => "mask",
            Stage::Report => "report",
            Stage::All => "all",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = FareError;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ORDER
            .into_iter()
            .chain([Stage::All])
            .find(|st| st.name() == s)
            .ok_or_else(|| FareError::Config(format!("unknown stage `{s}`")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const MODEL_FILE: &str = "model.txt";
pub const CONFIG_FILE: &str = "config.toml";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const STATS_FILE: &str = "activation_stats.json";
pub const METRICS_EXPERT_FILE: &str = "metrics_expert.csv";
pub const METRICS_LAYER_FILE: &str = "metrics_layer.csv";
pub const PROFILE_FILE: &str = "profile.json";
pub const PROFILE_CSV_FILE: &str = "profile.csv";
pub const LAYER_SCORES_FILE: &str = "layer_scores.json";
pub const PARETO_FILE: &str = "pareto.json";
pub const EVAL_FILE: &str = "eval_report.json";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const MASKING_FILE: &str = "masking.json";
pub const MASKING_CSV_FILE: &str = "masking.csv";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_MD_FILE: &str = "report.md";
pub const MANIFEST_FILE: &str = "run_manifest.json";

fn log_file(format: LogFormat) -> &'static str {
    match format {
        LogFormat::Jsonl => "routing_log.jsonl",
        LogFormat::Binary => "routing_log.bin",
    }
}

/// Everything the evaluation stages need about the prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub vocabulary: Vocabulary,
    pub suite: PromptSet,
    pub pairs: Vec<MinimalPair>,
    pub items: Vec<McItem>,
    pub ppl_corpus: Vec<Vec<usize>>,
}

impl PromptBundle {
    pub fn eval_bundle(&self) -> EvalBundle {
        EvalBundle::new(self.pairs.clone(), self.items.clone(), self.ppl_corpus.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
    /// SHA-256 per written artifact.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub stages: Vec<StageRecord>,
}

/// One run directory bound to one config.
pub struct Pipeline {
    pub config: RunConfig,
    pub store: ArtifactStore,
}

struct Written(Vec<String>);

impl Pipeline {
    /// Open the run directory named in `config.output.dir`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let store = ArtifactStore::open(&config.output.dir, &config.hash())?;
        Ok(Pipeline { config, store })
    }

    /// Run one stage, or all of them in order for [`Stage::All`].
    pub fn run(&self, stage: Stage) -> Result<Vec<StageRecord>> {
        if stage == Stage::All {
            return Stage::ORDER.iter().map(|&s| self.run_one(s)).collect();
        }
        Ok(vec![self.run_one(stage)?])
    }

    fn run_one(&self, stage: Stage) -> Result<StageRecord> {
        info!("stage {stage}: start");
        let started_unix_ms = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        let t0 = Instant::now();
        let written = match stage {
            Stage::Generate => self.generate()?,
            Stage::Extract => self.extract()?,
            Stage::Profile => self.profile()?,
            Stage::Select => self.select()?,
            Stage::Intervene => self.intervene()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Ablate => self.ablate()?,
            Stage::Mask => self.mask()?,
            Stage::Report => self.report()?,
            Stage::All => unreachable!("expanded by run"),
        };
        let artifacts = written
            .0
            .into_iter()
            .map(|n| Ok((n.clone(), self.store.checksum(&n)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let record = StageRecord {
            stage,
            started_unix_ms,
            elapsed_ms: t0.elapsed().as_millis(),
            artifacts,
        };
        self.append_manifest(&record)?;
        info!("stage {stage}: done in {} ms", record.elapsed_ms);
        Ok(record)
    }

    fn append_manifest(&self, record: &StageRecord) -> Result<()> {
        let mut manifest = if self.store.exists(MANIFEST_FILE) {
            self.store.read_json::<RunManifest>(MANIFEST_FILE, "manifest", "any")?
        } else {
            RunManifest {
                config_hash: self.store.hash().to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                stages: Vec::new(),
            }
        };
        manifest.stages.push(record.clone());
        self.store.write_json("manifest", MANIFEST_FILE, &manifest)?;
        Ok(())
    }

    fn json<T: Serialize>(&self, stage: Stage, name: &str, value: &T) -> Result<String> {
        self.store.write_json(stage.name(), name, value)?;
        Ok(name.to_string())
    }

    fn text(&self, stage: Stage, name: &str, body: &str) -> Result<String> {
        self.store.write_bytes(stage.name(), name, HeaderStyle::Hash, body.as_bytes())?;
        Ok(name.to_string())
    }

    fn load_model(&self, stage: Stage) -> Result<Model> {
        let bytes = self.store.read_bytes(MODEL_FILE, stage.name(), Stage::Generate.name())?;
        let text = String::from_utf8(bytes).map_err(|_| FareError::parse(MODEL_FILE, "body", "invalid UTF-8"))?;
        model_from_str(&text, MODEL_FILE)
    }

    fn load<T: serde::de::DeserializeOwned>(&self, stage: Stage, name: &str, producer: Stage) -> Result<T> {
        self.store.read_json(name, stage.name(), producer.name())
    }

    fn load_prompts(&self, stage: Stage) -> Result<PromptBundle> {
        let mut b: PromptBundle = self.load(stage, PROMPTS_FILE, Stage::Generate)?;
        b.vocabulary = b.vocabulary.reindex()?;
        Ok(b)
    }

    fn load_profile(&self, stage: Stage) -> Result<Profile> {
        self.load(stage, PROFILE_FILE, Stage::Profile)
    }

    fn load_selection(&self, stage: Stage) -> Result<AalsSummary> {
        self.load(stage, LAYER_SCORES_FILE, Stage::Select)
    }

    fn load_pareto(&self, stage: Stage) -> Result<ParetoResult> {
        self.load(stage, PARETO_FILE, Stage::Intervene)
    }

    /// Validation and test splits of the evaluation data.
    fn splits(&self, prompts: &PromptBundle) -> (EvalBundle, EvalBundle) {
        prompts.eval_bundle().split_validation()
    }

    fn generate(&self) -> Result<Written> {
        let st = Stage::Generate;
        let p = &self.config.prompts;
        let inventory = DeskInventory::new(p.n_templates, p.n_professions, p.surfaces_per_group, p.n_facts)?;
        let target = PlantTarget::from_inventory(&inventory, p.demographic_budget)?;
        let ppl_corpus = inventory.ppl_corpus(&target.vocab, &target.suite)?;
        let mc = self.config.model_config(target.vocab.len());
        let mut out = vec![self.text(st, CONFIG_FILE, &self.config.to_toml())?];
        let model = match &self.config.model.plant {
            Some(plant) => {
                let groups = one_group_per_axis(&target.suite.groups());
                let mut spec = PlantSpec::across_groups(
                    &mc,
                    &plant.layers,
                    &groups,
                    plant.breadth,
                    plant.groups_per_expert.min(groups.len()),
                    plant.delta,
                    plant.seed,
                )?;
                if plant.entangled {
                    spec = spec.entangled();
                }
                let (model, truth) = build_planted_model(&mc, &spec, &target)?;
                out.push(self.json(st, GROUND_TRUTH_FILE, &truth)?);
                model
            }
            None => build_model::<f64>(&mc)?,
        };
        out.push(self.text(st, MODEL_FILE, &model_to_string(&model)?)?);
        let bundle = PromptBundle {
            vocabulary: target.vocab,
            suite: target.suite,
            pairs: target.pairs,
            items: target.items,
            ppl_corpus,
        };
        out.push(self.json(st, PROMPTS_FILE, &bundle)?);
        Ok(Written(out))
    }

    fn extract(&self) -> Result<Written> {
        let st = Stage::Extract;
        let model = self.load_model(st)?;
        let prompts = self.load_prompts(st)?;
        let log = capture_run(&model, &prompts.suite, None)?;
        let stats: Stats64 = aggregate(&log, self.config.pipeline.aggregation)?;
        let format = self.config.output.log_format;
        let body = match format {
            LogFormat::Jsonl => serialize_log(&log)?.into_bytes(),
            LogFormat::Binary => serialize_log_binary(&log)?,
        };
        self.store.write_bytes(st.name(), log_file(format), HeaderStyle::Hash, &body)?;
        Ok(Written(vec![log_file(format).to_string(), self.json(st, STATS_FILE, &stats)?]))
    }

    fn profile(&self) -> Result<Written> {
        let st = Stage::Profile;
        let format = self.config.output.log_format;
        // The log is checked for presence and consistency with the stats.
        let body = self.store.read_bytes(log_file(format), st.name(), Stage::Extract.name())?;
        let log = match format {
            LogFormat::Jsonl => {
                let text = String::from_utf8(body).map_err(|_| FareError::parse(log_file(format), "body", "invalid UTF-8"))?;
                deserialize_log::<f64>(&text, log_file(format))?
            }
            LogFormat::Binary => deserialize_log_binary::<f64>(&body, log_file(format))?,
        };
        let stats: Stats64 = self.load(st, STATS_FILE, Stage::Extract)?;
        if aggregate(&log, stats.mode)? != stats {
            return Err(FareError::Protocol("activation stats do not match the routing log".into()));
        }
        let pl = &self.config.pipeline;
        let options = ProfileOptions {
            weights: pl.weights,
            collapse: pl.collapse,
            metrics: MetricOptions {
                prob_floor: pl.prob_floor,
                pmi_form: pl.pmi_form,
            },
        };
        let log_id = self.store.checksum(log_file(format))?;
        let (metrics, prof) = profile(&stats, &options, Some(log_id))?;
        Ok(Written(vec![
            self.text(st, METRICS_EXPERT_FILE, &metrics.expert_csv())?,
            self.text(st, METRICS_LAYER_FILE, &metrics.layer_csv())?,
            self.json(st, PROFILE_FILE, &prof)?,
            self.text(st, PROFILE_CSV_FILE, &prof.csv())?,
        ]))
    }

    fn select(&self) -> Result<Written> {
        let st = Stage::Select;
        let model = self.load_model(st)?;
        let prompts = self.load_prompts(st)?;
        let prof = self.load_profile(st)?;
        let (validation, _) = self.splits(&prompts);
        let pl = &self.config.pipeline;
        let scores: Vec<LayerScore> = aals_probe_all(&model, &validation, &prof, pl.probe_lambda)?;
        let selection: LayerSelection = aals_select(&scores, pl.quantile)?;
        Ok(Written(vec![self.json(st, LAYER_SCORES_FILE, &AalsSummary { scores, selection })?]))
    }

    fn intervene(&self) -> Result<Written> {
        let st = Stage::Intervene;
        let model = self.load_model(st)?;
        let prompts = self.load_prompts(st)?;
        let prof = self.load_profile(st)?;
        let sel = self.load_selection(st)?;
        let (validation, _) = self.splits(&prompts);
        let pl = &self.config.pipeline;
        let pareto = pareto_search(&model, &validation, &prof, &sel.selection.layers, &pl.lambda_grid, pl.beta)?;
        Ok(Written(vec![self.json(st, PARETO_FILE, &pareto)?]))
    }

    fn evaluate(&self) -> Result<Written> {
        let st = Stage::Evaluate;
        let model = self.load_model(st)?;
        let prompts = self.load_prompts(st)?;
        let prof = self.load_profile(st)?;
        let sel = self.load_selection(st)?;
        let pareto = self.load_pareto(st)?;
        let (_, test) = self.splits(&prompts);
        let pl = &self.config.pipeline;
        let layers = sel.selection.layers.clone();
        let spec = InterventionSpec::new(
            model.config(),
            &prof,
            ProfileTransform::Identity,
            layers.iter().copied(),
            pareto.lambda_star,
        )?;
        let settings = StatsSettings {
            n_perm: pl.n_perm,
            n_boot: pl.n_boot,
            level: pl.level,
            fdr_q: pl.fdr_q,
            seed: pl.seed,
        };
        let report = evaluation_report(&model, &test, &spec, pareto.lambda_star, layers, pl.beta, &settings)?;
        Ok(Written(vec![self.json(st, EVAL_FILE, &report)?]))
    }

    fn ablate(&self) -> Result<Written> {
        let st = Stage::Ablate;
        let model = self.load_model(st)?;
        let prompts = self.load_prompts(st)?;
        let prof = self.load_profile(st)?;
        let sel = self.load_selection(st)?;
        let (_, test) = self.splits(&prompts);
        let rows = synthetic_ablation(
            &model,
            &prof,
            &default_conditions(),
            &sel.selection.layers,
            self.config.pipeline.ablation_lambda,
            &test,
        )?;
        Ok(Written(vec![
            self.json(st, ABLATION_FILE, &rows)?,
            self.text(st, ABLATION_CSV_FILE, &rows_csv(&rows))?,
        ]))
    }

    fn mask(&self) -> Result<Written> {
        let st = Stage::Mask;
        let model = self.load_model(st)?;
        let prompts = self.load_prompts(st)?;
        let prof = self.load_profile(st)?;
        let pl = &self.config.pipeline;
        let table = group_masking_experiment(&model, &prof, pl.mask_group_size, &pl.random_seeds, &prompts.eval_bundle())?;
        let mut all = table.rows.clone();
        all.extend(table.random_runs.iter().cloned());
        Ok(Written(vec![
            self.json(st, MASKING_FILE, &table)?,
            self.text(st, MASKING_CSV_FILE, &rows_csv(&all))?,
        ]))
    }

    fn report(&self) -> Result<Written> {
        let st = Stage::Report;
        let model = self.load_model(st)?;
        let prof = self.load_profile(st)?;
        let aals = self.load_selection(st)?;
        let sweep = self.load_pareto(st)?;
        let evaluation: EvalReport = self.load(st, EVAL_FILE, Stage::Evaluate)?;
        let ablation: Vec<AblationRow> = self.load(st, ABLATION_FILE, Stage::Ablate)?;
        let masking: MaskingTable = self.load(st, MASKING_FILE, Stage::Mask)?;
        let truth: Option<GroundTruth> = match self.config.model.plant {
            Some(_) => Some(self.load(st, GROUND_TRUTH_FILE, Stage::Generate)?),
            None => None,
        };
        let mut names = vec![
            MODEL_FILE,
            PROMPTS_FILE,
            STATS_FILE,
            PROFILE_FILE,
            LAYER_SCORES_FILE,
            PARETO_FILE,
            EVAL_FILE,
            ABLATION_FILE,
            MASKING_FILE,
            log_file(self.config.output.log_format),
        ];
        if truth.is_some() {
            names.push(GROUND_TRUTH_FILE);
        }
        let inputs = names
            .into_iter()
            .map(|n| Ok((n.to_string(), self.store.checksum(n)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let ranked = prof.ranked();
        let phi_of = |l: usize, e: usize| prof.layer(l).map_or(0.0, |row| row[e]);
        let recovery = truth.map(|t| {
            let planted: Vec<(usize, usize, usize)> = t
                .planted_pairs()
                .into_iter()
                .map(|(l, e)| (l, e, ranked.iter().position(|&p| p == (l, e)).unwrap_or(usize::MAX)))
                .collect();
            let hits = planted.iter().filter(|p| p.2 < planted.len()).count();
            Recovery {
                hits,
                min_measured_shift: t.shifts.iter().map(|s| s.measured).fold(f64::INFINITY, f64::min),
                planted,
            }
        });
        let cfg = model.config();
        let report = Report {
            config_hash: self.store.hash().to_string(),
            model: ModelSummary {
                d_model: cfg.d_model,
                n_layers: cfg.n_layers,
                moe_layers: cfg.moe_layer_ids(),
                n_experts: cfg.n_experts,
                top_k: cfg.top_k,
                n_shared: cfg.n_shared,
                checksum: model.checksum(),
            },
            top_experts: ranked.iter().take(10).map(|&(l, e)| (l, e, phi_of(l, e))).collect(),
            lambda_star: sweep.lambda_star,
            aals: Some(aals),
            sweep: Some(sweep),
            evaluation,
            ablation,
            masking: masking.rows,
            recovery,
            inputs,
        };
        let mut out = vec![
            self.json(st, REPORT_FILE, &report)?,
            {
                self.store
                    .write_bytes(st.name(), REPORT_MD_FILE, HeaderStyle::XmlComment, report.to_markdown().as_bytes())?;
                REPORT_MD_FILE.to_string()
            },
        ];
        if self.config.output.plots {
            for plot in render_plots(&report) {
                self.store
                    .write_bytes(st.name(), &plot.name, HeaderStyle::XmlComment, plot.svg.as_bytes())?;
                out.push(plot.name);
            }
        }
        Ok(Written(out))
    }
}

/// The first group of every axis, in the suite's group order.
pub fn one_group_per_axis(groups: &[GroupKey]) -> Vec<GroupKey> {
    let mut seen = std::collections::BTreeSet::new();
    groups.iter().filter(|g| seen.insert(g.axis)).cloned().collect()
}

fn stage_fn(config: &RunConfig, stage: Stage) -> Result<Vec<StageRecord>> {
    Pipeline::new(config.clone())?.run(stage)
}

pub fn cmd_generate(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Generate)
}

pub fn cmd_extract(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Extract)
}

pub fn cmd_profile(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Profile)
}

pub fn cmd_select(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Select)
}

pub fn cmd_intervene(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Intervene)
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Evaluate)
}

pub fn cmd_ablate(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Ablate)
}

pub fn cmd_mask(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Mask)
}

pub fn cmd_report(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::Report)
}

pub fn cmd_run_all(config: &RunConfig) -> Result<Vec<StageRecord>> {
    stage_fn(config, Stage::All)
}

/// Load `path`, apply CLI overrides, and run `stage`.
pub fn run_from_path(path: &Path, out_dir: Option<&Path>, seed: Option<u64>, stage: Stage) -> Result<Vec<StageRecord>> {
    let mut config = RunConfig::load(path)?;
    if let Some(dir) = out_dir {
        config.output.dir = dir.to_path_buf();
    }
    if let Some(s) = seed {
        config = config.with_seed(s);
    }
    stage_fn(&config, stage)
}
