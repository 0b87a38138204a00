//! Synthetic word-level vocabulary, the neutral/demographic prompt suite,
//! and loaders for minimal-pair and multiple-choice evaluation files.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FareError, Result};

/// Sociodemographic axes covered by the prompt suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Gender,
    Race,
    Religion,
    Nationality,
    Age,
    Sexuality,
    Disability,
    SocioeconomicStatus,
    PoliticalIdeology,
}

impl Axis {
    pub const ALL: [Axis; 9] = [
        Axis::Gender,
        Axis::Race,
        Axis::Religion,
        Axis::Nationality,
        Axis::Age,
        Axis::Sexuality,
        Axis::Disability,
        Axis::SocioeconomicStatus,
        Axis::PoliticalIdeology,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Gender => "gender",
            Axis::Race => "race",
            Axis::Religion => "religion",
            Axis::Nationality => "nationality",
            Axis::Age => "age",
            Axis::Sexuality => "sexuality",
            Axis::Disability => "disability",
            Axis::SocioeconomicStatus => "socioeconomic_status",
            Axis::PoliticalIdeology => "political_ideology",
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = FareError;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FareError::Input(format!("unknown axis `{s}`")))
    }
}

/// One demographic group: an axis plus a group label.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub axis: Axis,
    pub group: String,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.axis, self.group)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub axis: Axis,
    pub group: String,
    pub surface: String,
}

impl Descriptor {
    pub fn new(axis: Axis, group: &str, surface: &str) -> Result<Self> {
        if surface.trim().is_empty() {
            return Err(FareError::Input(format!(
                "descriptor for {axis}/{group} has empty surface text"
            )));
        }
        Ok(Descriptor {
            axis,
            group: group.to_string(),
            surface: surface.to_string(),
        })
    }

    pub fn key(&self) -> GroupKey {
        GroupKey {
            axis: self.axis,
            group: self.group.clone(),
        }
    }
}

/// Word-level vocabulary. Token ids are positions in `words`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(FareError::Input(format!("invalid vocabulary word {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(FareError::Input(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization; every word must be in the vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| FareError::Input(format!("word `{w}` not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rebuild the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Vocabulary::new(self.words)
    }
}

/// Marker for the descriptor slot inside a template.
pub const DESCRIPTOR_SLOT: &str = "[D]";
/// Marker for the profession slot inside a template.
pub const PROFESSION_SLOT: &str = "[P]";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Neutral,
    Demographic { axis: Axis, group: String },
}

impl Condition {
    pub fn group(&self) -> Option<GroupKey> {
        match self {
            Condition::Neutral => None,
            Condition::Demographic { axis, group } => Some(GroupKey {
                axis: *axis,
                group: group.clone(),
            }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Condition::Neutral => "neutral",
            Condition::Demographic { .. } => "demographic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: String,
    pub condition: Condition,
    pub text: String,
    pub tokens: Vec<usize>,
    pub token_count: usize,
    /// Id of the neutral prompt this variant was derived from.
    pub paired_neutral: Option<String>,
    /// Token position of the inserted descriptor.
    pub descriptor_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn neutral(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts
            .iter()
            .filter(|p| p.condition == Condition::Neutral)
    }

    pub fn demographic(&self) -> impl Iterator<Item = &Prompt> {
        self.prompts
            .iter()
            .filter(|p| p.condition != Condition::Neutral)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Distinct groups present, sorted.
    pub fn groups(&self) -> Vec<GroupKey> {
        let mut g: Vec<GroupKey> = self
            .prompts
            .iter()
            .filter_map(|p| p.condition.group())
            .collect();
        g.sort();
        g.dedup();
        g
    }
}

fn render(template: &str, profession: &str, descriptor: Option<&str>) -> (String, Option<usize>) {
    let mut words = Vec::new();
    let mut slot = None;
    for w in template.split_whitespace() {
        match w {
            DESCRIPTOR_SLOT => {
                if let Some(d) = descriptor {
                    slot = Some(words.len());
                    words.extend(d.split_whitespace());
                }
            }
            PROFESSION_SLOT => words.extend(profession.split_whitespace()),
            other => words.push(other),
        }
    }
    (words.join(" "), slot)
}

/// Cross every template with every profession (neutral prompts) and insert
/// descriptors into the descriptor slot (demographic prompts).
///
/// With `demographic_budget = None` each context receives every descriptor.
/// With a budget, variants are handed out round-robin: in round `r` context
/// `c` receives descriptor `(c + r) mod n_descriptors`, until the budget is
/// spent, so no context repeats a descriptor while rounds < descriptors.
pub fn generate_suite(
    templates: &[String],
    professions: &[String],
    descriptors: &[Descriptor],
    vocab: &Vocabulary,
    demographic_budget: Option<usize>,
) -> Result<PromptSet> {
    if templates.is_empty() || professions.is_empty() || descriptors.is_empty() {
        return Err(FareError::Input(
            "templates, professions and descriptors must be non-empty".into(),
        ));
    }
    if let Some(t) = templates
        .iter()
        .find(|t| t.split_whitespace().filter(|w| *w == DESCRIPTOR_SLOT).count() != 1)
    {
        return Err(FareError::Input(format!(
            "template `{t}` must contain exactly one {DESCRIPTOR_SLOT} slot"
        )));
    }

    let contexts: Vec<(usize, usize)> = (0..templates.len())
        .flat_map(|t| (0..professions.len()).map(move |p| (t, p)))
        .collect();
    let mut prompts = Vec::new();
    let mut neutral_ids = Vec::with_capacity(contexts.len());
    for &(t, p) in &contexts {
        let (text, _) = render(&templates[t], &professions[p], None);
        let tokens = vocab.tokenize(&text)?;
        let id = format!("n-t{t:02}-p{p:02}");
        neutral_ids.push(id.clone());
        prompts.push(Prompt {
            id,
            condition: Condition::Neutral,
            token_count: tokens.len(),
            text,
            tokens,
            paired_neutral: None,
            descriptor_position: None,
        });
    }

    let full = contexts.len() * descriptors.len();
    let budget = demographic_budget.unwrap_or(full);
    if budget > full {
        return Err(FareError::Input(format!(
            "demographic budget {budget} exceeds the {full} available variants"
        )));
    }
    let mut pairs: Vec<(usize, usize)> = (0..budget)
        .map(|j| {
            let (round, c) = (j / contexts.len(), j % contexts.len());
            (c, (c + round) % descriptors.len())
        })
        .collect();
    if demographic_budget.is_none() {
        pairs.sort_unstable();
    }
    for (c, di) in pairs {
        let (t, p) = contexts[c];
        let desc = &descriptors[di];
        let (text, slot) = render(&templates[t], &professions[p], Some(&desc.surface));
        let tokens = vocab.tokenize(&text)?;
        prompts.push(Prompt {
            id: format!("d-t{t:02}-p{p:02}-x{di:03}"),
            condition: Condition::Demographic {
                axis: desc.axis,
                group: desc.group.clone(),
            },
            token_count: tokens.len(),
            text,
            tokens,
            paired_neutral: Some(neutral_ids[c].clone()),
            descriptor_position: slot,
        });
    }
    Ok(PromptSet { prompts })
}

/// Stereotypical / anti-stereotypical sentence pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalPair {
    pub stereo: Vec<usize>,
    pub anti: Vec<usize>,
    pub axis: String,
    pub stereo_len: usize,
    pub anti_len: usize,
}

impl MinimalPair {
    pub fn new(stereo: Vec<usize>, anti: Vec<usize>, axis: impl Into<String>) -> Result<Self> {
        if stereo.is_empty() || anti.is_empty() {
            return Err(FareError::Input(
                "minimal pair sentences must be non-empty".into(),
            ));
        }
        Ok(MinimalPair {
            stereo_len: stereo.len(),
            anti_len: anti.len(),
            stereo,
            anti,
            axis: axis.into(),
        })
    }

    pub fn is_length_matched(&self) -> bool {
        self.stereo_len == self.anti_len
    }
}

/// Multiple-choice item scored by continuation likelihood.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McItem {
    pub context: Vec<usize>,
    pub correct: Vec<usize>,
    pub distractors: Vec<Vec<usize>>,
}

impl McItem {
    pub fn new(context: Vec<usize>, correct: Vec<usize>, distractors: Vec<Vec<usize>>) -> Result<Self> {
        if context.is_empty() || correct.is_empty() {
            return Err(FareError::Input("MC context and answer must be non-empty".into()));
        }
        if distractors.is_empty() {
            return Err(FareError::Input("MC item needs at least one distractor".into()));
        }
        for (i, d) in distractors.iter().enumerate() {
            if d.is_empty() || *d == correct || distractors[..i].contains(d) {
                return Err(FareError::Input("MC continuations must be distinct and non-empty".into()));
            }
        }
        Ok(McItem {
            context,
            correct,
            distractors,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairRow {
    pub stereo: String,
    pub anti: String,
    pub axis: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct McRow {
    pub question: String,
    pub correct: String,
    pub distractors: Vec<String>,
}

fn read_jsonl<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, R)>> {
    let text = fs::read_to_string(path).map_err(|e| FareError::io(path, e))?;
    let name = path.display().to_string();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map(|r| (i + 1, r))
                .map_err(|e| FareError::parse(&name, format!("row {}", i + 1), e.to_string()))
        })
        .collect()
}

/// Load `{"stereo", "anti", "axis"}` JSONL rows.
pub fn ingest_minimal_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<MinimalPair>> {
    let name = path.display().to_string();
    read_jsonl::<PairRow>(path)?
        .into_iter()
        .map(|(row, r)| {
            let tok = |s: &str| {
                vocab
                    .tokenize(s)
                    .map_err(|e| FareError::parse(&name, format!("row {row}"), e.to_string()))
            };
            MinimalPair::new(tok(&r.stereo)?, tok(&r.anti)?, r.axis)
                .map_err(|e| FareError::parse(&name, format!("row {row}"), e.to_string()))
        })
        .collect()
}

/// Load `{"question", "correct", "distractors"}` JSONL rows.
pub fn ingest_mc_items(path: &Path, vocab: &Vocabulary) -> Result<Vec<McItem>> {
    let name = path.display().to_string();
    read_jsonl::<McRow>(path)?
        .into_iter()
        .map(|(row, r)| {
            let wrap = |e: FareError| FareError::parse(&name, format!("row {row}"), e.to_string());
            let distractors = r
                .distractors
                .iter()
                .map(|d| vocab.tokenize(d))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            McItem::new(
                vocab.tokenize(&r.question).map_err(wrap)?,
                vocab.tokenize(&r.correct).map_err(wrap)?,
                distractors,
            )
            .map_err(wrap)
        })
        .collect()
}

pub fn write_minimal_pairs(path: &Path, pairs: &[MinimalPair], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let row = PairRow {
            stereo: vocab.decode(&p.stereo),
            anti: vocab.decode(&p.anti),
            axis: p.axis.clone(),
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| FareError::io(path, e))
}

pub fn write_mc_items(path: &Path, items: &[McItem], vocab: &Vocabulary) -> Result<()> {
    let mut out = String::new();
    for it in items {
        let row = McRow {
            question: vocab.decode(&it.context),
            correct: vocab.decode(&it.correct),
            distractors: it.distractors.iter().map(|d| vocab.decode(d)).collect(),
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| FareError::io(path, e))
}

/// Pairs whose two sentences have identical token counts, in input order.
pub fn length_matched_subset(pairs: &[MinimalPair]) -> Vec<MinimalPair> {
    pairs
        .iter()
        .filter(|p| p.is_length_matched())
        .cloned()
        .collect()
}

/// Prompt-suite manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub prompt_id: String,
    pub text: String,
    pub condition: String,
    pub axis: Option<Axis>,
    pub group: Option<String>,
    pub token_count: usize,
    pub paired_neutral: Option<String>,
}

pub fn manifest(set: &PromptSet) -> Vec<ManifestEntry> {
    set.prompts
        .iter()
        .map(|p| {
            let g = p.condition.group();
            ManifestEntry {
                prompt_id: p.id.clone(),
                text: p.text.clone(),
                condition: p.condition.label().to_string(),
                axis: g.as_ref().map(|g| g.axis),
                group: g.map(|g| g.group),
                token_count: p.token_count,
                paired_neutral: p.paired_neutral.clone(),
            }
        })
        .collect()
}

mod inventory;
pub use inventory::{DeskInventory, FactSpec};

#[cfg(test)]
mod tests;
