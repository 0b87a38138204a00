use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::evaluation::EvalReport;
use crate::intervention::{AblationRow, LayerScore, LayerSelection, ParetoResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub d_model: usize,
    pub n_layers: usize,
    pub moe_layers: Vec<usize>,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_shared: usize,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AalsSummary {
    pub scores: Vec<LayerScore>,
    pub selection: LayerSelection,
}

/// How the profile ranks planted experts, when the model has a plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    /// `(layer, expert, global rank)`, rank 0 is the highest phi.
    pub planted: Vec<(usize, usize, usize)>,
    /// Planted experts among the top `planted.len()` phi entries.
    pub hits: usize,
    pub min_measured_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub model: ModelSummary,
    /// Ten highest `(layer, expert, phi)` entries.
    pub top_experts: Vec<(usize, usize, f64)>,
    pub aals: Option<AalsSummary>,
    pub sweep: Option<ParetoResult>,
    pub lambda_star: f64,
    pub evaluation: EvalReport,
    pub ablation: Vec<AblationRow>,
    pub masking: Vec<AblationRow>,
    pub recovery: Option<Recovery>,
    /// SHA-256 of every artifact the report was built from.
    pub inputs: BTreeMap<String, String>,
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "# farelab report\n");
        let _ = writeln!(s, "config hash `{}`\n", self.config_hash);
        let _ = writeln!(
            s,
            "Model: d={} layers={} moe={:?} experts={} top-k={} shared={} checksum `{}`\n",
            m.d_model, m.n_layers, m.moe_layers, m.n_experts, m.top_k, m.n_shared, &m.checksum[..16.min(m.checksum.len())]
        );
        let _ = writeln!(s, "## Profile\n\n| layer | expert | phi |\n|---|---|---|");
        for (l, e, v) in &self.top_experts {
            let _ = writeln!(s, "| {l} | {e} | {v:.4} |");
        }
        if let Some(r) = &self.recovery {
            let _ = writeln!(
                s,
                "\nPlanted experts in the top {}: {} (min measured shift {:.4})",
                r.planted.len(),
                r.hits,
                r.min_measured_shift
            );
        }
        if let Some(a) = &self.aals {
            let _ = writeln!(s, "\n## Layer selection\n\n| layer | delta bias | delta PPL | R(l) |\n|---|---|---|---|");
            for l in &a.scores {
                let _ = writeln!(s, "| {} | {:.4} | {:.4} | {:.4} |", l.layer, l.delta_bias, l.delta_ppl, l.ratio);
            }
            let _ = writeln!(
                s,
                "\nSelected {:?} (threshold {:.4}, quantile {}, fallback {})",
                a.selection.layers, a.selection.threshold, a.selection.quantile, a.selection.fallback
            );
        }
        if let Some(p) = &self.sweep {
            let _ = writeln!(s, "\n## Strength sweep\n\n| lambda | preference | PPL ratio | feasible |\n|---|---|---|---|");
            for g in &p.grid {
                let _ = writeln!(s, "| {} | {:.4} | {:.4} | {} |", g.lambda, g.preference, g.ppl_ratio, g.feasible);
            }
        }
        let _ = writeln!(s, "\nlambda* = {} (beta {})", self.lambda_star, self.evaluation.beta);
        let _ = writeln!(
            s,
            "\n## Evaluation\n\n| subset | pref base | pref int | delta pref | delta util | PPL ratio | p pref | p util | pref CI |\n|---|---|---|---|---|---|---|---|---|"
        );
        for sub in &self.evaluation.subsets {
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:+.2} | {:+.2} | {:.4} | {:.4} | {:.4} | [{:.2}, {:.2}] |",
                sub.name,
                sub.baseline.preference,
                sub.intervened.preference,
                sub.delta_preference_points,
                sub.delta_utility_points,
                sub.ppl_ratio,
                sub.preference_test.p_value,
                sub.utility_test.p_value,
                sub.preference_ci.low,
                sub.preference_ci.high
            );
        }
        let _ = writeln!(s, "\nBH-adjusted (q = {}):", self.evaluation.bh.q);
        for (label, p) in self.evaluation.test_labels.iter().zip(&self.evaluation.bh.adjusted) {
            let _ = writeln!(s, "- {label}: {p:.4}");
        }
        for (title, rows) in [("Synthetic ablation", &self.ablation), ("Group masking", &self.masking)] {
            let _ = writeln!(s, "\n## {title}\n\n| condition | delta pref | delta util | PPL ratio |\n|---|---|---|---|");
            for r in rows {
                let _ = writeln!(
                    s,
                    "| {} | {:+.2} | {:+.2} | {:.4} |",
                    r.condition, r.delta_preference, r.delta_utility, r.ppl_ratio
                );
            }
        }
        s
    }
}
