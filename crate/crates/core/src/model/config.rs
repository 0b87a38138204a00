use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{FareError, Result};

/// Shape of a toy MoE decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    /// Layers whose feed-forward block is a routed MoE block.
    pub moe_layers: BTreeSet<usize>,
    /// Routed experts per MoE layer.
    pub n_experts: usize,
    pub top_k: usize,
    /// Always-active experts per MoE layer. They have no router logits.
    pub n_shared: usize,
    pub d_expert_hidden: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("d_expert_hidden", self.d_expert_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(FareError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.top_k > self.n_experts {
            return Err(FareError::Config(format!(
                "top_k ({}) must not exceed n_experts ({})",
                self.top_k, self.n_experts
            )));
        }
        if self.moe_layers.is_empty() {
            return Err(FareError::Config(
                "moe_layers must name at least one layer".into(),
            ));
        }
        if let Some(&bad) = self.moe_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(FareError::Config(format!(
                "moe layer {bad} outside [0, {})",
                self.n_layers
            )));
        }
        Ok(())
    }

    pub fn is_moe_layer(&self, layer: usize) -> bool {
        self.moe_layers.contains(&layer)
    }

    /// MoE layer ids in ascending order.
    pub fn moe_layer_ids(&self) -> Vec<usize> {
        self.moe_layers.iter().copied().collect()
    }
}

/// Toy-scale mirrors of common production MoE shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// 64 experts, top-8, no shared experts.
    OlmoeLike,
    /// 8 experts, top-2.
    MixtralLike,
    /// 64 routed experts, top-6, 2 shared experts, first layer dense.
    DeepseekLike,
    /// 60 routed experts, top-4, one shared expert.
    Qwen15Like,
    /// 128 experts, top-8.
    Qwen3Like,
}

impl ModelPreset {
    pub const ALL: [ModelPreset; 5] = [
        ModelPreset::OlmoeLike,
        ModelPreset::MixtralLike,
        ModelPreset::DeepseekLike,
        ModelPreset::Qwen15Like,
        ModelPreset::Qwen3Like,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelPreset::OlmoeLike => "olmoe-like",
            ModelPreset::MixtralLike => "mixtral-like",
            ModelPreset::DeepseekLike => "deepseek-like",
            ModelPreset::Qwen15Like => "qwen15-like",
            ModelPreset::Qwen3Like => "qwen3-like",
        }
    }

    pub fn config(self, vocab_size: usize, seed: u64) -> ModelConfig {
        let (n_experts, top_k, n_shared, dense_first) = match self {
            ModelPreset::OlmoeLike => (64, 8, 0, false),
            ModelPreset::MixtralLike => (8, 2, 0, false),
            ModelPreset::DeepseekLike => (64, 6, 2, true),
            ModelPreset::Qwen15Like => (60, 4, 1, false),
            ModelPreset::Qwen3Like => (128, 8, 0, false),
        };
        let n_layers = if dense_first { 5 } else { 4 };
        let first_moe = usize::from(dense_first);
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers,
            moe_layers: (first_moe..n_layers).collect(),
            n_experts,
            top_k,
            n_shared,
            d_expert_hidden: 48,
            seed,
        }
    }
}

impl std::str::FromStr for ModelPreset {
    type Err = FareError;

    fn from_str(s: &str) -> Result<Self> {
        ModelPreset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| FareError::Config(format!("unknown model preset `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixtral_preset_shape() {
        let c = ModelPreset::MixtralLike.config(100, 1);
        assert_eq!((c.n_experts, c.top_k, c.n_shared), (8, 2, 0));
        c.validate().unwrap();
    }

    #[test]
    fn deepseek_preset_has_shared_and_dense_first_layer() {
        let c = ModelPreset::DeepseekLike.config(100, 1);
        assert_eq!((c.n_experts, c.top_k, c.n_shared), (64, 6, 2));
        assert!(!c.is_moe_layer(0));
        assert_eq!(c.moe_layers.len(), 4);
    }

    #[test]
    fn rejects_top_k_above_experts() {
        let mut c = ModelPreset::MixtralLike.config(100, 1);
        c.top_k = 9;
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("top_k"), "{err}");
    }

    #[test]
    fn rejects_out_of_range_moe_layer() {
        let mut c = ModelPreset::MixtralLike.config(100, 1);
        c.moe_layers.insert(10);
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_names_round_trip() {
        for p in ModelPreset::ALL {
            assert_eq!(p.name().parse::<ModelPreset>().unwrap(), p);
        }
    }
}
