use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{FareError, Result};
use crate::model::{ForwardOutput, HookChain, LanguageModel, ModelConfig, RouterHook};
use crate::scalar::Scalar;

/// Set of routed `(layer, expert)` pairs that may never be selected.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub masked: BTreeSet<(usize, usize)>,
}

impl MaskSpec {
    pub fn new(masked: impl IntoIterator<Item = (usize, usize)>) -> Self {
        MaskSpec {
            masked: masked.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    /// Every masked pair names a routed expert of an MoE layer and at least
    /// `top_k` experts stay selectable in every layer.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let mut per_layer: BTreeMap<usize, usize> = BTreeMap::new();
        for &(layer, expert) in &self.masked {
            if !config.is_moe_layer(layer) {
                return Err(FareError::Config(format!("cannot mask layer {layer}: not an MoE layer")));
            }
            if expert >= config.n_experts {
                return Err(FareError::Config(format!(
                    "cannot mask expert {expert} in layer {layer}: only {} routed experts",
                    config.n_experts
                )));
            }
            *per_layer.entry(layer).or_default() += 1;
        }
        if let Some((layer, n)) = per_layer
            .into_iter()
            .find(|&(_, n)| config.n_experts - n < config.top_k)
        {
            return Err(FareError::Config(format!(
                "masking {n} experts in layer {layer} leaves fewer than top_k={} selectable",
                config.top_k
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> RouterHook<T> for MaskSpec {
    fn adjust(&self, layer: usize, logits: &mut [T]) {
        for &(_, e) in self.masked.range((layer, 0)..(layer + 1, 0)) {
            if let Some(z) = logits.get_mut(e) {
                *z = T::neg_infinity();
            }
        }
    }
}

/// A model whose routers never select the masked experts. Any hook passed to
/// `forward` runs first; the mask is applied after it.
pub struct MaskedModel<'m, M> {
    pub model: &'m M,
    pub mask: MaskSpec,
}

pub fn mask_experts<'m, T: Scalar, M: LanguageModel<T>>(model: &'m M, spec: MaskSpec) -> Result<MaskedModel<'m, M>> {
    spec.validate(model.config())?;
    Ok(MaskedModel { model, mask: spec })
}

impl<T: Scalar, M: LanguageModel<T>> LanguageModel<T> for MaskedModel<'_, M> {
    fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    fn forward(&self, tokens: &[usize], hook: Option<&dyn RouterHook<T>>) -> Result<ForwardOutput<T>> {
        if self.mask.is_empty() {
            return self.model.forward(tokens, hook);
        }
        match hook {
            Some(h) => self.model.forward(tokens, Some(&HookChain(vec![h, &self.mask]))),
            None => self.model.forward(tokens, Some(&self.mask)),
        }
    }
}
