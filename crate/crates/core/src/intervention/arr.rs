use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::transform::{transform_profile, ProfileTransform};
use crate::error::{FareError, Result};
use crate::model::{ModelConfig, RouterHook};
use crate::profiling::SensitivityProfile;
use crate::scalar::Scalar;

/// `z' = z - lambda * phi` on routed experts; entries in `shared` are left alone.
pub fn arr_adjust<T: Scalar>(
    gate_logits: &[T],
    phi_layer: &[T],
    lambda: T,
    shared: &BTreeSet<usize>,
) -> Result<Vec<T>> {
    if gate_logits.len() != phi_layer.len() {
        return Err(FareError::Input(format!(
            "gate logits ({}) and profile ({}) lengths differ",
            gate_logits.len(),
            phi_layer.len()
        )));
    }
    if lambda < T::zero() {
        return Err(FareError::Input("lambda must be non-negative".into()));
    }
    Ok(gate_logits
        .iter()
        .zip(phi_layer)
        .enumerate()
        .map(|(e, (&z, &p))| if shared.contains(&e) { z } else { z - lambda * p })
        .collect())
}

/// Token-independent routing penalty applied at a set of MoE layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct InterventionSpec<T> {
    pub layers: BTreeSet<usize>,
    pub lambda: T,
    /// Profile after `transform` has been applied.
    pub profile: SensitivityProfile<T>,
    pub transform: ProfileTransform,
}

impl<T: Scalar> InterventionSpec<T> {
    /// Transform `profile` and bind it to `layers` at strength `lambda`.
    pub fn new(
        config: &ModelConfig,
        profile: &SensitivityProfile<T>,
        transform: ProfileTransform,
        layers: impl IntoIterator<Item = usize>,
        lambda: T,
    ) -> Result<Self> {
        let layers: BTreeSet<usize> = layers.into_iter().collect();
        if let Some(&bad) = layers.iter().find(|l| !config.is_moe_layer(**l)) {
            return Err(FareError::Config(format!("intervention layer {bad} is not an MoE layer")));
        }
        if !(lambda >= T::zero()) || !lambda.is_finite() {
            return Err(FareError::Config("lambda must be finite and non-negative".into()));
        }
        if profile.n_experts != config.n_experts {
            return Err(FareError::Config(format!(
                "profile has {} experts per layer, model has {}",
                profile.n_experts, config.n_experts
            )));
        }
        if let Some(&missing) = layers.iter().find(|l| profile.layer(**l).is_none()) {
            return Err(FareError::Config(format!("profile has no row for layer {missing}")));
        }
        let (profile, _) = transform_profile(profile, &transform)?;
        Ok(InterventionSpec {
            layers,
            lambda,
            profile,
            transform,
        })
    }

    /// Same spec at a different strength.
    pub fn with_lambda(&self, lambda: T) -> Self {
        InterventionSpec {
            lambda,
            ..self.clone()
        }
    }
}

impl<T: Scalar> RouterHook<T> for InterventionSpec<T> {
    fn adjust(&self, layer: usize, logits: &mut [T]) {
        if !self.layers.contains(&layer) {
            return;
        }
        if let Some(phi) = self.profile.layer(layer) {
            // Router logits cover routed experts only; shared experts have none.
            for (z, &p) in logits.iter_mut().zip(phi) {
                *z -= self.lambda * p;
            }
        }
    }
}
