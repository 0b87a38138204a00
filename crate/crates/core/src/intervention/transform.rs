use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FareError, Result};
use crate::profiling::SensitivityProfile;
use crate::scalar::Scalar;

/// Ablation transforms of a sensitivity profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProfileTransform {
    Identity,
    /// Every entry becomes the global mean.
    Flatten,
    /// `phi_max - phi` with the global maximum.
    Inverted,
    /// Per-layer min-max normalize, raise to `alpha`, rescale to the layer max.
    Power { alpha: f64 },
    /// Keep the `n` largest entries, zero the rest.
    TopK {
        n: usize,
        #[serde(default)]
        per_layer: bool,
    },
    /// Uniform draws from `[0, phi_max]`.
    Random { seed: u64 },
}

impl fmt::Display for ProfileTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileTransform::Identity => write!(f, "identity"),
            ProfileTransform::Flatten => write!(f, "flatten"),
            ProfileTransform::Inverted => write!(f, "inverted"),
            ProfileTransform::Power { alpha } => write!(f, "power-{alpha}"),
            ProfileTransform::TopK { n, per_layer: false } => write!(f, "top-{n}"),
            ProfileTransform::TopK { n, per_layer: true } => write!(f, "top-{n}-per-layer"),
            ProfileTransform::Random { seed } => write!(f, "random-{seed}"),
        }
    }
}

impl ProfileTransform {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ProfileTransform::Power { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(FareError::Config(format!("power alpha must be positive, got {alpha}")))
            }
            ProfileTransform::TopK { n: 0, .. } => Err(FareError::Config("top-k n must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

fn cmp_desc<T: Scalar>(a: &T, b: &T) -> std::cmp::Ordering {
    b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal)
}

/// Apply `t` to `profile`. The flag is set when `TopK` asked for more
/// entries than exist and everything was kept.
pub fn transform_profile<T: Scalar>(
    profile: &SensitivityProfile<T>,
    t: &ProfileTransform,
) -> Result<(SensitivityProfile<T>, bool)> {
    t.validate()?;
    if profile.phi.iter().flatten().any(|x| !x.is_finite()) {
        return Err(FareError::Input("profile contains non-finite values".into()));
    }
    let all: Vec<T> = profile.phi.iter().flatten().copied().collect();
    let total = all.len();
    let global_max = all.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = profile.clone();
    let mut flag = false;
    match *t {
        ProfileTransform::Identity => {}
        ProfileTransform::Flatten => {
            let mean = all.iter().copied().sum::<T>() / T::lit(total.max(1) as f64);
            out.phi.iter_mut().flatten().for_each(|v| *v = mean);
        }
        ProfileTransform::Inverted => {
            out.phi.iter_mut().flatten().for_each(|v| *v = global_max - *v);
        }
        ProfileTransform::Power { alpha } => {
            let a = T::lit(alpha);
            for row in &mut out.phi {
                let lo = row.iter().copied().fold(T::infinity(), T::min);
                let hi = row.iter().copied().fold(T::neg_infinity(), T::max);
                let range = hi - lo;
                for v in row.iter_mut() {
                    *v = if range > T::zero() {
                        ((*v - lo) / range).powf(a) * hi
                    } else {
                        T::zero()
                    };
                }
            }
        }
        ProfileTransform::TopK { n, per_layer } => {
            if per_layer {
                for row in &mut out.phi {
                    flag |= n > row.len();
                    let mut idx: Vec<usize> = (0..row.len()).collect();
                    idx.sort_by(|&a, &b| cmp_desc(&row[a], &row[b]).then(a.cmp(&b)));
                    for &i in idx.iter().skip(n) {
                        row[i] = T::zero();
                    }
                }
            } else {
                flag = n > total;
                let width = profile.n_experts;
                let mut idx: Vec<usize> = (0..total).collect();
                idx.sort_by(|&a, &b| cmp_desc(&all[a], &all[b]).then(a.cmp(&b)));
                for &i in idx.iter().skip(n) {
                    out.phi[i / width][i % width] = T::zero();
                }
            }
        }
        ProfileTransform::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hi = global_max.max(T::zero()).as_f64();
            out.phi
                .iter_mut()
                .flatten()
                .for_each(|v| *v = T::lit(rng.random::<f64>() * hi));
        }
    }
    Ok((out, flag))
}
