use serde::{Deserialize, Serialize};

use super::fsp::SensitivityProfile;
use crate::capture::ActivationStats;
use crate::error::{FareError, Result};
use crate::scalar::Scalar;

/// Gini coefficient, mean-absolute-difference form:
/// `sum_i sum_j |x_i - x_j| / (2 n^2 mean)`. Zero for an all-zero vector.
pub fn gini<T: Scalar>(x: &[T]) -> T {
    let n = x.len();
    if n == 0 {
        return T::zero();
    }
    let total: T = x.iter().copied().sum();
    if !(total > T::zero()) {
        return T::zero();
    }
    // sorted form of the double sum: sum_i (2i - n + 1) x_(i)
    let mut s = x.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let nf = T::lit(n as f64);
    let weighted: T = s
        .iter()
        .enumerate()
        .map(|(i, &v)| T::lit(2.0 * i as f64 + 1.0 - n as f64) * v)
        .sum();
    (weighted / (nf * total)).max(T::zero()).min(T::one())
}

/// Share of mass on the `top` largest entries. Flag is set when fewer than
/// `top` entries exist and the share covers all of them.
pub fn top_share<T: Scalar>(x: &[T], top: usize) -> (T, bool) {
    let total: T = x.iter().copied().sum();
    let mut s = x.to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let short = x.len() < top;
    let head: T = s.iter().take(top).copied().sum();
    if total > T::zero() {
        (head / total, short)
    } else {
        (T::zero(), short)
    }
}

/// Average ranks (1-based), ties share the mean rank.
pub fn average_ranks<T: Scalar>(x: &[T]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation. Returns 0 when either input has no rank variance.
pub fn spearman<T: Scalar>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FareError::Input("spearman inputs differ in length".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub gini_per_layer: Vec<f64>,
    pub gini_pooled: f64,
    pub top10_share_per_layer: Vec<f64>,
    /// Mean of the per-layer top-10 shares.
    pub top10_share: f64,
    /// Set when a layer has fewer than 10 experts.
    pub top10_short: bool,
    /// Spearman correlation of phi and routing frequency over all (layer, expert) pairs.
    pub rho: f64,
}

pub fn descriptive_stats<T: Scalar>(
    stats: &ActivationStats<T>,
    profile: &SensitivityProfile<T>,
) -> Result<DescriptiveStats> {
    if stats.layers != profile.layers || stats.n_experts != profile.n_experts {
        return Err(FareError::Input(
            "activation stats and profile come from different model shapes".into(),
        ));
    }
    let gini_per_layer: Vec<f64> = stats.frequency.iter().map(|f| gini(f).as_f64()).collect();
    let pooled: Vec<T> = stats.frequency.iter().flatten().copied().collect();
    let shares: Vec<(T, bool)> = stats.frequency.iter().map(|f| top_share(f, 10)).collect();
    let top10_share_per_layer: Vec<f64> = shares.iter().map(|(s, _)| s.as_f64()).collect();
    let phi: Vec<T> = profile.phi.iter().flatten().copied().collect();
    Ok(DescriptiveStats {
        gini_pooled: gini(&pooled).as_f64(),
        top10_share: top10_share_per_layer.iter().sum::<f64>() / top10_share_per_layer.len() as f64,
        top10_short: shares.iter().any(|(_, s)| *s),
        top10_share_per_layer,
        gini_per_layer,
        rho: spearman(&phi, &pooled)?,
    })
}
