//! Paired sign-flip permutation tests, percentile bootstrap intervals and
//! Benjamini-Hochberg false-discovery-rate control.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FareError, Result};
use crate::scalar::Scalar;

pub const DEFAULT_PERMUTATIONS: usize = 10_000;
pub const DEFAULT_RESAMPLES: usize = 1_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Monte Carlo work is split into this many independently seeded shards so
/// results do not depend on the thread count.
const SHARDS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Mean paired difference.
    pub statistic: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    /// True when every sign pattern was enumerated.
    pub exact: bool,
    pub seed: u64,
}

fn shard_seed(seed: u64, shard: usize) -> u64 {
    seed ^ (shard as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `|sum|` of the permuted statistic counts as extreme when it reaches the
/// observed value up to rounding.
fn tolerance(diffs: &[f64]) -> f64 {
    1e-12 * diffs.iter().map(|d| d.abs()).sum::<f64>()
}

/// Exact two-sided sign-flip p-value over all `2^n` patterns.
pub fn sign_flip_exact<T: Scalar>(diffs: &[T]) -> Result<f64> {
    let d: Vec<f64> = diffs.iter().map(|x| x.as_f64()).collect();
    let n = d.len();
    if n == 0 {
        return Err(FareError::Input("no paired differences".into()));
    }
    if n > 30 {
        return Err(FareError::Input(format!("exact enumeration of 2^{n} patterns is infeasible")));
    }
    let observed = d.iter().sum::<f64>().abs();
    let tol = tolerance(&d);
    let total = 1u64 << n;
    let hits = (0..total)
        .into_par_iter()
        .filter(|mask| {
            let s: f64 = d
                .iter()
                .enumerate()
                .map(|(i, &x)| if mask >> i & 1 == 1 { -x } else { x })
                .sum();
            s.abs() >= observed - tol
        })
        .count();
    Ok(hits as f64 / total as f64)
}

/// Monte Carlo sign-flip p-value with add-one smoothing.
pub fn sign_flip_monte_carlo<T: Scalar>(diffs: &[T], n_perm: usize, seed: u64) -> Result<f64> {
    let d: Vec<f64> = diffs.iter().map(|x| x.as_f64()).collect();
    if d.is_empty() {
        return Err(FareError::Input("no paired differences".into()));
    }
    if n_perm == 0 {
        return Err(FareError::Config("n_perm must be >= 1".into()));
    }
    let observed = d.iter().sum::<f64>().abs();
    let tol = tolerance(&d);
    let hits: usize = (0..SHARDS)
        .into_par_iter()
        .map(|s| {
            let quota = n_perm / SHARDS + usize::from(s < n_perm % SHARDS);
            let mut rng = ChaCha8Rng::seed_from_u64(shard_seed(seed, s));
            (0..quota)
                .filter(|_| {
                    let sum: f64 = d
                        .iter()
                        .map(|&x| if rng.random::<bool>() { x } else { -x })
                        .sum();
                    sum.abs() >= observed - tol
                })
                .count()
        })
        .sum();
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}

/// Two-sided paired permutation test on the mean difference. Enumerates all
/// sign patterns when `2^n <= n_perm`, otherwise samples `n_perm` of them.
pub fn paired_permutation_test<T: Scalar>(diffs: &[T], n_perm: usize, seed: u64) -> Result<TestResult> {
    if diffs.is_empty() {
        return Err(FareError::Input("no paired differences".into()));
    }
    let n = diffs.len();
    let statistic = diffs.iter().map(|x| x.as_f64()).sum::<f64>() / n as f64;
    let exact = n < 64 && (1u128 << n) <= n_perm as u128;
    let (p_value, used) = if exact {
        (sign_flip_exact(diffs)?, 1usize << n)
    } else {
        (sign_flip_monte_carlo(diffs, n_perm, seed)?, n_perm)
    };
    Ok(TestResult {
        statistic,
        p_value,
        n_permutations: used,
        exact,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiResult {
    pub estimate: f64,
    pub low: f64,
    pub high: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub seed: u64,
}

/// Linear-interpolation quantile of sorted data (`q` in `[0, 1]`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Percentile bootstrap interval for the mean.
pub fn bootstrap_ci<T: Scalar>(values: &[T], n_resamples: usize, level: f64, seed: u64) -> Result<CiResult> {
    if values.is_empty() {
        return Err(FareError::Input("bootstrap needs at least one value".into()));
    }
    if !(0.0..1.0).contains(&level) || level == 0.0 {
        return Err(FareError::Config(format!("confidence level {level} outside (0, 1)")));
    }
    if n_resamples == 0 {
        return Err(FareError::Config("n_resamples must be >= 1".into()));
    }
    let v: Vec<f64> = values.iter().map(|x| x.as_f64()).collect();
    let n = v.len();
    let mean = |xs: &mut dyn Iterator<Item = f64>| xs.sum::<f64>() / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n_resamples)
        .map(|_| mean(&mut (0..n).map(|_| v[rng.random_range(0..n)])))
        .collect();
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let alpha = (1.0 - level) / 2.0;
    Ok(CiResult {
        estimate: mean(&mut v.iter().copied()),
        low: quantile_sorted(&means, alpha),
        high: quantile_sorted(&means, 1.0 - alpha),
        level,
        n_resamples,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    pub rejected: Vec<bool>,
    pub adjusted: Vec<f64>,
    pub q: f64,
}

/// Benjamini-Hochberg step-up procedure. Outputs follow the input order.
pub fn bh_correct(p_values: &[f64], q: f64) -> Result<BhResult> {
    if !(q > 0.0 && q < 1.0) {
        return Err(FareError::Config(format!("FDR level q={q} outside (0, 1)")));
    }
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(FareError::Input(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].partial_cmp(&p_values[b]).expect("finite p").then(a.cmp(&b)));

    let cutoff = (1..=m)
        .rev()
        .find(|&i| p_values[order[i - 1]] <= i as f64 / m as f64 * q)
        .unwrap_or(0);
    let mut rejected = vec![false; m];
    for &idx in &order[..cutoff] {
        rejected[idx] = true;
    }

    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for i in (1..=m).rev() {
        let idx = order[i - 1];
        running = running.min(m as f64 / i as f64 * p_values[idx]);
        adjusted[idx] = running.min(1.0);
    }
    Ok(BhResult { rejected, adjusted, q })
}

#[cfg(test)]
mod tests;
