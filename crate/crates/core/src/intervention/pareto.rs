use serde::{Deserialize, Serialize};

use super::arr::InterventionSpec;
use super::transform::ProfileTransform;
use crate::error::{FareError, Result};
use crate::evaluation::{ppl_budget_check, preference_score, EvalBundle};
use crate::model::{perplexity, LanguageModel};
use crate::profiling::SensitivityProfile;
use crate::scalar::Scalar;

/// Parity target for the preference.
pub const PARITY: f64 = 0.5;
pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_LAMBDA_MAX: f64 = 8.0;

/// Default 13-point strength grid ending at `lambda_max`.
pub fn default_lambda_grid(lambda_max: f64) -> Vec<f64> {
    let mut g = vec![0.0, 0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0];
    if lambda_max > 5.0 {
        g.push(lambda_max);
    }
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lambda: f64,
    pub preference: f64,
    pub ppl: f64,
    pub ppl_ratio: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoResult {
    pub lambda_star: f64,
    pub preference_star: f64,
    pub ppl_base: f64,
    pub beta: f64,
    /// Sorted by lambda.
    pub grid: Vec<GridPoint>,
}

/// Feasible grid point closest to parity; ties go to the smaller lambda.
/// `points` are `(lambda, preference, ppl)`; order does not matter.
pub fn select_operating_point(points: &[(f64, f64, f64)], ppl_base: f64, beta: f64) -> Result<ParetoResult> {
    if points.is_empty() {
        return Err(FareError::Config("lambda grid is empty".into()));
    }
    if !points.iter().any(|p| p.0 == 0.0) {
        return Err(FareError::Config("lambda grid must contain 0".into()));
    }
    let mut grid = points
        .iter()
        .map(|&(lambda, preference, ppl)| {
            let b = ppl_budget_check(ppl, ppl_base, beta)?;
            Ok(GridPoint {
                lambda,
                preference,
                ppl,
                ppl_ratio: b.ratio,
                feasible: b.feasible,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    grid.sort_by(|a, b| a.lambda.partial_cmp(&b.lambda).expect("finite lambda"));
    let star = grid
        .iter()
        .filter(|p| p.feasible || p.lambda == 0.0)
        .fold(None::<&GridPoint>, |best, p| match best {
            Some(b) if (b.preference - PARITY).abs() <= (p.preference - PARITY).abs() => Some(b),
            _ => Some(p),
        })
        .expect("lambda = 0 is always a candidate");
    Ok(ParetoResult {
        lambda_star: star.lambda,
        preference_star: star.preference,
        ppl_base,
        beta,
        grid,
    })
}

/// Evaluate preference and perplexity along `lambda_grid` and pick the
/// constrained operating point.
pub fn pareto_search<T: Scalar, M: LanguageModel<T>>(
    model: &M,
    bundle: &EvalBundle,
    profile: &SensitivityProfile<T>,
    layers: &[usize],
    lambda_grid: &[f64],
    beta: f64,
) -> Result<ParetoResult> {
    if lambda_grid.is_empty() {
        return Err(FareError::Config("lambda grid is empty".into()));
    }
    if lambda_grid.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
        return Err(FareError::Config("lambda grid values must be finite and >= 0".into()));
    }
    let base = InterventionSpec::new(
        model.config(),
        profile,
        ProfileTransform::Identity,
        layers.iter().copied(),
        T::zero(),
    )?;
    let ppl_base = perplexity(model, &bundle.ppl_corpus, None)?.as_f64();
    let points = lambda_grid
        .iter()
        .map(|&lambda| {
            let spec = base.with_lambda(T::lit(lambda));
            let pref = preference_score(model, &bundle.pairs, Some(&spec), bundle.scoring)?.preference;
            let ppl = perplexity(model, &bundle.ppl_corpus, Some(&spec))?.as_f64();
            Ok((lambda, pref, ppl))
        })
        .collect::<Result<Vec<_>>>()?;
    select_operating_point(&points, ppl_base, beta)
}
