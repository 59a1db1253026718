//! Grid search over `lambda` (and `rho` for the thresholded rules).

use serde::{Deserialize, Serialize};

use super::{merge, MergeMethod, MergeSpec};
use crate::error::{Error, Result};
use crate::params::{ParameterMap, TaskVector};
use crate::scalar::Scalar;

pub const CCLIP_GRID_POINTS: usize = 5;

/// `{0.05, 0.10, ..., 2.00}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=40).map(|k| k as f64 / 20.0).collect()
}

/// `{0.1, 0.2, ..., 1.0}`.
pub fn fedgma_rho_grid() -> Vec<f64> {
    (1..=10).map(|k| k as f64 / 10.0).collect()
}

/// Five evenly spaced radii from the smallest to just below the largest task-vector norm.
pub fn cclip_rho_grid(norms: &[f64]) -> Result<Vec<f64>> {
    if norms.is_empty() {
        return Err(Error::EmptyInput("CCLIP grid needs at least one norm"));
    }
    let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = norms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::BadParameter {
            name: "norms",
            reason: "task-vector norms must be finite".into(),
        });
    }
    let step = (hi - lo) / CCLIP_GRID_POINTS as f64;
    Ok((0..CCLIP_GRID_POINTS).map(|i| lo + i as f64 * step).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub rho: Option<f64>,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub method: MergeMethod,
    pub table: Vec<SweepCell>,
    pub best: Option<SweepCell>,
}

/// Evaluates every grid cell and keeps the highest score.
///
/// The table is ordered by `(lambda, rho)`; ties resolve to the earliest cell.
/// A cell whose merge fails, whose evaluator errors, or whose score is NaN is
/// recorded with its error and skipped for selection. `rho_grid = None` picks the
/// default grid for the method.
pub fn lambda_sweep<S, F>(
    base: &ParameterMap<S>,
    taus: &[TaskVector<S>],
    method: MergeMethod,
    lambda_grid: &[f64],
    rho_grid: Option<&[f64]>,
    mut evaluator: F,
) -> Result<SweepOutcome>
where
    S: Scalar,
    F: FnMut(SweepPoint, &ParameterMap<S>) -> std::result::Result<f64, String>,
{
    if lambda_grid.is_empty() {
        return Err(Error::EmptyInput("lambda grid is empty"));
    }
    let rhos: Vec<Option<f64>> = match (method.uses_rho(), rho_grid) {
        (false, None) => vec![None],
        (false, Some(_)) => return Err(Error::BadMergeSpec(format!("{method} takes no rho grid"))),
        (true, Some(g)) => g.iter().copied().map(Some).collect(),
        (true, None) if method == MergeMethod::FedGma => fedgma_rho_grid().into_iter().map(Some).collect(),
        (true, None) => {
            let norms: Vec<f64> = taus.iter().map(|t| t.norm()).collect();
            cclip_rho_grid(&norms)?.into_iter().map(Some).collect()
        }
    };
    if rhos.is_empty() {
        return Err(Error::EmptyInput("rho grid is empty"));
    }
    let mut lambdas = lambda_grid.to_vec();
    lambdas.sort_by(f64::total_cmp);
    let mut rhos = rhos;
    rhos.sort_by(|a, b| a.unwrap_or(0.0).total_cmp(&b.unwrap_or(0.0)));

    let mut table = Vec::with_capacity(lambdas.len() * rhos.len());
    let mut best: Option<usize> = None;
    for &lambda in &lambdas {
        for &rho in &rhos {
            let point = SweepPoint { lambda, rho };
            let outcome = MergeSpec::new(method, lambda, rho)
                .and_then(|spec| merge(base, taus, &spec))
                .map_err(|e| e.to_string())
                .and_then(|merged| evaluator(point, &merged.merged))
                .and_then(|s| if s.is_nan() { Err("evaluator returned NaN".to_string()) } else { Ok(s) });
            let cell = match outcome {
                Ok(score) => SweepCell { lambda, rho, score: Some(score), error: None },
                Err(e) => SweepCell { lambda, rho, score: None, error: Some(e) },
            };
            if let Some(score) = cell.score {
                if best.is_none_or(|b| score > table_score(&table, b)) {
                    best = Some(table.len());
                }
            }
            table.push(cell);
        }
    }
    Ok(SweepOutcome {
        method,
        best: best.map(|b| table[b].clone()),
        table,
    })
}

fn table_score(table: &[SweepCell], i: usize) -> f64 {
    table[i].score.unwrap_or(f64::NEG_INFINITY)
}
