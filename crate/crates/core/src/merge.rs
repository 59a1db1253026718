//! Merge rules over a pre-trained model and a list of task vectors.
//!
//! All rules share the shape `merged = base + lambda * aggregate(taus)`:
//!
//! | method    | aggregate                                                     |
//! |-----------|---------------------------------------------------------------|
//! | `ta`      | `sum_t tau_t`                                                 |
//! | `fednova` | `mean_s ||a_s||_1 * sum_t tau_t / ||a_t||_1`                  |
//! | `fedgma`  | `M (.) sum_t tau_t`, `M_j = 1` if `A_j >= rho` else `A_j`     |
//! | `median`  | coordinate-wise median of the `tau_t`                         |
//! | `cclip`   | `sum_t tau_t * min(1, rho / ||tau_t||)`                       |
//!
//! Arithmetic is done in `f64` and rounded to the storage type once per element.
//! Sums over tasks are taken per coordinate over the sorted contributions, so
//! every rule is exactly invariant to the order of the task-vector list.

mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use sweep::{
    cclip_rho_grid, default_lambda_grid, fedgma_rho_grid, lambda_sweep, SweepCell, SweepOutcome, SweepPoint,
    CCLIP_GRID_POINTS,
};

use crate::error::{Error, Result};
use crate::heterometrics::{self, HeterogeneityReport};
use crate::params::{median_in_place, ParameterMap, TaskVector, TrainingMeta};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergeMethod {
    #[serde(rename = "ta")]
    TaskArithmetic,
    FedNova,
    FedGma,
    Median,
    Cclip,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 5] = [
        MergeMethod::TaskArithmetic,
        MergeMethod::FedNova,
        MergeMethod::FedGma,
        MergeMethod::Median,
        MergeMethod::Cclip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::TaskArithmetic => "ta",
            MergeMethod::FedNova => "fednova",
            MergeMethod::FedGma => "fedgma",
            MergeMethod::Median => "median",
            MergeMethod::Cclip => "cclip",
        }
    }

    pub fn uses_rho(self) -> bool {
        matches!(self, MergeMethod::FedGma | MergeMethod::Cclip)
    }
}

impl fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MergeMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MergeMethod::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::BadMergeSpec(format!("unknown method `{s}` (expected ta|fednova|fedgma|median|cclip)")))
    }
}

/// Method plus hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    pub lambda: f64,
    pub rho: Option<f64>,
}

impl MergeSpec {
    pub fn new(method: MergeMethod, lambda: f64, rho: Option<f64>) -> Result<Self> {
        let spec = Self { method, lambda, rho };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::BadMergeSpec(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        match (self.method, self.rho) {
            (MergeMethod::FedGma, Some(rho)) => check_fedgma_rho(rho),
            (MergeMethod::Cclip, Some(rho)) => check_cclip_rho(rho),
            (m, None) if m.uses_rho() => Err(Error::BadMergeSpec(format!("{m} requires rho"))),
            (m, Some(_)) if !m.uses_rho() => Err(Error::BadMergeSpec(format!("{m} takes no rho"))),
            _ => Ok(()),
        }
    }
}

fn check_fedgma_rho(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(Error::BadThreshold(rho))
    }
}

fn check_cclip_rho(rho: f64) -> Result<()> {
    if rho.is_finite() && rho >= 0.0 {
        Ok(())
    } else {
        Err(Error::BadMergeSpec(format!("CCLIP radius must be finite and >= 0, got {rho}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeResult<S> {
    pub merged: ParameterMap<S>,
    pub diagnostics: HeterogeneityReport,
}

/// `finetuned - base`, carrying the fine-tuning schedule when known.
pub fn task_vector<S: Scalar>(
    base: &ParameterMap<S>,
    finetuned: &ParameterMap<S>,
    meta: Option<TrainingMeta>,
) -> Result<TaskVector<S>> {
    TaskVector::from_models(base, finetuned, meta)
}

pub fn merge<S: Scalar>(base: &ParameterMap<S>, taus: &[TaskVector<S>], spec: &MergeSpec) -> Result<MergeResult<S>> {
    spec.validate()?;
    let rho = spec.rho.unwrap_or(0.0);
    match spec.method {
        MergeMethod::TaskArithmetic => merge_task_arithmetic(base, taus, spec.lambda),
        MergeMethod::FedNova => merge_fednova(base, taus, spec.lambda),
        MergeMethod::FedGma => merge_fedgma(base, taus, spec.lambda, rho),
        MergeMethod::Median => merge_median(base, taus, spec.lambda),
        MergeMethod::Cclip => merge_cclip(base, taus, spec.lambda, rho),
    }
}

/// `base + lambda * sum_t tau_t`.
pub fn merge_task_arithmetic<S: Scalar>(
    base: &ParameterMap<S>,
    taus: &[TaskVector<S>],
    lambda: f64,
) -> Result<MergeResult<S>> {
    let prepared = Prepared::new(base, taus)?;
    let aggregate = prepared.weighted_sum(&vec![1.0; taus.len()]);
    prepared.finish(lambda, &aggregate)
}

/// FedNova: each task vector normalized by `||a_t||_1` (with `eta = 1`) and the
/// sum rescaled by the mean `||a||_1`.
pub fn merge_fednova<S: Scalar>(base: &ParameterMap<S>, taus: &[TaskVector<S>], lambda: f64) -> Result<MergeResult<S>> {
    let prepared = Prepared::new(base, taus)?;
    let metas = prepared.metas.as_ref().ok_or_else(|| {
        let index = taus.iter().position(|t| t.meta.is_none()).unwrap_or(0);
        Error::MissingTrainingMeta { index }
    })?;
    let l1 = heterometrics::schedule_stats(metas, 1.0)?.l1_norms();
    // weights_from_l1 gives (l1_t / mean) / T; its reciprocal scaled by 1/T is mean / l1_t,
    // but computing mean / l1_t directly keeps equal norms at exactly 1
    let x0 = l1[0];
    let mean = x0 + l1.iter().map(|x| x - x0).sum::<f64>() / l1.len() as f64;
    let coeffs: Vec<f64> = l1.iter().map(|x| mean / x).collect();
    let aggregate = prepared.weighted_sum(&coeffs);
    prepared.finish(lambda, &aggregate)
}

/// FedGMA sign-agreement masking with threshold `rho` in `(0, 1]`.
pub fn merge_fedgma<S: Scalar>(
    base: &ParameterMap<S>,
    taus: &[TaskVector<S>],
    lambda: f64,
    rho: f64,
) -> Result<MergeResult<S>> {
    check_fedgma_rho(rho)?;
    let prepared = Prepared::new(base, taus)?;
    let total = prepared.weighted_sum(&vec![1.0; taus.len()]);
    let t = taus.len() as f64;
    let aggregate: Vec<f64> = prepared
        .sign_sums
        .iter()
        .zip(&total)
        .map(|(&s, &sum)| {
            let agreement = s.unsigned_abs() as f64 / t;
            let mask = if agreement >= rho { 1.0 } else { agreement };
            mask * sum
        })
        .collect();
    prepared.finish(lambda, &aggregate)
}

/// `base + lambda * median(tau_1, ..., tau_T)`.
pub fn merge_median<S: Scalar>(base: &ParameterMap<S>, taus: &[TaskVector<S>], lambda: f64) -> Result<MergeResult<S>> {
    let prepared = Prepared::new(base, taus)?;
    let mut column = vec![0.0; taus.len()];
    let aggregate: Vec<f64> = (0..prepared.base.len())
        .map(|j| {
            for (slot, flat) in column.iter_mut().zip(&prepared.deltas) {
                *slot = flat[j];
            }
            median_in_place(&mut column)
        })
        .collect();
    prepared.finish(lambda, &aggregate)
}

/// Centered clipping: task vectors longer than `rho` (global L2) are shrunk to length `rho`.
pub fn merge_cclip<S: Scalar>(
    base: &ParameterMap<S>,
    taus: &[TaskVector<S>],
    lambda: f64,
    rho: f64,
) -> Result<MergeResult<S>> {
    check_cclip_rho(rho)?;
    let prepared = Prepared::new(base, taus)?;
    let coeffs: Vec<f64> = prepared
        .norms
        .iter()
        .map(|&n| if n > rho { rho / n } else { 1.0 })
        .collect();
    let aggregate = prepared.weighted_sum(&coeffs);
    prepared.finish(lambda, &aggregate)
}

/// Validated, flattened inputs shared by every rule.
struct Prepared<'a, S> {
    template: &'a ParameterMap<S>,
    base: Vec<f64>,
    deltas: Vec<Vec<f64>>,
    norms: Vec<f64>,
    sign_sums: Vec<i64>,
    metas: Option<Vec<TrainingMeta>>,
}

impl<'a, S: Scalar> Prepared<'a, S> {
    fn new(base: &'a ParameterMap<S>, taus: &[TaskVector<S>]) -> Result<Self> {
        if taus.is_empty() {
            return Err(Error::EmptyInput("merging needs at least one task vector"));
        }
        for (i, tau) in taus.iter().enumerate() {
            base.check_schema(&tau.delta)
                .map_err(|e| Error::SchemaMismatch(format!("task vector {i}: {e}")))?;
        }
        let deltas: Vec<Vec<f64>> = taus.iter().map(|t| t.delta.flatten()).collect();
        let norms = deltas.iter().map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let sign_sums = heterometrics::sign_sums(&deltas);
        let metas = taus.iter().map(|t| t.meta.clone()).collect();
        Ok(Self {
            template: base,
            base: base.flatten(),
            deltas,
            norms,
            sign_sums,
            metas,
        })
    }

    /// Per-coordinate `sum_t coeff_t * delta_t`, summed in sorted order.
    fn weighted_sum(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut column = vec![0.0; self.deltas.len()];
        (0..self.base.len())
            .map(|j| {
                for ((slot, flat), c) in column.iter_mut().zip(&self.deltas).zip(coeffs) {
                    *slot = if *c == 1.0 { flat[j] } else { c * flat[j] };
                }
                column.sort_unstable_by(f64::total_cmp);
                column.iter().sum()
            })
            .collect()
    }

    fn diagnostics(&self, lambda: f64) -> Result<HeterogeneityReport> {
        let mut report = HeterogeneityReport {
            per_task_norms: self.norms.clone(),
            sign_agreement_histogram: heterometrics::agreement_histogram(&self.sign_sums, self.deltas.len()),
            ..Default::default()
        };
        if let Some(metas) = &self.metas {
            let stats = heterometrics::schedule_stats(metas, 1.0)?;
            let weights = heterometrics::aggregation_weights(&stats);
            report.chi_square = Some(heterometrics::chi_square_divergence(&weights)?);
            // beta = lambda * T
            report.tau_eff = Some(heterometrics::effective_steps(&stats, lambda * self.deltas.len() as f64));
            report.weights = Some(weights);
        }
        Ok(report)
    }

    fn finish(&self, lambda: f64, aggregate: &[f64]) -> Result<MergeResult<S>> {
        let merged: Vec<f64> = self.base.iter().zip(aggregate).map(|(b, a)| b + lambda * a).collect();
        Ok(MergeResult {
            merged: ParameterMap::from_flat(self.template, &merged)?,
            diagnostics: self.diagnostics(lambda)?,
        })
    }
}
