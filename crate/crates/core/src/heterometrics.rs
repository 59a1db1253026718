//! Training- and data-heterogeneity bookkeeping.
//!
//! A task fine-tuned with rates `eta_t^(0..K_t)` has normalized-rate vector
//! `a_t = eta_t / eta` for some normalizing constant `eta`. Its L1 norm decides
//! the weight `w_t = ||a_t||_1 / sum_s ||a_s||_1` the task effectively receives
//! when task vectors are summed, so heterogeneous schedules optimize
//! `sum_t w_t L_t` rather than the uniform average. The chi-square divergence
//! between uniform weights and `w` measures how far apart the two objectives are.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::{Objective, SyntheticTask};
use crate::params::{ParameterMap, TrainingMeta};
use crate::scalar::Scalar;

/// Norms of one normalized-rate vector `a_t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateVectorStats {
    pub steps: usize,
    /// `||a_t||_1`
    pub l1: f64,
    /// `||a_t||_2^2`
    pub l2sq: f64,
    /// Last coordinate `a_{t,-1}`.
    pub last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStats {
    pub eta: f64,
    pub tasks: Vec<RateVectorStats>,
}

impl ScheduleStats {
    pub fn l1_norms(&self) -> Vec<f64> {
        self.tasks.iter().map(|t| t.l1).collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

pub fn schedule_stats(metas: &[TrainingMeta], eta: f64) -> Result<ScheduleStats> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::BadParameter {
            name: "eta",
            reason: format!("normalizing rate must be positive, got {eta}"),
        });
    }
    let tasks = metas
        .iter()
        .map(|meta| {
            let rates = meta.learning_rates();
            // TrainingMeta already rejects empty and non-positive schedules
            let a = rates.iter().map(|r| r / eta);
            RateVectorStats {
                steps: rates.len(),
                l1: a.clone().sum(),
                l2sq: a.map(|x| x * x).sum(),
                last: rates[rates.len() - 1] / eta,
            }
        })
        .collect();
    Ok(ScheduleStats { eta, tasks })
}

/// Mean computed as `x_0 + mean(x_i - x_0)`, exact when all entries are equal.
fn shifted_mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// `w_t = ||a_t||_1 / sum_s ||a_s||_1`, evaluated as `(l1_t / mean l1) / T` so that
/// equal norms give exactly `1/T`.
pub fn aggregation_weights(stats: &ScheduleStats) -> Vec<f64> {
    weights_from_l1(&stats.l1_norms())
}

pub fn weights_from_l1(l1: &[f64]) -> Vec<f64> {
    if l1.is_empty() {
        return Vec::new();
    }
    let mean = shifted_mean(l1);
    let t = l1.len() as f64;
    l1.iter().map(|x| (x / mean) / t).collect()
}

/// Weights implied by FedNova's normalized updates: every task contributes
/// `mean ||a||_1 * tau_t / ||a_t||_1`, i.e. equal effective norms.
pub fn fednova_implied_weights(stats: &ScheduleStats) -> Vec<f64> {
    if stats.tasks.is_empty() {
        return Vec::new();
    }
    let mean = shifted_mean(&stats.l1_norms());
    weights_from_l1(&vec![mean; stats.num_tasks()])
}

/// `tau_eff = (beta / T) sum_t ||a_t||_1`.
pub fn effective_steps(stats: &ScheduleStats, beta: f64) -> f64 {
    if stats.tasks.is_empty() {
        return 0.0;
    }
    beta * shifted_mean(&stats.l1_norms())
}

/// `sum_t (1/T - w_t)^2 / w_t`.
pub fn chi_square_divergence(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("chi-square divergence needs at least one weight"));
    }
    if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::DegenerateWeight { index, value });
    }
    let uniform = 1.0 / weights.len() as f64;
    Ok(weights.iter().map(|w| (uniform - w) * (uniform - w) / w).sum())
}

/// `(1/T) sum_t ||grad L_t(theta)||^2` with exact gradients.
pub fn heterogeneity_at_point(tasks: &[SyntheticTask], theta: &ParameterMap<f64>) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("heterogeneity needs at least one task"));
    }
    let flat = theta.flatten();
    let mut grad = vec![0.0; flat.len()];
    let mut total = 0.0;
    for task in tasks {
        task.layout().check_schema(theta)?;
        task.gradient(&flat, &mut grad);
        total += grad.iter().map(|g| g * g).sum::<f64>();
    }
    Ok(total / tasks.len() as f64)
}

/// `||grad (sum_t w_t L_t)(theta)||^2`, the quantity the heterogeneity bound controls.
pub fn weighted_gradient_norm_sq(tasks: &[SyntheticTask], weights: &[f64], theta: &ParameterMap<f64>) -> Result<f64> {
    if tasks.len() != weights.len() {
        return Err(Error::BadParameter {
            name: "weights",
            reason: format!("{} weights for {} tasks", weights.len(), tasks.len()),
        });
    }
    let flat = theta.flatten();
    let mut grad = vec![0.0; flat.len()];
    let mut acc = vec![0.0; flat.len()];
    for (task, w) in tasks.iter().zip(weights) {
        task.layout().check_schema(theta)?;
        task.gradient(&flat, &mut grad);
        for (a, g) in acc.iter_mut().zip(&grad) {
            *a += w * g;
        }
    }
    Ok(acc.iter().map(|a| a * a).sum())
}

/// `(alpha, zeta^2)` with `sum_t w_t ||grad L_t||^2 <= alpha^2 ||sum_t w_t grad L_t||^2 + zeta^2`
/// holding for every `theta`, evaluated for the given weights only.
///
/// Available for isotropic quadratic families sharing one curvature `H`: there
/// the identity is exact with `alpha = 1` and `zeta^2 = H^2 sum_t w_t ||c_t - c_w||^2`.
pub fn quadratic_gradient_dissimilarity(tasks: &[SyntheticTask], weights: &[f64]) -> Option<(f64, f64)> {
    let parts: Vec<(&Vec<f64>, f64)> = tasks
        .iter()
        .map(|t| match &t.objective {
            Objective::Quadratic { center, curvature } => Some((center, *curvature)),
            _ => None,
        })
        .collect::<Option<_>>()?;
    let h = parts.first()?.1;
    if parts.iter().any(|(_, c)| *c != h) || weights.len() != parts.len() {
        return None;
    }
    let d = parts[0].0.len();
    let mut weighted_center = vec![0.0; d];
    for ((center, _), w) in parts.iter().zip(weights) {
        for (m, c) in weighted_center.iter_mut().zip(center.iter()) {
            *m += w * c;
        }
    }
    let spread: f64 = parts
        .iter()
        .zip(weights)
        .map(|((center, _), w)| w * center.iter().zip(&weighted_center).map(|(c, m)| (c - m).powi(2)).sum::<f64>())
        .sum();
    Some((1.0, h * h * spread))
}

/// Inputs to [`heterogeneity_bound`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub beta: f64,
    /// Smoothness `H`.
    pub smoothness: f64,
    /// Gradient-noise standard deviation.
    pub sigma: f64,
    /// Gradient-dissimilarity constant `zeta`.
    pub zeta: f64,
    /// `L~(theta_0) - inf L~`.
    pub initial_gap: f64,
    /// Dissimilarity multiplier `alpha`; enables the uniform-objective bound when set.
    pub alpha: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    pub k_bar: f64,
    pub eta: f64,
    pub tau_eff: f64,
    pub weights: Vec<f64>,
    pub chi_square: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub optimization_term: f64,
    pub noise_term: f64,
    pub local_noise_term: f64,
    pub drift_term: f64,
    /// Bound on `E ||grad L~(theta_TA)||^2`.
    pub epsilon: f64,
    /// Bound on `E ||grad L(theta_TA)||^2`, present when `alpha` was supplied.
    pub uniform_objective_bound: Option<f64>,
}

/// Gradient-norm bound for the surrogate objective `L~ = sum_t w_t L_t` at the
/// Task Arithmetic point, with the normalizing rate fixed to `eta = sqrt(T / K_bar)`.
pub fn heterogeneity_bound(metas: &[TrainingMeta], inputs: &BoundInputs) -> Result<BoundBreakdown> {
    if metas.is_empty() {
        return Err(Error::EmptyInput("the bound needs at least one schedule"));
    }
    let nonneg = |name: &'static str, v: f64| {
        if v.is_finite() && v >= 0.0 {
            Ok(())
        } else {
            Err(Error::BadParameter {
                name,
                reason: format!("must be finite and nonnegative, got {v}"),
            })
        }
    };
    nonneg("smoothness", inputs.smoothness)?;
    nonneg("sigma", inputs.sigma)?;
    nonneg("zeta", inputs.zeta)?;
    nonneg("initial_gap", inputs.initial_gap)?;
    if !(inputs.beta.is_finite() && inputs.beta > 0.0) {
        return Err(Error::BadParameter {
            name: "beta",
            reason: format!("must be positive, got {}", inputs.beta),
        });
    }
    if let Some(alpha) = inputs.alpha {
        nonneg("alpha", alpha)?;
    }

    let t = metas.len() as f64;
    let k_bar = metas.iter().map(|m| m.steps() as f64).sum::<f64>() / t;
    let eta = (t / k_bar).sqrt();
    let stats = schedule_stats(metas, eta)?;
    let weights = aggregation_weights(&stats);
    let chi_square = chi_square_divergence(&weights)?;
    let tau_eff = effective_steps(&stats, inputs.beta);

    let a1 = tau_eff
        * t
        * stats
            .tasks
            .iter()
            .zip(&weights)
            .map(|(s, w)| w * w * s.l2sq / (s.l1 * s.l1))
            .sum::<f64>();
    let a2 = stats
        .tasks
        .iter()
        .zip(&weights)
        .map(|(s, w)| w * (s.l2sq - s.last * s.last))
        .sum::<f64>();
    let a3 = stats
        .tasks
        .iter()
        .map(|s| s.l1 * (s.l1 - s.last))
        .fold(f64::NEG_INFINITY, f64::max);

    let h = inputs.smoothness;
    let sigma_sq = inputs.sigma * inputs.sigma;
    let zeta_sq = inputs.zeta * inputs.zeta;
    let root = (t * k_bar).sqrt();
    let optimization_term = 4.0 * inputs.initial_gap * (k_bar / tau_eff) / root;
    let noise_term = 4.0 * h * sigma_sq * a1 / root;
    let local_noise_term = 6.0 * t * h * h * sigma_sq * a2 / k_bar;
    let drift_term = 12.0 * t * h * h * zeta_sq * a3 / k_bar;
    let epsilon = optimization_term + noise_term + local_noise_term + drift_term;
    let uniform_objective_bound = inputs
        .alpha
        .map(|alpha| 2.0 * (chi_square * (alpha * alpha - 1.0) + 1.0) * epsilon + 2.0 * chi_square * zeta_sq);

    Ok(BoundBreakdown {
        k_bar,
        eta,
        tau_eff,
        weights,
        chi_square,
        a1,
        a2,
        a3,
        optimization_term,
        noise_term,
        local_noise_term,
        drift_term,
        epsilon,
        uniform_objective_bound,
    })
}

/// Number of bins in the sign-agreement histogram: `[0, 0.1), ..., [0.9, 1.0), {1.0}`.
pub const AGREEMENT_BINS: usize = 11;

/// Per-coordinate sums of `sign(tau_t)` over canonical flat vectors.
pub(crate) fn sign_sums(flats: &[Vec<f64>]) -> Vec<i64> {
    let n = flats.first().map_or(0, Vec::len);
    let mut sums = vec![0i64; n];
    for flat in flats {
        for (s, x) in sums.iter_mut().zip(flat) {
            if *x > 0.0 {
                *s += 1;
            } else if *x < 0.0 {
                *s -= 1;
            }
        }
    }
    sums
}

/// Histogram of the agreement score `A_j = |sum_t sign(tau_t)_j| / T`.
pub(crate) fn agreement_histogram(sums: &[i64], num_tasks: usize) -> [u64; AGREEMENT_BINS] {
    let mut hist = [0u64; AGREEMENT_BINS];
    if num_tasks == 0 {
        return hist;
    }
    for s in sums {
        // floor(10 |s| / T) in integers; |s| <= T so the index is at most 10
        let bin = (10 * s.unsigned_abs() as usize) / num_tasks;
        hist[bin.min(AGREEMENT_BINS - 1)] += 1;
    }
    hist
}

pub fn sign_agreement_histogram<S: Scalar>(deltas: &[&ParameterMap<S>]) -> [u64; AGREEMENT_BINS] {
    let flats: Vec<Vec<f64>> = deltas.iter().map(|d| d.flatten()).collect();
    agreement_histogram(&sign_sums(&flats), deltas.len())
}

/// Diagnostics attached to merge results and simulation reports.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityReport {
    pub tau_eff: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub chi_square: Option<f64>,
    pub het_at_point: Option<f64>,
    pub per_task_norms: Vec<f64>,
    pub sign_agreement_histogram: [u64; AGREEMENT_BINS],
}
