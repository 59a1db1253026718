//! Versioned JSON experiment config for the FedAvg simulator and the report it produces.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "family": { "kind": "quadratic", "num_tasks": 4, "dim": 8, "zeta_target": 1.0, "b_target": 2.0 },
//!   "schedules": [ { "learning_rate": 0.1, "steps": 20 } ],
//!   "rounds": 1,
//!   "lambda": 0.5,
//!   "seed": 3
//! }
//! ```
//!
//! `schedules` holds either one entry (shared by every task) or one per task;
//! each entry is `{"learning_rates": [...]}` or `{"learning_rate": r, "steps": k}`.
//! Exactly one of `beta` and `lambda` is given, with `beta = lambda * T`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::{generate_task_family, global_loss, global_optimum, suboptimality_at, FedAvg, SimRun, TaskFamily, TaskFamilySpec};
use crate::heterometrics::{self, HeterogeneityReport};
use crate::params::{ParameterMap, TrainingMeta};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Explicit { learning_rates: Vec<f64> },
    Constant { learning_rate: f64, steps: usize },
}

impl ScheduleSpec {
    pub fn rates(&self) -> Vec<f64> {
        match self {
            ScheduleSpec::Explicit { learning_rates } => learning_rates.clone(),
            ScheduleSpec::Constant { learning_rate, steps } => vec![*learning_rate; *steps],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub family: TaskFamilySpec,
    pub schedules: Vec<ScheduleSpec>,
    pub rounds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// Gradient-noise seed; falls back to the caller's seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Write the base model and the first-round local endpoints as checkpoints.
    #[serde(default)]
    pub dump_task_vectors: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::BadSpec(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::BadSpec(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::BadSpec(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.rounds == 0 {
            return Err(Error::BadSpec("rounds must be at least 1".into()));
        }
        let t = self.family.num_tasks;
        if self.schedules.len() != 1 && self.schedules.len() != t {
            return Err(Error::BadSpec(format!(
                "expected 1 or {t} schedules, got {}",
                self.schedules.len()
            )));
        }
        for (i, s) in self.schedules.iter().enumerate() {
            if let Some(rate) = s.rates().into_iter().find(|r| !(r.is_finite() && *r > 0.0)) {
                return Err(Error::BadSpec(format!("schedule {i}: learning rate {rate} is not positive")));
            }
        }
        let beta = self.beta()?;
        if !(beta.is_finite() && beta > 0.0) {
            return Err(Error::BadSpec(format!("beta must be positive, got {beta}")));
        }
        Ok(())
    }

    /// Outer step size, from `beta` directly or as `lambda * T`.
    pub fn beta(&self) -> Result<f64> {
        match (self.beta, self.lambda) {
            (Some(b), None) => Ok(b),
            (None, Some(l)) => Ok(l * self.family.num_tasks as f64),
            _ => Err(Error::BadSpec("give exactly one of `beta` and `lambda`".into())),
        }
    }

    /// One rate list per task.
    pub fn task_schedules(&self) -> Vec<Vec<f64>> {
        let t = self.family.num_tasks;
        if self.schedules.len() == 1 {
            vec![self.schedules[0].rates(); t]
        } else {
            self.schedules.iter().map(ScheduleSpec::rates).collect()
        }
    }

    pub fn run(&self, default_seed: u64) -> Result<Experiment> {
        self.validate()?;
        let seed = self.seed.unwrap_or(default_seed);
        let beta = self.beta()?;
        let family = generate_task_family(&self.family)?;
        let schedules = self.task_schedules();
        let run = FedAvg::new(&family.tasks, &schedules).beta(beta).seed(seed).run(&family.theta0, self.rounds)?;
        let report = build_report(self, seed, beta, &family, &schedules, &run)?;
        Ok(Experiment {
            family,
            schedules,
            run,
            report,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub family: TaskFamily,
    pub schedules: Vec<Vec<f64>>,
    pub run: SimRun,
    pub report: SimReport,
}

impl Experiment {
    /// Training metadata of each task's schedule; `None` for zero-step schedules.
    pub fn metas(&self) -> Vec<Option<TrainingMeta>> {
        self.schedules.iter().map(|r| TrainingMeta::new(r.clone()).ok()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 0 is the starting point.
    pub round: usize,
    pub loss: f64,
    pub suboptimality: f64,
    pub het_at_point: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub seed: u64,
    pub num_tasks: usize,
    pub num_params: usize,
    pub rounds: usize,
    pub beta: f64,
    /// `beta / T`, the equivalent Task Arithmetic scaling.
    pub lambda: f64,
    pub theta0: Vec<f64>,
    pub final_theta: Vec<f64>,
    pub optimum: Vec<f64>,
    pub final_loss: f64,
    pub final_suboptimality: f64,
    pub per_round: Vec<RoundMetrics>,
    /// Computed from the first-round task vectors; `het_at_point` is at the final iterate.
    pub heterogeneity: HeterogeneityReport,
}

fn build_report(
    config: &ExperimentConfig,
    seed: u64,
    beta: f64,
    family: &TaskFamily,
    schedules: &[Vec<f64>],
    run: &SimRun,
) -> Result<SimReport> {
    let tasks = &family.tasks;
    let theta0 = family.theta0.flatten();
    let optimum = match &family.optimum {
        Some(o) => o.clone(),
        None => global_optimum(tasks, &theta0)?,
    };
    let per_round = std::iter::once(&family.theta0)
        .chain(&run.rounds)
        .enumerate()
        .map(|(round, theta)| {
            let flat = theta.flatten();
            Ok(RoundMetrics {
                round,
                loss: global_loss(tasks, &flat),
                suboptimality: suboptimality_at(tasks, &optimum, &flat),
                het_at_point: heterometrics::heterogeneity_at_point(tasks, theta)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let last = per_round.last().expect("round 0 is always present");

    let deltas: Vec<ParameterMap<f64>> = run.local_endpoints[0]
        .iter()
        .map(|end| crate::params::sub(end, &family.theta0))
        .collect::<Result<_>>()?;
    let delta_refs: Vec<&ParameterMap<f64>> = deltas.iter().collect();
    let mut heterogeneity = HeterogeneityReport {
        per_task_norms: deltas.iter().map(crate::params::global_l2_norm).collect(),
        sign_agreement_histogram: heterometrics::sign_agreement_histogram(&delta_refs),
        het_at_point: Some(last.het_at_point),
        ..Default::default()
    };
    let metas: Option<Vec<TrainingMeta>> = schedules.iter().map(|r| TrainingMeta::new(r.clone()).ok()).collect();
    if let Some(metas) = metas {
        let stats = heterometrics::schedule_stats(&metas, 1.0)?;
        let weights = heterometrics::aggregation_weights(&stats);
        heterogeneity.chi_square = Some(heterometrics::chi_square_divergence(&weights)?);
        heterogeneity.tau_eff = Some(heterometrics::effective_steps(&stats, beta));
        heterogeneity.weights = Some(weights);
    }

    let num_tasks = tasks.len();
    Ok(SimReport {
        schema_version: SCHEMA_VERSION,
        seed,
        num_tasks,
        num_params: theta0.len(),
        rounds: config.rounds,
        beta,
        lambda: beta / num_tasks as f64,
        final_theta: run.final_theta.flatten(),
        theta0,
        optimum,
        final_loss: last.loss,
        final_suboptimality: last.suboptimality,
        heterogeneity,
        per_round,
    })
}
