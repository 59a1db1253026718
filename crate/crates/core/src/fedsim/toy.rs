//! Two-task tiny-MLP merging harness.
//!
//! Both tasks start from one shared initialization and are fine-tuned with
//! full-batch gradient descent. Merged models are scored by normalized
//! accuracy: accuracy on task `t` divided by the accuracy of the model
//! fine-tuned on `t`, averaged over tasks. Hyperparameters are picked on a
//! validation split and reported on a held-out test split.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::family::cluster_dataset;
use super::mlp::{Dataset, Mlp};
use super::noise::NoiseKey;
use super::sim::local_sgd;
use super::task::{Objective, SyntheticTask};
use crate::error::{Error, Result};
use crate::merge::{default_lambda_grid, lambda_sweep, merge, MergeMethod, MergeSpec};
use crate::params::{ParameterMap, TaskVector, TrainingMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub hidden: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Distance of each task's cluster from the origin.
    pub cluster_offset: f64,
    pub steps: usize,
    /// Learning rate of the slow task; also the shared rate in the homogeneous run.
    pub base_rate: f64,
    /// Rate multiplier of the fast task in the heterogeneous run.
    pub rate_ratio: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            train_samples: 64,
            val_samples: 512,
            test_samples: 1024,
            cluster_offset: 3.0,
            steps: 200,
            base_rate: 0.02,
            rate_ratio: 10.0,
            seed: 0,
        }
    }
}

impl ToyConfig {
    fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Err(Error::BadSpec(reason.to_string()));
        if self.hidden == 0 || self.train_samples == 0 || self.val_samples == 0 || self.test_samples == 0 {
            return bad("toy sizes must be positive");
        }
        if self.steps == 0 {
            return bad("toy fine-tuning needs at least one step");
        }
        if !(self.base_rate > 0.0 && self.base_rate.is_finite() && self.rate_ratio > 0.0 && self.rate_ratio.is_finite()) {
            return bad("toy learning rates must be positive");
        }
        if !self.cluster_offset.is_finite() {
            return bad("cluster_offset must be finite");
        }
        Ok(())
    }

    /// Per-task rates: `[base, base * ratio]` when heterogeneous, `[base, base]` otherwise.
    pub fn rates(&self, heterogeneous: bool) -> [f64; 2] {
        let fast = if heterogeneous { self.base_rate * self.rate_ratio } else { self.base_rate };
        [self.base_rate, fast]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToySplit {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generated data and shared initialization for one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyProblem {
    pub mlp: Mlp,
    pub theta0: ParameterMap<f64>,
    pub splits: Vec<ToySplit>,
}

impl ToyProblem {
    pub fn generate(cfg: &ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mlp = Mlp::new(cfg.hidden);
        let theta0 = ParameterMap::from_flat(&mlp.layout(), &mlp.init(&mut rng))?;
        let splits = [-1.0, 1.0]
            .into_iter()
            .map(|side| {
                let center = [side * cfg.cluster_offset, 0.0];
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                // one RNG stream per split keeps the splits independent of each other's sizes
                let mut split_rng = ChaCha8Rng::seed_from_u64(rng.random());
                ToySplit {
                    train: cluster_dataset(&mut split_rng, center, angle, cfg.train_samples),
                    val: cluster_dataset(&mut split_rng, center, angle, cfg.val_samples),
                    test: cluster_dataset(&mut split_rng, center, angle, cfg.test_samples),
                }
            })
            .collect();
        Ok(Self { mlp, theta0, splits })
    }

    pub fn num_tasks(&self) -> usize {
        self.splits.len()
    }

    fn training_task(&self, t: usize) -> SyntheticTask {
        SyntheticTask::new(
            Objective::TinyMlp {
                mlp: self.mlp,
                data: self.splits[t].train.clone(),
            },
            0.0,
        )
    }

    /// Fine-tunes each task from `theta0` with a constant rate for `steps` steps.
    pub fn fine_tune(&self, rates: &[f64], steps: usize) -> Result<FineTuned> {
        if rates.len() != self.num_tasks() {
            return Err(Error::BadParameter {
                name: "rates",
                reason: format!("expected {} rates, got {}", self.num_tasks(), rates.len()),
            });
        }
        let mut models = Vec::with_capacity(rates.len());
        let mut taus = Vec::with_capacity(rates.len());
        for (t, &rate) in rates.iter().enumerate() {
            let meta = TrainingMeta::constant(rate, steps)?;
            let run = local_sgd(&self.training_task(t), &self.theta0, meta.learning_rates(), NoiseKey::new(0, t, 0), false)?;
            taus.push(TaskVector::from_models(&self.theta0, &run.theta, Some(meta))?);
            models.push(run.theta);
        }
        let val_reference = self.per_task_accuracy_of(&models, |s| &s.val);
        let test_reference = self.per_task_accuracy_of(&models, |s| &s.test);
        Ok(FineTuned {
            models,
            taus,
            val_reference,
            test_reference,
        })
    }

    fn per_task_accuracy_of(&self, models: &[ParameterMap<f64>], pick: impl Fn(&ToySplit) -> &Dataset) -> Vec<f64> {
        models
            .iter()
            .zip(&self.splits)
            .map(|(m, s)| self.mlp.accuracy(&m.flatten(), pick(s)))
            .collect()
    }

    /// Mean over tasks of `acc(theta, task t) / reference[t]`.
    pub fn normalized_accuracy(&self, theta: &ParameterMap<f64>, test: bool, reference: &[f64]) -> f64 {
        let flat = theta.flatten();
        let total: f64 = self
            .splits
            .iter()
            .zip(reference)
            .map(|(s, r)| {
                let data = if test { &s.test } else { &s.val };
                self.mlp.accuracy(&flat, data) / r
            })
            .sum();
        total / self.splits.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuned {
    pub models: Vec<ParameterMap<f64>>,
    pub taus: Vec<TaskVector<f64>>,
    /// Each fine-tuned model's accuracy on its own validation split.
    pub val_reference: Vec<f64>,
    pub test_reference: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: MergeMethod,
    pub lambda: f64,
    pub rho: Option<f64>,
    pub val_score: f64,
    pub test_score: f64,
}

/// Sweeps `method` on the validation split and scores the selected merge on test.
pub fn evaluate_method(problem: &ToyProblem, tuned: &FineTuned, method: MergeMethod) -> Result<MethodScore> {
    let outcome = lambda_sweep(&problem.theta0, &tuned.taus, method, &default_lambda_grid(), None, |_, merged| {
        Ok(problem.normalized_accuracy(merged, false, &tuned.val_reference))
    })?;
    let best = outcome
        .best
        .ok_or_else(|| Error::BadParameter {
            name: "grid",
            reason: format!("every {method} cell failed"),
        })?;
    let spec = MergeSpec::new(method, best.lambda, best.rho)?;
    let merged = merge(&problem.theta0, &tuned.taus, &spec)?.merged;
    Ok(MethodScore {
        method,
        lambda: best.lambda,
        rho: best.rho,
        val_score: best.score.unwrap_or(f64::NAN),
        test_score: problem.normalized_accuracy(&merged, true, &tuned.test_reference),
    })
}

/// Homogeneous Task Arithmetic against heterogeneous Task Arithmetic, Median and CCLIP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyAblation {
    pub seed: u64,
    pub homogeneous_ta: MethodScore,
    pub heterogeneous_ta: MethodScore,
    pub heterogeneous_median: MethodScore,
    pub heterogeneous_cclip: MethodScore,
    /// Global L2 norms of the heterogeneous task vectors.
    pub heterogeneous_norms: Vec<f64>,
}

pub fn run_ablation(cfg: &ToyConfig) -> Result<ToyAblation> {
    let problem = ToyProblem::generate(cfg)?;
    let homo = problem.fine_tune(&cfg.rates(false), cfg.steps)?;
    let het = problem.fine_tune(&cfg.rates(true), cfg.steps)?;
    Ok(ToyAblation {
        seed: cfg.seed,
        homogeneous_ta: evaluate_method(&problem, &homo, MergeMethod::TaskArithmetic)?,
        heterogeneous_ta: evaluate_method(&problem, &het, MergeMethod::TaskArithmetic)?,
        heterogeneous_median: evaluate_method(&problem, &het, MergeMethod::Median)?,
        heterogeneous_cclip: evaluate_method(&problem, &het, MergeMethod::Cclip)?,
        heterogeneous_norms: het.taus.iter().map(|t| t.norm()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = ToyConfig::default();
        assert_eq!(ToyProblem::generate(&cfg).unwrap(), ToyProblem::generate(&cfg).unwrap());
        let other = ToyConfig { seed: 1, ..cfg };
        assert_ne!(ToyProblem::generate(&other).unwrap().theta0, ToyProblem::generate(&ToyConfig::default()).unwrap().theta0);
    }

    #[test]
    fn fine_tuning_learns_each_task() {
        let problem = ToyProblem::generate(&ToyConfig::default()).unwrap();
        let tuned = problem.fine_tune(&[0.2, 0.2], 1000).unwrap();
        assert!(tuned.val_reference.iter().all(|&a| a > 0.8), "{:?}", tuned.val_reference);
        // each fine-tuned model scores exactly 1 on its own task
        let own = problem.mlp.accuracy(&tuned.models[0].flatten(), &problem.splits[0].val);
        assert_eq!(own / tuned.val_reference[0], 1.0);
    }

    #[test]
    fn rates_follow_the_ratio() {
        let cfg = ToyConfig::default();
        assert_eq!(cfg.rates(false), [0.02, 0.02]);
        assert_eq!(cfg.rates(true), [0.02, 0.2]);
        assert!(ToyProblem::generate(&ToyConfig { steps: 0, ..cfg }).is_err());
    }
}
