use super::noise::NoiseKey;
use super::task::SyntheticTask;
use crate::error::{Error, Result};
use crate::params::ParameterMap;

/// Gradient-norm threshold of the optimum oracle.
pub const ORACLE_TOLERANCE: f64 = 1e-8;
pub const ORACLE_MAX_STEPS: usize = 100_000;
/// Step size used by the oracle for tasks with no known smoothness constant.
const ORACLE_FALLBACK_STEP: f64 = 0.1;

/// Result of one local optimization run.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalRun {
    pub theta: ParameterMap<f64>,
    /// `theta^(0) ..= theta^(K)` when recording was requested, otherwise empty.
    pub trajectory: Vec<ParameterMap<f64>>,
}

/// Everything a FedAvg simulation produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SimRun {
    pub theta0: ParameterMap<f64>,
    pub final_theta: ParameterMap<f64>,
    /// `theta_1 ..= theta_R`.
    pub rounds: Vec<ParameterMap<f64>>,
    /// `theta_{t,r}^(K_t)`, indexed `[round][task]`.
    pub local_endpoints: Vec<Vec<ParameterMap<f64>>>,
    /// Full local trajectories `[round][task][step]`, when recorded.
    pub trajectories: Option<Vec<Vec<Vec<ParameterMap<f64>>>>>,
}

/// Local SGD on one task: `theta <- theta - eta_k g(theta)` for each rate in `rates`.
pub fn local_sgd(
    task: &SyntheticTask,
    theta0: &ParameterMap<f64>,
    rates: &[f64],
    noise: NoiseKey,
    record: bool,
) -> Result<LocalRun> {
    task.layout().check_schema(theta0)?;
    let mut trajectory = record.then(Vec::new);
    let end = run_local(task, &theta0.flatten(), rates, noise, trajectory.as_mut());
    Ok(LocalRun {
        theta: ParameterMap::from_flat(theta0, &end)?,
        trajectory: trajectory
            .unwrap_or_default()
            .iter()
            .map(|flat| ParameterMap::from_flat(theta0, flat))
            .collect::<Result<_>>()?,
    })
}

fn run_local(
    task: &SyntheticTask,
    start: &[f64],
    rates: &[f64],
    noise: NoiseKey,
    mut record: Option<&mut Vec<Vec<f64>>>,
) -> Vec<f64> {
    let mut theta = start.to_vec();
    let mut grad = vec![0.0; theta.len()];
    if let Some(rec) = record.as_deref_mut() {
        rec.push(theta.clone());
    }
    for (k, &eta) in rates.iter().enumerate() {
        task.gradient(&theta, &mut grad);
        noise.perturb(k, task.noise_sigma, &mut grad);
        for (x, g) in theta.iter_mut().zip(&grad) {
            *x -= eta * g;
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.push(theta.clone());
        }
    }
    theta
}

/// FedAvg engine over a fixed set of tasks and per-task local schedules.
///
/// Rates are reused unchanged in every round. Noise for task `t` in round `r`
/// (1-based) is keyed by `(seed, t, r - 1)`, so round 1 draws exactly what a
/// standalone [`local_sgd`] with `NoiseKey::new(seed, t, 0)` draws.
#[derive(Clone, Debug)]
pub struct FedAvg<'a> {
    tasks: &'a [SyntheticTask],
    schedules: &'a [Vec<f64>],
    beta: f64,
    seed: u64,
    record_trajectories: bool,
}

impl<'a> FedAvg<'a> {
    pub fn new(tasks: &'a [SyntheticTask], schedules: &'a [Vec<f64>]) -> Self {
        Self {
            tasks,
            schedules,
            beta: 1.0,
            seed: 0,
            record_trajectories: false,
        }
    }

    pub fn beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn record_trajectories(mut self, record: bool) -> Self {
        self.record_trajectories = record;
        self
    }

    fn validate(&self, theta0: &ParameterMap<f64>, rounds: usize) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::EmptyInput("fedavg needs at least one task"));
        }
        if self.schedules.len() != self.tasks.len() {
            return Err(Error::BadParameter {
                name: "schedules",
                reason: format!("{} schedules for {} tasks", self.schedules.len(), self.tasks.len()),
            });
        }
        if rounds == 0 {
            return Err(Error::BadParameter {
                name: "rounds",
                reason: "at least one communication round is required".into(),
            });
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::BadParameter {
                name: "beta",
                reason: format!("outer step size must be positive, got {}", self.beta),
            });
        }
        for (t, rates) in self.schedules.iter().enumerate() {
            if let Some((step, &rate)) = rates.iter().enumerate().find(|(_, r)| !(r.is_finite() && **r > 0.0)) {
                return Err(Error::BadParameter {
                    name: "schedules",
                    reason: format!("task {t}: {}", Error::NonPositiveRate { step, rate }),
                });
            }
        }
        for task in self.tasks {
            task.layout().check_schema(theta0)?;
        }
        Ok(())
    }

    pub fn run(&self, theta0: &ParameterMap<f64>, rounds: usize) -> Result<SimRun> {
        self.validate(theta0, rounds)?;
        let num_tasks = self.tasks.len();
        let step = self.beta / num_tasks as f64;
        let mut global = theta0.flatten();
        let mut round_flats = Vec::with_capacity(rounds);
        let mut endpoint_flats = Vec::with_capacity(rounds);
        let mut traj_flats = self.record_trajectories.then(Vec::new);

        for r in 0..rounds {
            let mut endpoints = Vec::with_capacity(num_tasks);
            let mut round_traj = Vec::new();
            for (t, (task, rates)) in self.tasks.iter().zip(self.schedules).enumerate() {
                let mut rec = self.record_trajectories.then(Vec::new);
                let end = run_local(task, &global, rates, NoiseKey::new(self.seed, t, r), rec.as_mut());
                if let Some(rec) = rec {
                    round_traj.push(rec);
                }
                endpoints.push(end);
            }
            // aggregate in task-index order
            let mut update = vec![0.0; global.len()];
            for end in &endpoints {
                for ((u, e), g) in update.iter_mut().zip(end).zip(&global) {
                    *u += e - g;
                }
            }
            for (g, u) in global.iter_mut().zip(&update) {
                *g += step * u;
            }
            round_flats.push(global.clone());
            endpoint_flats.push(endpoints);
            if let Some(tf) = traj_flats.as_mut() {
                tf.push(round_traj);
            }
        }

        let to_map = |flat: &Vec<f64>| ParameterMap::from_flat(theta0, flat);
        Ok(SimRun {
            theta0: theta0.clone(),
            final_theta: to_map(&global)?,
            rounds: round_flats.iter().map(to_map).collect::<Result<_>>()?,
            local_endpoints: endpoint_flats
                .iter()
                .map(|row| row.iter().map(to_map).collect::<Result<_>>())
                .collect::<Result<_>>()?,
            trajectories: traj_flats
                .map(|rounds| {
                    rounds
                        .iter()
                        .map(|tasks| {
                            tasks
                                .iter()
                                .map(|steps| steps.iter().map(to_map).collect::<Result<_>>())
                                .collect::<Result<_>>()
                        })
                        .collect::<Result<_>>()
                })
                .transpose()?,
        })
    }

    /// Single-round FedAvg, `theta_0 + (beta/T) sum_t (theta_t^(K_t) - theta_0)`.
    pub fn one_shot(&self, theta0: &ParameterMap<f64>) -> Result<ParameterMap<f64>> {
        Ok(self.run(theta0, 1)?.final_theta)
    }
}

pub fn fedavg(
    tasks: &[SyntheticTask],
    theta0: &ParameterMap<f64>,
    schedules: &[Vec<f64>],
    rounds: usize,
    beta: f64,
    seed: u64,
) -> Result<SimRun> {
    FedAvg::new(tasks, schedules).beta(beta).seed(seed).run(theta0, rounds)
}

pub fn one_shot_fedavg(
    tasks: &[SyntheticTask],
    theta0: &ParameterMap<f64>,
    schedules: &[Vec<f64>],
    beta: f64,
    seed: u64,
) -> Result<ParameterMap<f64>> {
    FedAvg::new(tasks, schedules).beta(beta).seed(seed).one_shot(theta0)
}

/// `L(theta) = (1/T) sum_t L_t(theta)` on a flat parameter vector.
pub fn global_loss(tasks: &[SyntheticTask], theta: &[f64]) -> f64 {
    tasks.iter().map(|t| t.loss(theta)).sum::<f64>() / tasks.len() as f64
}

pub fn global_gradient(tasks: &[SyntheticTask], theta: &[f64], grad: &mut [f64]) {
    let mut g = vec![0.0; theta.len()];
    grad.fill(0.0);
    for task in tasks {
        task.gradient(theta, &mut g);
        for (acc, x) in grad.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    for acc in grad.iter_mut() {
        *acc /= tasks.len() as f64;
    }
}

/// Minimizer of the uniform-weight objective.
///
/// Closed form when every task is quadratic; otherwise full-gradient descent from
/// `start` with step `1/H` until the gradient norm drops to [`ORACLE_TOLERANCE`].
pub fn global_optimum(tasks: &[SyntheticTask], start: &[f64]) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return Err(Error::EmptyInput("global_optimum needs at least one task"));
    }
    if let Some(theta) = closed_form_optimum(tasks) {
        return Ok(theta);
    }
    let rate = tasks
        .iter()
        .map(SyntheticTask::smoothness)
        .try_fold(0.0f64, |acc, h| h.map(|h| acc.max(h)))
        .filter(|h| *h > 0.0)
        .map_or(ORACLE_FALLBACK_STEP, |h| 1.0 / h);
    let mut theta = start.to_vec();
    let mut grad = vec![0.0; theta.len()];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..ORACLE_MAX_STEPS {
        global_gradient(tasks, &theta, &mut grad);
        grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if grad_norm <= ORACLE_TOLERANCE {
            return Ok(theta);
        }
        for (x, g) in theta.iter_mut().zip(&grad) {
            *x -= rate * g;
        }
    }
    global_gradient(tasks, &theta, &mut grad);
    grad_norm = grad_norm.min(grad.iter().map(|g| g * g).sum::<f64>().sqrt());
    if grad_norm <= ORACLE_TOLERANCE {
        return Ok(theta);
    }
    Err(Error::OracleNotConverged {
        grad_norm,
        steps: ORACLE_MAX_STEPS,
    })
}

fn closed_form_optimum(tasks: &[SyntheticTask]) -> Option<Vec<f64>> {
    use super::task::Objective;

    // isotropic quadratics: curvature-weighted mean of centers
    let isotropic: Option<Vec<(&Vec<f64>, f64)>> = tasks
        .iter()
        .map(|t| match &t.objective {
            Objective::Quadratic { center, curvature } => Some((center, *curvature)),
            _ => None,
        })
        .collect();
    if let Some(parts) = isotropic {
        let total: f64 = parts.iter().map(|(_, h)| h).sum();
        let d = parts[0].0.len();
        let mut theta = vec![0.0; d];
        for (center, h) in &parts {
            for (x, c) in theta.iter_mut().zip(center.iter()) {
                *x += h * c;
            }
        }
        return Some(theta.into_iter().map(|x| x / total).collect());
    }

    let (q, lin) = averaged_quadratic_form(tasks)?;
    let solution = q.clone().cholesky().map(|c| c.solve(&lin)).or_else(|| q.lu().solve(&lin))?;
    Some(solution.as_slice().to_vec())
}

fn averaged_quadratic_form(tasks: &[SyntheticTask]) -> Option<(nalgebra::DMatrix<f64>, nalgebra::DVector<f64>)> {
    let mut forms = tasks.iter().map(SyntheticTask::quadratic_form);
    let (mut q, mut lin) = forms.next()??;
    for form in forms {
        let (qt, lt) = form?;
        q += qt;
        lin += lt;
    }
    let t = tasks.len() as f64;
    Some((q / t, lin / t))
}

/// `L(theta) - L(theta*)` for the uniform-weight objective, clamped at zero.
///
/// Quadratic families evaluate `(1/2) (theta - theta*)^T Q (theta - theta*)` directly,
/// which avoids cancellation between two nearly equal losses.
pub fn suboptimality(tasks: &[SyntheticTask], theta: &ParameterMap<f64>) -> Result<f64> {
    let flat = theta.flatten();
    let optimum = global_optimum(tasks, &flat)?;
    Ok(suboptimality_at(tasks, &optimum, &flat))
}

/// [`suboptimality`] against an already computed optimum.
pub fn suboptimality_at(tasks: &[SyntheticTask], optimum: &[f64], theta: &[f64]) -> f64 {
    let gap = match averaged_quadratic_form(tasks) {
        Some((q, _)) => {
            let diff = nalgebra::DVector::from_iterator(theta.len(), theta.iter().zip(optimum).map(|(x, o)| x - o));
            0.5 * diff.dot(&(&q * &diff))
        }
        None => global_loss(tasks, theta) - global_loss(tasks, optimum),
    };
    gap.max(0.0)
}
