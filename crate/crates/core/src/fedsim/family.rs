use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Dataset, Mlp};
use super::task::{Objective, SyntheticTask, TaskKind};
use crate::error::{Error, Result};
use crate::params::ParameterMap;

/// Ridge strength of generated logistic tasks; keeps the optimum finite on separable data.
pub const LOGISTIC_L2: f64 = 1e-2;

fn default_curvature() -> f64 {
    1.0
}

fn default_samples() -> usize {
    64
}

/// Dials for a synthetic problem family.
///
/// For `quadratic` and `least_squares` the generated family hits `zeta_target`
/// exactly: `(1/T) sum_t ||grad L_t(theta*)||^2 = zeta_target^2`, and `theta0`
/// sits at distance `b_target` from `theta*`. For `logistic`, `zeta_target` is the
/// RMS spread of the per-task labelling directions and `b_target` is measured
/// from their mean. For `tiny_mlp`, `dim` is the hidden width, tasks are 2-D
/// clusters placed around a circle, and `b_target` is unused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFamilySpec {
    pub kind: TaskKind,
    pub num_tasks: usize,
    pub dim: usize,
    pub zeta_target: f64,
    pub b_target: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    /// Curvature `H` of quadratic tasks.
    #[serde(default = "default_curvature")]
    pub curvature: f64,
    #[serde(default = "default_samples")]
    pub samples_per_task: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TaskFamilySpec {
    pub fn quadratic(num_tasks: usize, dim: usize, zeta_target: f64, b_target: f64, seed: u64) -> Self {
        Self {
            kind: TaskKind::Quadratic,
            num_tasks,
            dim,
            zeta_target,
            b_target,
            noise_sigma: 0.0,
            curvature: 1.0,
            samples_per_task: default_samples(),
            seed,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::BadSpec(reason));
        if self.num_tasks == 0 {
            return bad("num_tasks must be positive".into());
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        for (name, v) in [
            ("zeta_target", self.zeta_target),
            ("b_target", self.b_target),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.curvature.is_finite() && self.curvature > 0.0) {
            return bad(format!("curvature must be positive, got {}", self.curvature));
        }
        if self.zeta_target > 0.0 && self.num_tasks == 1 {
            return bad("a single task cannot have nonzero heterogeneity".into());
        }
        if self.kind == TaskKind::LeastSquares && self.samples_per_task < self.dim {
            return bad(format!(
                "least_squares needs samples_per_task >= dim ({} < {})",
                self.samples_per_task, self.dim
            ));
        }
        if matches!(self.kind, TaskKind::Logistic | TaskKind::TinyMlp) && self.samples_per_task == 0 {
            return bad("samples_per_task must be positive".into());
        }
        Ok(())
    }
}

/// Generated tasks plus the shared starting point.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskFamily {
    pub tasks: Vec<SyntheticTask>,
    pub theta0: ParameterMap<f64>,
    /// Closed-form minimizer of the averaged objective, where one is constructed.
    pub optimum: Option<Vec<f64>>,
}

pub fn generate_task_family(spec: &TaskFamilySpec) -> Result<TaskFamily> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.kind {
        TaskKind::Quadratic => quadratic_family(spec, &mut rng),
        TaskKind::LeastSquares => least_squares_family(spec, &mut rng),
        TaskKind::Logistic => logistic_family(spec, &mut rng),
        TaskKind::TinyMlp => mlp_family(spec, &mut rng),
    }
}

fn gaussian(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_vector(rng: &mut impl Rng, d: usize) -> Result<Vec<f64>> {
    let v = gaussian(rng, d);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::BadSpec("degenerate random direction".into()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// `T` mean-zero vectors with `(1/T) sum ||v_t||^2 == rms^2`.
///
/// The same random draws are consumed for every `rms`, so families that differ
/// only in `zeta_target` share everything else.
fn centered_cloud(rng: &mut impl Rng, count: usize, d: usize, rms: f64) -> Result<Vec<Vec<f64>>> {
    let mut cloud: Vec<Vec<f64>> = (0..count).map(|_| gaussian(rng, d)).collect();
    let mut mean = vec![0.0; d];
    for v in &cloud {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / count as f64;
        }
    }
    for v in &mut cloud {
        for (x, m) in v.iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    if rms == 0.0 {
        return Ok(vec![vec![0.0; d]; count]);
    }
    let spread = cloud.iter().flatten().map(|x| x * x).sum::<f64>() / count as f64;
    if spread == 0.0 {
        return Err(Error::BadSpec("degenerate heterogeneity cloud".into()));
    }
    let factor = rms / spread.sqrt();
    for x in cloud.iter_mut().flatten() {
        *x *= factor;
    }
    Ok(cloud)
}

fn offset(point: &[f64], direction: &[f64], distance: f64) -> Vec<f64> {
    point.iter().zip(direction).map(|(p, u)| p + distance * u).collect()
}

fn quadratic_family(spec: &TaskFamilySpec, rng: &mut ChaCha8Rng) -> Result<TaskFamily> {
    let d = spec.dim;
    let h = spec.curvature;
    let mean_center = gaussian(rng, d);
    // grad L_t(theta*) = h (theta* - c_t), so the center cloud has RMS zeta / h
    let cloud = centered_cloud(rng, spec.num_tasks, d, spec.zeta_target / h)?;
    let tasks = cloud
        .iter()
        .map(|dev| {
            let center = mean_center.iter().zip(dev).map(|(m, x)| m + x).collect();
            SyntheticTask::new(Objective::Quadratic { center, curvature: h }, spec.noise_sigma)
        })
        .collect();
    let direction = unit_vector(rng, d)?;
    let theta0 = ParameterMap::vector(super::THETA, offset(&mean_center, &direction, spec.b_target))?;
    Ok(TaskFamily {
        tasks,
        theta0,
        optimum: Some(mean_center),
    })
}

fn least_squares_family(spec: &TaskFamilySpec, rng: &mut ChaCha8Rng) -> Result<TaskFamily> {
    let d = spec.dim;
    let n = spec.samples_per_task;
    let optimum = gaussian(rng, d);
    let target_grads = centered_cloud(rng, spec.num_tasks, d, spec.zeta_target)?;
    let theta_star = DVector::from_column_slice(&optimum);
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for g in &target_grads {
        let design: Vec<f64> = gaussian(rng, n * d);
        let a = DMatrix::from_row_slice(n, d, &design);
        let gram = a.transpose() * &a;
        // residual r with A^T r / n = g, so grad L_t(theta*) = g
        let coeffs = gram
            .cholesky()
            .ok_or_else(|| Error::BadSpec("rank-deficient random design".into()))?
            .solve(&DVector::from_column_slice(g));
        let residual = &a * coeffs * n as f64;
        let targets = (&a * &theta_star - residual).as_slice().to_vec();
        tasks.push(SyntheticTask::new(Objective::LeastSquares { design, targets }, spec.noise_sigma));
    }
    let direction = unit_vector(rng, d)?;
    let theta0 = ParameterMap::vector(super::THETA, offset(&optimum, &direction, spec.b_target))?;
    Ok(TaskFamily {
        tasks,
        theta0,
        optimum: Some(optimum),
    })
}

fn logistic_family(spec: &TaskFamilySpec, rng: &mut ChaCha8Rng) -> Result<TaskFamily> {
    let d = spec.dim;
    let n = spec.samples_per_task;
    let mean_teacher = gaussian(rng, d);
    let spread = centered_cloud(rng, spec.num_tasks, d, spec.zeta_target)?;
    let tasks = spread
        .iter()
        .map(|dev| {
            let teacher: Vec<f64> = mean_teacher.iter().zip(dev).map(|(m, x)| m + x).collect();
            let features = gaussian(rng, n * d);
            let labels = features
                .chunks_exact(d)
                .map(|x| f64::from(super::task::dot(x, &teacher) > 0.0))
                .collect();
            SyntheticTask::new(
                Objective::Logistic {
                    features,
                    labels,
                    l2: LOGISTIC_L2,
                },
                spec.noise_sigma,
            )
        })
        .collect();
    let direction = unit_vector(rng, d)?;
    let theta0 = ParameterMap::vector(super::THETA, offset(&mean_teacher, &direction, spec.b_target))?;
    Ok(TaskFamily {
        tasks,
        theta0,
        optimum: None,
    })
}

/// Radius of the circle on which tiny-MLP task clusters are centered.
pub const MLP_CLUSTER_RADIUS: f64 = 3.0;

/// 2-D cluster around `center` labelled by the side of a line through `center`
/// with normal `(cos angle, sin angle)`.
pub fn cluster_dataset(rng: &mut impl Rng, center: [f64; 2], angle: f64, n: usize) -> Dataset {
    let normal = [angle.cos(), angle.sin()];
    let mut features = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let dx: f64 = rng.sample(StandardNormal);
        let dy: f64 = rng.sample(StandardNormal);
        features.extend_from_slice(&[center[0] + dx, center[1] + dy]);
        labels.push(f64::from(dx * normal[0] + dy * normal[1] > 0.0));
    }
    Dataset { features, labels }
}

fn mlp_family(spec: &TaskFamilySpec, rng: &mut ChaCha8Rng) -> Result<TaskFamily> {
    let mlp = Mlp::new(spec.dim);
    let t = spec.num_tasks as f64;
    let tasks = (0..spec.num_tasks)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / t;
            let center = [MLP_CLUSTER_RADIUS * phi.cos(), MLP_CLUSTER_RADIUS * phi.sin()];
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let data = cluster_dataset(rng, center, angle, spec.samples_per_task);
            SyntheticTask::new(Objective::TinyMlp { mlp, data }, spec.noise_sigma)
        })
        .collect();
    let theta0 = ParameterMap::from_flat(&mlp.layout(), &mlp.init(rng))?;
    Ok(TaskFamily {
        tasks,
        theta0,
        optimum: None,
    })
}
