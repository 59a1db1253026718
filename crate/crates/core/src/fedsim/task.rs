use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::mlp::{bce_with_logit, sigmoid, Dataset, Mlp};
use crate::params::ParameterMap;

/// Name of the single tensor used by the vector-valued task kinds.
pub const THETA: &str = "theta";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Quadratic,
    LeastSquares,
    Logistic,
    TinyMlp,
}

/// Kind-specific definition of one local objective `L_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `(H/2) ||theta - center||^2`
    Quadratic { center: Vec<f64>, curvature: f64 },
    /// `(1/2n) ||A theta - b||^2`, `A` row-major `n x d`
    LeastSquares { design: Vec<f64>, targets: Vec<f64> },
    /// Mean logistic loss on `x . theta` plus `(l2/2) ||theta||^2`.
    Logistic { features: Vec<f64>, labels: Vec<f64>, l2: f64 },
    TinyMlp { mlp: Mlp, data: Dataset },
}

/// A local objective plus the standard deviation of its injected gradient noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub objective: Objective,
    pub noise_sigma: f64,
}

impl SyntheticTask {
    pub fn new(objective: Objective, noise_sigma: f64) -> Self {
        Self {
            objective,
            noise_sigma,
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self.objective {
            Objective::Quadratic { .. } => TaskKind::Quadratic,
            Objective::LeastSquares { .. } => TaskKind::LeastSquares,
            Objective::Logistic { .. } => TaskKind::Logistic,
            Objective::TinyMlp { .. } => TaskKind::TinyMlp,
        }
    }

    /// Number of flat parameters.
    pub fn dim(&self) -> usize {
        match &self.objective {
            Objective::Quadratic { center, .. } => center.len(),
            Objective::LeastSquares { design, targets } => design.len() / targets.len(),
            Objective::Logistic { features, labels, .. } => features.len() / labels.len(),
            Objective::TinyMlp { mlp, .. } => mlp.num_params(),
        }
    }

    /// Zero-valued parameter map with this task's schema.
    pub fn layout(&self) -> ParameterMap<f64> {
        match &self.objective {
            Objective::TinyMlp { mlp, .. } => mlp.layout(),
            _ => ParameterMap::vector(THETA, vec![0.0; self.dim()]).expect("nonempty dimension"),
        }
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        match &self.objective {
            Objective::Quadratic { center, curvature } => {
                0.5 * curvature * theta.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()
            }
            Objective::LeastSquares { design, targets } => {
                let n = targets.len();
                let d = theta.len();
                let sq: f64 = (0..n)
                    .map(|i| {
                        let r = dot(&design[i * d..(i + 1) * d], theta) - targets[i];
                        r * r
                    })
                    .sum();
                sq / (2.0 * n as f64)
            }
            Objective::Logistic { features, labels, l2 } => {
                let n = labels.len();
                let d = theta.len();
                let data: f64 = (0..n)
                    .map(|i| bce_with_logit(dot(&features[i * d..(i + 1) * d], theta), labels[i]))
                    .sum();
                data / n as f64 + 0.5 * l2 * dot(theta, theta)
            }
            Objective::TinyMlp { mlp, data } => mlp.loss(theta, data),
        }
    }

    /// Exact (noise-free) gradient written into `grad`.
    pub fn gradient(&self, theta: &[f64], grad: &mut [f64]) {
        match &self.objective {
            Objective::Quadratic { center, curvature } => {
                for ((g, x), c) in grad.iter_mut().zip(theta).zip(center) {
                    *g = curvature * (x - c);
                }
            }
            Objective::LeastSquares { design, targets } => {
                let n = targets.len();
                let d = theta.len();
                grad.fill(0.0);
                for i in 0..n {
                    let row = &design[i * d..(i + 1) * d];
                    let r = dot(row, theta) - targets[i];
                    for (g, a) in grad.iter_mut().zip(row) {
                        *g += r * a;
                    }
                }
                for g in grad.iter_mut() {
                    *g /= n as f64;
                }
            }
            Objective::Logistic { features, labels, l2 } => {
                let n = labels.len();
                let d = theta.len();
                grad.fill(0.0);
                for i in 0..n {
                    let row = &features[i * d..(i + 1) * d];
                    let r = sigmoid(dot(row, theta)) - labels[i];
                    for (g, a) in grad.iter_mut().zip(row) {
                        *g += r * a;
                    }
                }
                for (g, x) in grad.iter_mut().zip(theta) {
                    *g = *g / n as f64 + l2 * x;
                }
            }
            Objective::TinyMlp { mlp, data } => mlp.gradient(theta, data, grad),
        }
    }

    /// Hessian and linear term `(Q, q)` with `grad L_t(theta) = Q theta - q`, for the
    /// kinds whose loss is exactly quadratic.
    pub fn quadratic_form(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        match &self.objective {
            Objective::Quadratic { center, curvature } => {
                let d = center.len();
                Some((
                    DMatrix::identity(d, d) * *curvature,
                    DVector::from_iterator(d, center.iter().map(|c| curvature * c)),
                ))
            }
            Objective::LeastSquares { design, targets } => {
                let n = targets.len();
                let a = DMatrix::from_row_slice(n, design.len() / n, design);
                let b = DVector::from_column_slice(targets);
                let scale = 1.0 / n as f64;
                Some((a.transpose() * &a * scale, a.transpose() * b * scale))
            }
            _ => None,
        }
    }

    /// Smoothness constant H of this task, when one is known.
    pub fn smoothness(&self) -> Option<f64> {
        match &self.objective {
            Objective::Quadratic { curvature, .. } => Some(*curvature),
            Objective::LeastSquares { .. } => {
                let (q, _) = self.quadratic_form()?;
                Some(max_eigenvalue(q))
            }
            Objective::Logistic { features, labels, l2 } => {
                let n = labels.len();
                let a = DMatrix::from_row_slice(n, features.len() / n, features);
                Some(0.25 * max_eigenvalue(a.transpose() * &a / n as f64) + l2)
            }
            Objective::TinyMlp { .. } => None,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_eigenvalue(sym: DMatrix<f64>) -> f64 {
    sym.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max)
}
