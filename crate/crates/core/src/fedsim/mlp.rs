//! Two-layer tanh perceptron for 2-D binary classification.
//!
//! Parameters are laid out under the names `fc1.bias [h]`, `fc1.weight [h, 2]`,
//! `fc2.bias [1]`, `fc2.weight [1, h]`, so the canonical flat order is exactly
//! that sequence.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::params::ParameterMap;

pub const INPUT_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Row-major `n x 2`.
    pub features: Vec<f64>,
    /// 0 or 1.
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.features[2 * i], self.features[2 * i + 1]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: usize,
}

struct View<'a> {
    b1: &'a [f64],
    w1: &'a [f64],
    b2: f64,
    w2: &'a [f64],
}

impl Mlp {
    pub fn new(hidden: usize) -> Self {
        Self { hidden }
    }

    pub fn num_params(&self) -> usize {
        4 * self.hidden + 1
    }

    pub fn layout(&self) -> ParameterMap<f64> {
        let h = self.hidden;
        ParameterMap::from_entries([
            ("fc1.bias", vec![h], vec![0.0; h]),
            ("fc1.weight", vec![h, INPUT_DIM], vec![0.0; h * INPUT_DIM]),
            ("fc2.bias", vec![1], vec![0.0]),
            ("fc2.weight", vec![1, h], vec![0.0; h]),
        ])
        .expect("static layout is valid")
    }

    /// Scaled-normal initialization, flat.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let h = self.hidden;
        let mut theta = vec![0.0; self.num_params()];
        let w1_scale = (1.0 / INPUT_DIM as f64).sqrt();
        let w2_scale = (1.0 / h as f64).sqrt();
        for x in &mut theta[h..3 * h] {
            *x = w1_scale * rng.sample::<f64, _>(StandardNormal);
        }
        for x in &mut theta[3 * h + 1..] {
            *x = w2_scale * rng.sample::<f64, _>(StandardNormal);
        }
        theta
    }

    fn view<'a>(&self, theta: &'a [f64]) -> View<'a> {
        let h = self.hidden;
        View {
            b1: &theta[..h],
            w1: &theta[h..3 * h],
            b2: theta[3 * h],
            w2: &theta[3 * h + 1..],
        }
    }

    pub fn logit(&self, theta: &[f64], x: [f64; 2]) -> f64 {
        let v = self.view(theta);
        let mut z = v.b2;
        for j in 0..self.hidden {
            let pre = v.w1[2 * j] * x[0] + v.w1[2 * j + 1] * x[1] + v.b1[j];
            z += v.w2[j] * pre.tanh();
        }
        z
    }

    /// Mean binary cross-entropy on logits.
    pub fn loss(&self, theta: &[f64], data: &Dataset) -> f64 {
        let total: f64 = (0..data.len())
            .map(|i| bce_with_logit(self.logit(theta, data.point(i)), data.labels[i]))
            .sum();
        total / data.len() as f64
    }

    pub fn gradient(&self, theta: &[f64], data: &Dataset, grad: &mut [f64]) {
        let h = self.hidden;
        let v = self.view(theta);
        grad.fill(0.0);
        let mut act = vec![0.0; h];
        for i in 0..data.len() {
            let x = data.point(i);
            let mut z = v.b2;
            for (j, a) in act.iter_mut().enumerate() {
                *a = (v.w1[2 * j] * x[0] + v.w1[2 * j + 1] * x[1] + v.b1[j]).tanh();
                z += v.w2[j] * *a;
            }
            let dz = sigmoid(z) - data.labels[i];
            grad[3 * h] += dz;
            for j in 0..h {
                grad[3 * h + 1 + j] += dz * act[j];
                let dpre = dz * v.w2[j] * (1.0 - act[j] * act[j]);
                grad[j] += dpre;
                grad[h + 2 * j] += dpre * x[0];
                grad[h + 2 * j + 1] += dpre * x[1];
            }
        }
        let n = data.len() as f64;
        for g in grad.iter_mut() {
            *g /= n;
        }
    }

    pub fn accuracy(&self, theta: &[f64], data: &Dataset) -> f64 {
        let correct = (0..data.len())
            .filter(|&i| (self.logit(theta, data.point(i)) > 0.0) == (data.labels[i] > 0.5))
            .count();
        correct as f64 / data.len() as f64
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}
