//! Named dense tensors and the element-wise arithmetic the merge rules share.
//!
//! A [`ParameterMap`] keeps its entries sorted by name. That ordering is the
//! canonical flattening order: every global reduction (norms, dot products,
//! the flat views handed to the merge rules) walks names lexicographically and
//! each tensor in row-major order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One dense tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of named tensors.
///
/// Names are unique and nonempty, every dimension is positive, and the product
/// of each shape equals the length of its data (an empty shape is a scalar).
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterMap<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParameterMap<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterMap<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Single-tensor map, the layout the synthetic simulator uses.
    pub fn vector(name: &str, data: Vec<S>) -> Result<Self> {
        let mut map = Self::new();
        let len = data.len();
        map.insert(name, vec![len], data)?;
        Ok(map)
    }

    pub fn from_entries<I, N>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (N, Vec<usize>, Vec<S>)>,
        N: Into<String>,
    {
        let mut map = Self::new();
        for (name, shape, data) in entries {
            map.insert(name, shape, data)?;
        }
        Ok(map)
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "empty name".into(),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidTensor {
                name,
                reason: format!("shape {shape:?} has a zero dimension"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor {
                name,
                reason: format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            });
        }
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidTensor {
                name,
                reason: "duplicate name".into(),
            });
        }
        self.entries.insert(name, Tensor { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name)
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// All elements in canonical order.
    pub fn values(&self) -> impl Iterator<Item = S> + '_ {
        self.entries.values().flat_map(|t| t.data.iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut S> + '_ {
        self.entries.values_mut().flat_map(|t| t.data.iter_mut())
    }

    /// Canonical flat view, widened to `f64`.
    pub fn flatten(&self) -> Vec<f64> {
        self.values().map(Scalar::widen).collect()
    }

    /// Builds a map with `template`'s schema from a canonical flat vector.
    pub fn from_flat(template: &Self, flat: &[f64]) -> Result<Self> {
        let expected = template.num_elements();
        if flat.len() != expected {
            return Err(Error::SchemaMismatch(format!(
                "flat vector has {} elements, schema needs {expected}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let entries = template
            .entries
            .iter()
            .map(|(name, t)| {
                let data = flat[offset..offset + t.len()].iter().map(|&x| S::narrow(x)).collect();
                offset += t.len();
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(Self { entries })
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|_| S::zero())
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|&x| f(x)).collect(),
                    },
                )
            })
            .collect();
        Self { entries }
    }

    /// Element-type conversion through `f64`.
    pub fn cast<T: Scalar>(&self) -> ParameterMap<T> {
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                (
                    name.clone(),
                    Tensor {
                        shape: t.shape.clone(),
                        data: t.data.iter().map(|&x| T::narrow(x.widen())).collect(),
                    },
                )
            })
            .collect();
        ParameterMap { entries }
    }

    pub fn same_schema<T: Scalar>(&self, other: &ParameterMap<T>) -> bool {
        self.check_schema(other).is_ok()
    }

    /// Errors with a description of the first difference in names or shapes.
    pub fn check_schema<T: Scalar>(&self, other: &ParameterMap<T>) -> Result<()> {
        let mut lhs = self.entries.iter();
        let mut rhs = other.entries.iter();
        loop {
            match (lhs.next(), rhs.next()) {
                (None, None) => return Ok(()),
                (Some((name, _)), None) | (None, Some((name, _))) => {
                    return Err(Error::SchemaMismatch(format!("tensor `{name}` present on one side only")))
                }
                (Some((a, ta)), Some((b, tb))) => {
                    if a != b {
                        let missing = a.min(b);
                        return Err(Error::SchemaMismatch(format!("tensor `{missing}` present on one side only")));
                    }
                    if ta.shape != tb.shape {
                        return Err(Error::SchemaMismatch(format!(
                            "tensor `{a}` has shape {:?} vs {:?}",
                            ta.shape, tb.shape
                        )));
                    }
                }
            }
        }
    }

    fn zip_with(&self, other: &Self, mut f: impl FnMut(S, S) -> S) -> Result<Self> {
        self.check_schema(other)?;
        let entries = self
            .entries
            .iter()
            .zip(other.entries.values())
            .map(|((name, a), b)| {
                (
                    name.clone(),
                    Tensor {
                        shape: a.shape.clone(),
                        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
                    },
                )
            })
            .collect();
        Ok(Self { entries })
    }
}

/// Element-wise `a + b`.
pub fn add<S: Scalar>(a: &ParameterMap<S>, b: &ParameterMap<S>) -> Result<ParameterMap<S>> {
    a.zip_with(b, |x, y| S::narrow(x.widen() + y.widen()))
}

/// Element-wise `a - b`.
pub fn sub<S: Scalar>(a: &ParameterMap<S>, b: &ParameterMap<S>) -> Result<ParameterMap<S>> {
    a.zip_with(b, |x, y| S::narrow(x.widen() - y.widen()))
}

pub fn scale<S: Scalar>(a: &ParameterMap<S>, c: f64) -> ParameterMap<S> {
    a.map(|x| S::narrow(x.widen() * c))
}

/// L2 norm of the whole map viewed as one flat vector.
pub fn global_l2_norm<S: Scalar>(a: &ParameterMap<S>) -> f64 {
    a.values().map(|x| x.widen() * x.widen()).sum::<f64>().sqrt()
}

/// Inner product of two schema-identical maps in canonical order.
pub fn dot<S: Scalar>(a: &ParameterMap<S>, b: &ParameterMap<S>) -> Result<f64> {
    a.check_schema(b)?;
    Ok(a.values().zip(b.values()).map(|(x, y)| x.widen() * y.widen()).sum())
}

/// Cosine similarity of the flattened maps; 0 when either is the zero map.
pub fn cosine_similarity<S: Scalar>(a: &ParameterMap<S>, b: &ParameterMap<S>) -> Result<f64> {
    let d = dot(a, b)?;
    let denom = global_l2_norm(a) * global_l2_norm(b);
    Ok(if denom > 0.0 { d / denom } else { 0.0 })
}

/// Coordinate-wise sign with `sign(0) = 0`. NaN maps to NaN.
pub fn elementwise_sign<S: Scalar>(a: &ParameterMap<S>) -> ParameterMap<S> {
    a.map(sign)
}

#[inline]
pub(crate) fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        // zero (either sign) stays zero, NaN stays NaN
        x * S::zero()
    }
}

/// Coordinate-wise median; an even count takes the mean of the two middle values.
pub fn coordinate_median<S: Scalar>(maps: &[ParameterMap<S>]) -> Result<ParameterMap<S>> {
    let first = maps.first().ok_or(Error::EmptyInput("coordinate_median needs at least one map"))?;
    for m in &maps[1..] {
        first.check_schema(m)?;
    }
    let columns: Vec<Vec<f64>> = maps.iter().map(ParameterMap::flatten).collect();
    let mut scratch = vec![0.0; maps.len()];
    let flat: Vec<f64> = (0..first.num_elements())
        .map(|j| {
            for (slot, col) in scratch.iter_mut().zip(&columns) {
                *slot = col[j];
            }
            median_in_place(&mut scratch)
        })
        .collect();
    ParameterMap::from_flat(first, &flat)
}

pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    let mid = n / 2;
    if n % 2 == 1 {
        values[mid]
    } else {
        (values[mid - 1] + values[mid]) * 0.5
    }
}

/// Learning-rate schedule of one fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    learning_rates: Vec<f64>,
}

impl TrainingMeta {
    pub fn new(learning_rates: Vec<f64>) -> Result<Self> {
        if learning_rates.is_empty() {
            return Err(Error::EmptyInput("a training schedule needs at least one step"));
        }
        if let Some((step, &rate)) = learning_rates
            .iter()
            .enumerate()
            .find(|(_, r)| !(r.is_finite() && **r > 0.0))
        {
            return Err(Error::NonPositiveRate { step, rate });
        }
        Ok(Self { learning_rates })
    }

    pub fn constant(rate: f64, steps: usize) -> Result<Self> {
        Self::new(vec![rate; steps])
    }

    pub fn learning_rates(&self) -> &[f64] {
        &self.learning_rates
    }

    /// K_t, the number of local steps.
    pub fn steps(&self) -> usize {
        self.learning_rates.len()
    }

    /// Sum of the raw learning rates (the normalized-rate L1 norm with η = 1).
    pub fn rate_sum(&self) -> f64 {
        self.learning_rates.iter().sum()
    }
}

/// Fine-tuned minus pre-trained parameters, with the schedule that produced them when known.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector<S> {
    pub delta: ParameterMap<S>,
    pub meta: Option<TrainingMeta>,
}

impl<S: Scalar> TaskVector<S> {
    pub fn new(delta: ParameterMap<S>, meta: Option<TrainingMeta>) -> Self {
        Self { delta, meta }
    }

    /// `finetuned - base`.
    pub fn from_models(
        base: &ParameterMap<S>,
        finetuned: &ParameterMap<S>,
        meta: Option<TrainingMeta>,
    ) -> Result<Self> {
        Ok(Self {
            delta: sub(finetuned, base)?,
            meta,
        })
    }

    pub fn norm(&self) -> f64 {
        global_l2_norm(&self.delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(data: &[f32]) -> ParameterMap<f32> {
        ParameterMap::vector("w", data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let sum = add(&w(&[1.0, 2.0]), &w(&[3.0, -1.0])).unwrap();
        assert_eq!(sum, w(&[4.0, 1.0]));
        let a = w(&[0.25, -7.0]);
        assert_eq!(add(&a, &a.zeros_like()).unwrap(), a);
    }

    #[test]
    fn add_rejects_disjoint_names() {
        let v = ParameterMap::vector("v", vec![1.0f32]).unwrap();
        assert!(matches!(add(&w(&[1.0]), &v), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn add_rejects_shape_mismatch() {
        let mut a = ParameterMap::<f32>::new();
        a.insert("w", vec![2, 1], vec![1.0, 2.0]).unwrap();
        assert!(matches!(add(&a, &w(&[1.0, 2.0])), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn scale_cases() {
        assert_eq!(scale(&w(&[2.0, 4.0]), 0.5), w(&[1.0, 2.0]));
        let a = w(&[3.5, -1.25]);
        assert_eq!(scale(&a, 0.0), a.zeros_like());
        assert_eq!(scale(&a, 1.0), a);
    }

    #[test]
    fn norm_of_345_triangle() {
        let map = ParameterMap::from_entries([("w", vec![1], vec![3.0f32]), ("v", vec![1], vec![4.0])]).unwrap();
        assert_eq!(global_l2_norm(&map), 5.0);
        assert_eq!(global_l2_norm(&map.zeros_like()), 0.0);
    }

    #[test]
    fn sign_maps_zero_to_zero() {
        let s = elementwise_sign(&w(&[2.5, -0.1, 0.0]));
        assert_eq!(s, w(&[1.0, -1.0, 0.0]));
        assert_eq!(elementwise_sign(&s), s);
        let z = w(&[0.0, -0.0]);
        assert!(elementwise_sign(&z).values().all(|x| x == 0.0));
    }

    #[test]
    fn median_odd_even_singleton() {
        let m = coordinate_median(&[w(&[1.0]), w(&[5.0]), w(&[2.0])]).unwrap();
        assert_eq!(m, w(&[2.0]));
        let m = coordinate_median(&[w(&[1.0]), w(&[3.0])]).unwrap();
        assert_eq!(m, w(&[2.0]));
        let a = w(&[0.1, -9.0]);
        assert_eq!(coordinate_median(std::slice::from_ref(&a)).unwrap(), a);
    }

    #[test]
    fn median_errors() {
        assert!(matches!(
            coordinate_median::<f32>(&[]),
            Err(Error::EmptyInput(_))
        ));
        let v = ParameterMap::vector("v", vec![1.0f32]).unwrap();
        assert!(matches!(
            coordinate_median(&[w(&[1.0]), v]),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn insert_validates() {
        let mut m = ParameterMap::<f32>::new();
        assert!(m.insert("", vec![1], vec![0.0]).is_err());
        assert!(m.insert("a", vec![2, 2], vec![0.0; 3]).is_err());
        assert!(m.insert("a", vec![0], vec![]).is_err());
        m.insert("a", vec![], vec![1.0]).unwrap();
        assert!(m.insert("a", vec![1], vec![1.0]).is_err());
    }

    #[test]
    fn iteration_is_lexicographic() {
        let m = ParameterMap::from_entries([
            ("b", vec![1], vec![2.0f32]),
            ("a", vec![2], vec![0.0, 1.0]),
            ("B", vec![1], vec![-1.0]),
        ])
        .unwrap();
        assert_eq!(m.names().collect::<Vec<_>>(), ["B", "a", "b"]);
        assert_eq!(m.flatten(), [-1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn task_vector_is_finetuned_minus_base() {
        let tv = TaskVector::from_models(&w(&[1.0, 2.0]), &w(&[3.0, 1.0]), None).unwrap();
        assert_eq!(tv.delta, w(&[2.0, -1.0]));
        let same = TaskVector::from_models(&w(&[1.0]), &w(&[1.0]), None).unwrap();
        assert_eq!(global_l2_norm(&same.delta), 0.0);
    }

    #[test]
    fn training_meta_validation() {
        assert_eq!(TrainingMeta::constant(0.1, 3).unwrap().steps(), 3);
        assert!(matches!(
            TrainingMeta::new(vec![1e-4, 0.0]),
            Err(Error::NonPositiveRate { step: 1, .. })
        ));
        assert!(TrainingMeta::new(vec![f64::NAN]).is_err());
        assert!(TrainingMeta::new(vec![]).is_err());
    }
}
