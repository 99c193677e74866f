//! Flat parameter vectors and the handful of linear-algebra primitives the
//! rest of the simulator is built on.
//!
//! Every reduction sums left to right over the element index. No parallel
//! reduction is used here, so results are bit-reproducible across runs and
//! thread counts.

use std::ops::Index;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("parameter vector must have at least one element")]
    Empty,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{coeffs} coefficients given for {vectors} vectors")]
    CountMismatch { coeffs: usize, vectors: usize },
}

/// A non-empty vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ParamError> {
        if values.is_empty() {
            return Err(ParamError::Empty);
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Result<Self, ParamError> {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    /// `self - other`, componentwise.
    pub fn sub(&self, other: &Self) -> Result<Self, ParamError> {
        same_dim(self, other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`, componentwise.
    pub fn add(&self, other: &Self) -> Result<Self, ParamError> {
        same_dim(self, other)?;
        Self::new(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, c: f64) -> Result<Self, ParamError> {
        Self::new(self.0.iter().map(|x| c * x).collect())
    }

    /// Largest absolute componentwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64, ParamError> {
        same_dim(self, other)?;
        Ok(self
            .0
            .iter()
            .zip(&other.0)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = ParamError;

    fn try_from(values: Vec<f64>) -> Result<Self, ParamError> {
        Self::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.0
    }
}

fn check_finite(values: &[f64]) -> Result<(), ParamError> {
    match values.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(ParamError::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

fn same_dim(a: &ParamVector, b: &ParamVector) -> Result<(), ParamError> {
    if a.dim() != b.dim() {
        return Err(ParamError::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    Ok(())
}

pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64, ParamError> {
    same_dim(a, b)?;
    Ok(dot_slices(&a.0, &b.0))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn l2_norm(v: &ParamVector) -> f64 {
    l2_norm_slice(&v.0)
}

pub(crate) fn l2_norm_slice(v: &[f64]) -> f64 {
    dot_slices(v, v).sqrt()
}

pub fn l1_norm(v: &ParamVector) -> f64 {
    v.0.iter().fold(0.0, |acc, x| acc + x.abs())
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`.
///
/// A zero-norm operand carries no direction, so the result is 0.
pub fn cosine_similarity(a: &ParamVector, b: &ParamVector) -> Result<f64, ParamError> {
    let d = dot(a, b)?;
    let sq = dot_slices(a.as_slice(), a.as_slice()) * dot_slices(b.as_slice(), b.as_slice());
    let denom = if sq.is_finite() { sq.sqrt() } else { l2_norm(a) * l2_norm(b) };
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((d / denom).clamp(-1.0, 1.0))
}

/// `Σ coeffs[j] * vectors[j]`, accumulated in the order given.
pub fn linear_combine(coeffs: &[f64], vectors: &[&ParamVector]) -> Result<ParamVector, ParamError> {
    if coeffs.len() != vectors.len() || vectors.is_empty() {
        return Err(ParamError::CountMismatch {
            coeffs: coeffs.len(),
            vectors: vectors.len(),
        });
    }
    let dim = vectors[0].dim();
    let mut out = vec![0.0; dim];
    for (c, v) in coeffs.iter().zip(vectors) {
        if v.dim() != dim {
            return Err(ParamError::DimensionMismatch {
                left: dim,
                right: v.dim(),
            });
        }
        for (o, x) in out.iter_mut().zip(&v.0) {
            *o += c * x;
        }
    }
    ParamVector::new(out)
}
