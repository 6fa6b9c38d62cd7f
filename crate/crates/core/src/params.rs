//! Flat parameter vectors shared by every layer of the simulator.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Norms below this are treated as zero when a direction is normalized.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// A flat, ordered vector of real model parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self + other`, elementwise.
    pub fn add(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    /// In place `self += alpha * x`.
    pub fn axpy(&mut self, alpha: f64, x: &ParamVector) {
        for (s, v) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * v;
        }
    }

    /// `self / ‖self‖`, or `None` when the norm is below [`DEGENERATE_NORM`].
    pub fn unit(&self) -> Option<ParamVector> {
        let n = self.norm();
        if n < DEGENERATE_NORM {
            None
        } else {
            Some(ParamVector(self.0.iter().map(|x| x / n).collect()))
        }
    }

    pub(crate) fn check_len(&self, expected: usize, what: &str) -> Result<()> {
        if self.0.len() != expected {
            return Err(Error::contract(format!(
                "{what} has length {}, expected {expected}",
                self.0.len()
            )));
        }
        Ok(())
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

/// Arithmetic mean of equally long vectors, summed in slice order.
pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::contract("mean of an empty vector list"))?;
    let mut acc = ParamVector::zeros(first.len());
    for v in vectors {
        v.check_len(first.len(), "vector")?;
        acc.axpy(1.0, v);
    }
    Ok(acc.scale(1.0 / vectors.len() as f64))
}
