use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `D`-dimensional embedding, optionally unit-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    /// `values / ||values||_2`; fails on a zero vector.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        Self::new(values).normalize()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalize(&self) -> Result<Embedding> {
        if self.normalized {
            return Ok(self.clone());
        }
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm);
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_has_norm_one() {
        let e = Embedding::unit(vec![3.0, 4.0]).unwrap();
        assert!(e.is_normalized());
        assert!((e.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_cannot_be_normalized() {
        assert!(matches!(Embedding::unit(vec![0.0; 4]), Err(Error::ZeroNorm)));
    }
}
