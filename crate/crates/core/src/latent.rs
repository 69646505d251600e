//! Real-valued latent arrays with shape metadata.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension descriptor of a latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Flat(usize),
    Image { height: usize, width: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Flat(n) => n,
            Shape::Image { height, width } => height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Flat(n) => write!(f, "[{n}]"),
            Shape::Image { height, width } => write!(f, "[{height}x{width}]"),
        }
    }
}

/// A diffusion latent `z_t` at some timestep.
///
/// Values are always finite and their count matches the shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    values: Vec<f64>,
    shape: Shape,
}

impl Latent {
    pub fn new(values: Vec<f64>, shape: Shape) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::Shape {
                expected: shape.to_string(),
                found: format!("{} values", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent values".into()));
        }
        Ok(Self { values, shape })
    }

    pub fn flat(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(values, Shape::Flat(n))
    }

    pub fn image(values: Vec<f64>, height: usize, width: usize) -> Result<Self> {
        Self::new(values, Shape::Image { height, width })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            values: vec![0.0; shape.len()],
            shape,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    /// Errors unless `other` has the same shape.
    pub fn check_same_shape(&self, other: &Latent) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                expected: self.shape.to_string(),
                found: other.shape.to_string(),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Latent, b: f64) -> Result<Latent> {
        self.check_same_shape(other)?;
        let values: Vec<f64> = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Latent::new(values, self.shape)
    }

    pub fn scaled(&self, a: f64) -> Latent {
        Latent {
            values: self.values.iter().map(|x| a * x).collect(),
            shape: self.shape,
        }
    }

    /// Rebuild a latent of this shape from raw values, checking finiteness.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Latent> {
        Latent::new(values, self.shape)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_nan() {
        assert!(matches!(
            Latent::new(vec![1.0, 2.0], Shape::Flat(3)),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            Latent::flat(vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Latent::image(vec![0.0; 6], 2, 3).is_ok());
    }

    #[test]
    fn lincomb_requires_matching_shapes() {
        let a = Latent::flat(vec![1.0, 2.0]).unwrap();
        let b = Latent::image(vec![1.0, 2.0], 1, 2).unwrap();
        assert!(a.lincomb(1.0, &b, 1.0).is_err());
        let c = a.lincomb(2.0, &a, -1.0).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 2.0]);
    }
}
