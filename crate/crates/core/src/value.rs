//! Bounded value functions on finite spaces.

use crate::error::{Error, Result};
use crate::linalg;
use crate::space::FiniteSpace;

/// Slack allowed when checking a value against its invariant-ball tag.
pub const BALL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFn {
    space: FiniteSpace,
    values: Vec<f64>,
    radius: Option<f64>,
}

impl ValueFn {
    pub fn new(space: &FiniteSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.size() {
            return Err(Error::InvalidValue(format!(
                "{} entries for space {space}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!("entry {i} is not finite")));
        }
        Ok(Self {
            space: space.clone(),
            values,
            radius: None,
        })
    }

    pub fn zeros(space: &FiniteSpace) -> Self {
        Self {
            space: space.clone(),
            values: vec![0.0; space.size()],
            radius: None,
        }
    }

    pub fn constant(space: &FiniteSpace, c: f64) -> Self {
        Self {
            space: space.clone(),
            values: vec![c; space.size()],
            radius: None,
        }
    }

    /// Tags the value with an invariant-ball radius `M`, checking `|V| <= M`.
    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidValue(format!("radius {radius}")));
        }
        let norm = self.sup_norm();
        if norm > radius + BALL_TOL {
            return Err(Error::BallViolation { norm, radius });
        }
        self.radius = Some(radius);
        Ok(self)
    }

    pub(crate) fn from_parts(space: &FiniteSpace, values: Vec<f64>, radius: Option<f64>) -> Self {
        debug_assert_eq!(values.len(), space.size());
        Self {
            space: space.clone(),
            values,
            radius,
        }
    }

    pub fn space(&self) -> &FiniteSpace {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn sup_norm(&self) -> f64 {
        linalg::sup_norm(&self.values)
    }

    pub fn add_constant(&self, c: f64) -> ValueFn {
        Self::from_parts(&self.space, self.values.iter().map(|v| v + c).collect(), None)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ValueFn> {
        ValueFn::new(&self.space, self.values.iter().map(|&v| f(v)).collect())
    }

    /// `true` if `self <= other` pointwise.
    pub fn le(&self, other: &ValueFn) -> bool {
        self.values.iter().zip(&other.values).all(|(a, b)| a <= b)
    }
}

/// `max_s |v(s) - w(s)|`.
pub fn sup_norm_diff(v: &ValueFn, w: &ValueFn) -> Result<f64> {
    v.space.ensure_eq(&w.space)?;
    Ok(linalg::sup_dist(&v.values, &w.values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sup_diff_of_shift_is_shift() {
        let s = FiniteSpace::indexed("S", "s", 3).unwrap();
        let v = ValueFn::new(&s, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(sup_norm_diff(&v, &v).unwrap(), 0.0);
        assert!((sup_norm_diff(&v, &v.add_constant(-0.25)).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn radius_tag_is_checked() {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        let v = ValueFn::new(&s, vec![1.0, -3.0]).unwrap();
        assert!(v.clone().with_radius(3.0).is_ok());
        assert!(matches!(v.with_radius(2.9), Err(Error::BallViolation { .. })));
        assert!(ValueFn::new(&s, vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn mismatched_spaces_are_rejected() {
        let a = FiniteSpace::indexed("A", "a", 2).unwrap();
        let b = FiniteSpace::indexed("B", "b", 2).unwrap();
        assert!(sup_norm_diff(&ValueFn::zeros(&a), &ValueFn::zeros(&b)).is_err());
    }
}
