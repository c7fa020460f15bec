//! Affine operators `V |-> b + M V` between value spaces.
//!
//! Every compiled circuit on finite spaces is affine, so this is the common
//! currency of the bellman and circuit layers. The operator maps values on
//! `out_space` (the continuation side) to values on `in_space`.

use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{sup_norm, Matrix};
use crate::space::FiniteSpace;
use crate::value::ValueFn;

/// Slack for checking an argument against its declared ball.
pub const APPLY_BALL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineOperator {
    in_space: FiniteSpace,
    out_space: FiniteSpace,
    offset: Vec<f64>,
    lin: Matrix,
    ball_in: f64,
    ball_out: f64,
}

impl AffineOperator {
    pub fn new(
        in_space: &FiniteSpace,
        out_space: &FiniteSpace,
        offset: Vec<f64>,
        lin: Matrix,
        ball_in: f64,
        ball_out: f64,
    ) -> Result<Self> {
        if offset.len() != in_space.size() || lin.rows() != in_space.size() || lin.cols() != out_space.size() {
            return Err(Error::Shape(format!(
                "affine operator {in_space} <- {out_space} given offset {} and matrix {}x{}",
                offset.len(),
                lin.rows(),
                lin.cols()
            )));
        }
        if offset.iter().chain(lin.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("affine operator has non-finite entries".into()));
        }
        if !(ball_in >= 0.0 && ball_out >= 0.0) {
            return Err(Error::InvalidValue(format!("ball radii {ball_in}, {ball_out}")));
        }
        Ok(Self {
            in_space: in_space.clone(),
            out_space: out_space.clone(),
            offset,
            lin,
            ball_in,
            ball_out,
        })
    }

    /// `V |-> b` (no dependence on the argument).
    pub fn constant(in_space: &FiniteSpace, out_space: &FiniteSpace, offset: Vec<f64>, ball_out: f64) -> Result<Self> {
        let ball_in = sup_norm(&offset);
        Self::new(
            in_space,
            out_space,
            offset,
            Matrix::zeros(in_space.size(), out_space.size()),
            ball_in,
            ball_out,
        )
    }

    /// `V |-> M V` for a linear map given by `lin`.
    pub fn linear(in_space: &FiniteSpace, out_space: &FiniteSpace, lin: Matrix, ball_out: f64) -> Result<Self> {
        let ball_in = lin.inf_norm() * ball_out;
        Self::new(in_space, out_space, vec![0.0; in_space.size()], lin, ball_in, ball_out)
    }

    pub fn in_space(&self) -> &FiniteSpace {
        &self.in_space
    }
    pub fn out_space(&self) -> &FiniteSpace {
        &self.out_space
    }
    pub fn offset(&self) -> &[f64] {
        &self.offset
    }
    pub fn lin(&self) -> &Matrix {
        &self.lin
    }
    pub fn ball_in(&self) -> f64 {
        self.ball_in
    }
    pub fn ball_out(&self) -> f64 {
        self.ball_out
    }

    pub fn with_balls(mut self, ball_in: f64, ball_out: f64) -> Result<Self> {
        if !(ball_in >= 0.0 && ball_out >= 0.0) {
            return Err(Error::InvalidValue(format!("ball radii {ball_in}, {ball_out}")));
        }
        self.ball_in = ball_in;
        self.ball_out = ball_out;
        Ok(self)
    }

    pub fn is_closed(&self) -> bool {
        self.in_space == self.out_space
    }

    /// Sup-norm Lipschitz constant `||M||_inf` (exact for affine maps).
    pub fn lipschitz(&self) -> f64 {
        self.lin.inf_norm()
    }

    /// `b + M v` without space or ball checks.
    pub fn apply_raw(&self, v: &[f64]) -> Vec<f64> {
        let mut out = self.lin.mat_vec(v);
        out.iter_mut().zip(&self.offset).for_each(|(o, b)| *o += b);
        out
    }

    /// Applies to a value on `out_space` lying in the declared output ball.
    pub fn apply(&self, v: &ValueFn) -> Result<ValueFn> {
        self.out_space.ensure_eq(v.space())?;
        let norm = v.sup_norm();
        if norm > self.ball_out + APPLY_BALL_TOL {
            return Err(Error::BallViolation {
                norm,
                radius: self.ball_out,
            });
        }
        let out = self.apply_raw(v.values());
        let tag = (sup_norm(&out) <= self.ball_in + crate::value::BALL_TOL).then_some(self.ball_in);
        Ok(ValueFn::from_parts(&self.in_space, out, tag))
    }

    /// `self . inner`: first apply `inner`, then `self`.
    pub fn compose(&self, inner: &AffineOperator) -> Result<AffineOperator> {
        self.out_space.ensure_eq(&inner.in_space)?;
        let lin = self.lin.matmul(&inner.lin)?;
        let offset = self.apply_raw(&inner.offset);
        Self::new(&self.in_space, &inner.out_space, offset, lin, self.ball_in, inner.ball_out)
    }

    /// Exact `sup_{||V|| <= radius} ||self V - other V||_inf`.
    ///
    /// For affine maps the supremum is attained at a sign vertex aligned with
    /// each row of the linear difference, giving `max_x |db_x| + radius * sum_j |dM_xj|`.
    pub fn distance(&self, other: &AffineOperator, radius: f64) -> Result<f64> {
        self.in_space.ensure_eq(&other.in_space)?;
        self.out_space.ensure_eq(&other.out_space)?;
        let mut best = 0.0_f64;
        for x in 0..self.in_space.size() {
            let db = (self.offset[x] - other.offset[x]).abs();
            let dm: f64 = self
                .lin
                .row(x)
                .iter()
                .zip(other.lin.row(x))
                .map(|(a, b)| (a - b).abs())
                .sum();
            best = best.max(db + radius * dm);
        }
        Ok(best)
    }

    /// Recognizes `M = g P` with `P` row-stochastic and a common row sum `g`.
    pub fn bellman_form(&self) -> Option<(f64, Kernel)> {
        let n = self.lin.rows();
        let mut g = None;
        for i in 0..n {
            let row = self.lin.row(i);
            if row.iter().any(|&v| v < 0.0) {
                return None;
            }
            let s: f64 = row.iter().sum();
            match g {
                None => g = Some(s),
                Some(g0) if (s - g0).abs() <= 1e-12 * g0.max(1.0) => {}
                Some(_) => return None,
            }
        }
        let g = g?;
        if !(g > 0.0) {
            return None;
        }
        let p = self.lin.scale(1.0 / g);
        Kernel::from_matrix(&self.in_space, &self.out_space, p)
            .ok()
            .map(|k| (g, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sp(n: usize) -> FiniteSpace {
        FiniteSpace::indexed("S", "s", n).unwrap()
    }

    #[test]
    fn compose_applies_inner_first() {
        let s = sp(2);
        let a = AffineOperator::new(&s, &s, vec![1.0, 0.0], Matrix::from_rows(&[vec![0.5, 0.0], vec![0.0, 0.5]]).unwrap(), 10.0, 10.0).unwrap();
        let b = AffineOperator::new(&s, &s, vec![0.0, 2.0], Matrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap(), 10.0, 10.0).unwrap();
        let ab = a.compose(&b).unwrap();
        let v = [3.0, -1.0];
        assert_eq!(ab.apply_raw(&v), a.apply_raw(&b.apply_raw(&v)));
    }

    #[test]
    fn distance_of_reward_shift() {
        let s = sp(3);
        let m = Matrix::from_rows(&[vec![0.3, 0.3, 0.3], vec![0.9, 0.0, 0.0], vec![0.0, 0.0, 0.9]]).unwrap();
        let a = AffineOperator::new(&s, &s, vec![0.1, 0.0, 0.0], m.clone(), 1.0, 1.0).unwrap();
        let b = AffineOperator::new(&s, &s, vec![0.0, 0.0, 0.0], m, 1.0, 1.0).unwrap();
        assert!((a.distance(&b, 5.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(a.distance(&a, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn bellman_form_detects_scaled_stochastic() {
        let s = sp(2);
        let m = Matrix::from_rows(&[vec![0.45, 0.45], vec![0.0, 0.9]]).unwrap();
        let a = AffineOperator::new(&s, &s, vec![0.0, 0.0], m, 1.0, 1.0).unwrap();
        let (g, k) = a.bellman_form().unwrap();
        assert!((g - 0.9).abs() < 1e-15);
        assert!((k.prob(0, 0) - 0.5).abs() < 1e-15);
        let bad = Matrix::from_rows(&[vec![0.45, 0.45], vec![0.0, 0.8]]).unwrap();
        assert!(AffineOperator::new(&s, &s, vec![0.0, 0.0], bad, 1.0, 1.0).unwrap().bellman_form().is_none());
    }

    #[test]
    fn apply_checks_argument_ball() {
        let s = sp(2);
        let a = AffineOperator::linear(&s, &s, Matrix::identity(2), 1.0).unwrap();
        let v = ValueFn::new(&s, vec![1.5, 0.0]).unwrap();
        assert!(matches!(a.apply(&v), Err(Error::BallViolation { .. })));
    }
}
