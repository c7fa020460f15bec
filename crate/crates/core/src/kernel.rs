//! Probability distributions and Markov kernels on finite spaces.

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::space::FiniteSpace;

/// Row sums within this distance of one are accepted as-is.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Row sums within this distance of one are renormalized; beyond it they are rejected.
pub const RENORMALIZE_TOL: f64 = 1e-9;

/// Validates (and if needed renormalizes) one probability vector in place.
fn normalize_row(row: &mut [f64], index: usize) -> Result<()> {
    for (j, &p) in row.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::NotStochastic {
                row: index,
                reason: format!("entry {j} is not finite"),
            });
        }
        if p < 0.0 {
            return Err(Error::NotStochastic {
                row: index,
                reason: format!("entry {j} is negative ({p})"),
            });
        }
    }
    let sum: f64 = row.iter().sum();
    let dev = (sum - 1.0).abs();
    if dev <= STOCHASTIC_TOL {
        Ok(())
    } else if dev <= RENORMALIZE_TOL {
        row.iter_mut().for_each(|p| *p /= sum);
        Ok(())
    } else {
        Err(Error::NotStochastic {
            row: index,
            reason: format!("sums to {sum}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dist {
    space: FiniteSpace,
    probs: Vec<f64>,
}

impl Dist {
    pub fn new(space: &FiniteSpace, mut probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.size() {
            return Err(Error::InvalidDistribution(format!(
                "{} probabilities for space {space}",
                probs.len()
            )));
        }
        normalize_row(&mut probs, 0).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        Ok(Self {
            space: space.clone(),
            probs,
        })
    }

    pub fn point(space: &FiniteSpace, i: usize) -> Self {
        let mut probs = vec![0.0; space.size()];
        probs[i] = 1.0;
        Self {
            space: space.clone(),
            probs,
        }
    }

    pub fn uniform(space: &FiniteSpace) -> Self {
        let n = space.size();
        Self {
            space: space.clone(),
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn space(&self) -> &FiniteSpace {
        &self.space
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, i: usize) -> f64 {
        self.probs[i]
    }

    pub fn expect(&self, f: &[f64]) -> f64 {
        dot(&self.probs, f)
    }
}

/// Total-variation distance in the sup-over-test-functions convention,
/// `sup_{|f| <= 1} |E_mu f - E_nu f| = sum_i |mu_i - nu_i|`, so it lies in `[0, 2]`.
pub fn tv_distance(mu: &Dist, nu: &Dist) -> Result<f64> {
    mu.space.ensure_eq(&nu.space)?;
    Ok(l1_dist(&mu.probs, &nu.probs))
}

pub(crate) fn l1_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// A row-stochastic matrix from `from` to distributions over `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    from: FiniteSpace,
    to: FiniteSpace,
    rows: Matrix,
}

impl Kernel {
    pub fn new(from: &FiniteSpace, to: &FiniteSpace, rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = Matrix::from_rows(&rows)?;
        Self::from_matrix(from, to, m)
    }

    pub fn from_matrix(from: &FiniteSpace, to: &FiniteSpace, mut rows: Matrix) -> Result<Self> {
        if rows.rows() != from.size() || rows.cols() != to.size() {
            return Err(Error::Shape(format!(
                "kernel {from} -> {to} needs a {}x{} matrix, got {}x{}",
                from.size(),
                to.size(),
                rows.rows(),
                rows.cols()
            )));
        }
        for i in 0..rows.rows() {
            normalize_row(rows.row_mut(i), i)?;
        }
        Ok(Self {
            from: from.clone(),
            to: to.clone(),
            rows,
        })
    }

    pub fn identity(space: &FiniteSpace) -> Self {
        Self {
            from: space.clone(),
            to: space.clone(),
            rows: Matrix::identity(space.size()),
        }
    }

    /// The kernel of a deterministic map `i -> map[i]`.
    pub fn deterministic(from: &FiniteSpace, to: &FiniteSpace, map: &[usize]) -> Result<Self> {
        if map.len() != from.size() {
            return Err(Error::Shape(format!(
                "deterministic map has {} entries for space {from}",
                map.len()
            )));
        }
        let mut rows = Matrix::zeros(from.size(), to.size());
        for (i, &j) in map.iter().enumerate() {
            if j >= to.size() {
                return Err(Error::Shape(format!("target index {j} out of range for {to}")));
            }
            rows.set(i, j, 1.0);
        }
        Ok(Self {
            from: from.clone(),
            to: to.clone(),
            rows,
        })
    }

    /// Every row equal to `dist`.
    pub fn constant(from: &FiniteSpace, dist: &Dist) -> Self {
        let mut rows = Matrix::zeros(from.size(), dist.space.size());
        for i in 0..from.size() {
            rows.row_mut(i).copy_from_slice(&dist.probs);
        }
        Self {
            from: from.clone(),
            to: dist.space.clone(),
            rows,
        }
    }

    pub fn from_space(&self) -> &FiniteSpace {
        &self.from
    }

    pub fn to_space(&self) -> &FiniteSpace {
        &self.to
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.rows.get(from, to)
    }

    pub fn row_dist(&self, i: usize) -> Dist {
        Dist {
            space: self.to.clone(),
            probs: self.rows.row(i).to_vec(),
        }
    }

    /// `(K f)(x) = sum_y K(y|x) f(y)`.
    pub fn expect(&self, f: &[f64]) -> Vec<f64> {
        self.rows.mat_vec(f)
    }

    /// Pushes a distribution on `from` forward to `to`: `(mu K)(y)`.
    pub fn push(&self, mu: &Dist) -> Result<Dist> {
        self.from.ensure_eq(&mu.space)?;
        Ok(Dist {
            space: self.to.clone(),
            probs: self.rows.vec_mat(&mu.probs),
        })
    }

    /// Convex mixture `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, lambda: f64, other: &Kernel) -> Result<Kernel> {
        self.from.ensure_eq(&other.from)?;
        self.to.ensure_eq(&other.to)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidDistribution(format!("mixing weight {lambda}")));
        }
        let m = self.rows.scale(lambda).add(&other.rows.scale(1.0 - lambda));
        Kernel::from_matrix(&self.from, &self.to, m)
    }

    pub fn max_abs_diff(&self, other: &Kernel) -> f64 {
        self.rows.max_abs_diff(&other.rows)
    }
}

/// Chapman-Kolmogorov composition: `(k ; l)(z|x) = sum_y k(y|x) l(z|y)`.
pub fn compose_kernels(k: &Kernel, l: &Kernel) -> Result<Kernel> {
    k.to.ensure_eq(&l.from)?;
    let m = k.rows.matmul(&l.rows)?;
    Kernel::from_matrix(&k.from, &l.to, m)
}

/// Product kernel on `(X1 x X2) -> (Y1 x Y2)` with row-major pairing.
pub fn tensor_kernels(k1: &Kernel, k2: &Kernel) -> Kernel {
    let from = FiniteSpace::product(&k1.from, &k2.from);
    let to = FiniteSpace::product(&k1.to, &k2.to);
    Kernel::from_matrix(&from, &to, k1.rows.kron(&k2.rows))
        .expect("product of stochastic kernels is stochastic")
}

/// The closed-loop pairing kernel `s -> delta_s (x) pi(.|s)` on `S x A`.
pub fn pair_with_policy(pi: &Kernel) -> Kernel {
    let s = pi.from.clone();
    let a = pi.to.clone();
    let sa = FiniteSpace::product(&s, &a);
    let na = a.size();
    let mut rows = Matrix::zeros(s.size(), sa.size());
    for i in 0..s.size() {
        rows.row_mut(i)[i * na..(i + 1) * na].copy_from_slice(pi.row(i));
    }
    Kernel::from_matrix(&s, &sa, rows).expect("policy rows are stochastic")
}
