//! Guarded Banach trace of parameterized maps `X x Z -> Y x Z`.
//!
//! The feedback coordinate must be uniformly contractive in `z`; the trace
//! at `x` is `f_Y(x, z_x)` where `z_x` is the unique fixed point of
//! `z |-> f_Z(x, z)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{sup_dist, sup_norm};
use crate::random::rng;

/// Number of sampled pairs used to check the contraction guard.
pub const GUARD_SAMPLES: usize = 1000;
const MAX_ITERATIONS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEval {
    pub output: Vec<f64>,
    pub feedback: Vec<f64>,
    pub iterations: usize,
}

pub struct GuardedTrace<FO, FZ> {
    f_out: FO,
    f_fb: FZ,
    x_dim: usize,
    z_dim: usize,
    alpha: f64,
    tol: f64,
}

impl<FO, FZ> GuardedTrace<FO, FZ>
where
    FO: Fn(&[f64], &[f64]) -> Vec<f64>,
    FZ: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    /// `alpha` is the declared contraction modulus of `f_fb` in `z`.
    pub fn new(f_out: FO, f_fb: FZ, x_dim: usize, z_dim: usize, alpha: f64, tol: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::UnguardedTrace {
                path: "trace".into(),
                detail: format!("declared feedback modulus {alpha} is not below 1"),
            });
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidValue(format!("tolerance {tol}")));
        }
        Ok(Self {
            f_out,
            f_fb,
            x_dim,
            z_dim,
            alpha,
            tol,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Samples `samples` triples `(x, z1, z2)` from the given balls and checks
    /// `||f_Z(x,z1) - f_Z(x,z2)|| <= alpha ||z1 - z2||`. Returns the largest
    /// observed ratio.
    pub fn verify_guard(&self, x_radius: f64, z_radius: f64, samples: usize, seed: u64) -> Result<f64> {
        if self.z_dim == 0 {
            return Ok(0.0);
        }
        let mut r = rng(seed);
        let mut worst = 0.0_f64;
        for _ in 0..samples {
            let x: Vec<f64> = (0..self.x_dim).map(|_| r.gen_range(-x_radius..=x_radius)).collect();
            let z1: Vec<f64> = (0..self.z_dim).map(|_| r.gen_range(-z_radius..=z_radius)).collect();
            let z2: Vec<f64> = (0..self.z_dim).map(|_| r.gen_range(-z_radius..=z_radius)).collect();
            let dz = sup_dist(&z1, &z2);
            if dz == 0.0 {
                continue;
            }
            let ratio = sup_dist(&(self.f_fb)(&x, &z1), &(self.f_fb)(&x, &z2)) / dz;
            worst = worst.max(ratio);
            if ratio > self.alpha * (1.0 + 1e-9) + 1e-12 || ratio >= 1.0 - 1e-9 {
                return Err(Error::UnguardedTrace {
                    path: "trace".into(),
                    detail: format!(
                        "sampled feedback ratio {ratio} exceeds declared modulus {}",
                        self.alpha
                    ),
                });
            }
        }
        Ok(worst)
    }

    /// Iterates `z <- f_Z(x, z)` from `z0` until `alpha * step <= tol (1 - alpha)`.
    pub fn eval_from(&self, x: &[f64], z0: &[f64]) -> Result<TraceEval> {
        let mut z = z0.to_vec();
        for k in 1..=MAX_ITERATIONS {
            let next = (self.f_fb)(x, &z);
            let step = sup_dist(&next, &z);
            z = next;
            if self.alpha * step <= self.tol * (1.0 - self.alpha) {
                return Ok(TraceEval {
                    output: (self.f_out)(x, &z),
                    feedback: z,
                    iterations: k,
                });
            }
            if !step.is_finite() || sup_norm(&z) > 1e300 {
                return Err(Error::NoConvergence { iterations: k, residual: step });
            }
        }
        Err(Error::NoConvergence {
            iterations: MAX_ITERATIONS,
            residual: f64::NAN,
        })
    }

    pub fn eval(&self, x: &[f64]) -> Result<TraceEval> {
        self.eval_from(x, &vec![0.0; self.z_dim])
    }
}

/// Builds the trace of `(f_out, f_fb)` after checking the guard on
/// [`GUARD_SAMPLES`] sampled pairs in the ball of the given radius.
pub fn banach_trace<FO, FZ>(
    f_out: FO,
    f_fb: FZ,
    x_dim: usize,
    z_dim: usize,
    alpha: f64,
    tol: f64,
    radius: f64,
) -> Result<GuardedTrace<FO, FZ>>
where
    FO: Fn(&[f64], &[f64]) -> Vec<f64>,
    FZ: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    let t = GuardedTrace::new(f_out, f_fb, x_dim, z_dim, alpha, tol)?;
    t.verify_guard(radius, radius, GUARD_SAMPLES, 0x7ace)?;
    Ok(t)
}
