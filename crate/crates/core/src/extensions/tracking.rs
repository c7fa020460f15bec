//! Fixed points of time-varying contractions: drift bounds for the exact
//! fixed points and for one-step iterates.

use rand::Rng;

use crate::bellman::{solve_linear, Transformer};
use crate::error::{Error, Result};
use crate::linalg::{sup_dist, sup_norm};
use crate::random::{random_kernel, random_values};
use crate::space::FiniteSpace;
use crate::value::ValueFn;

/// Slack added to every bound comparison.
pub const TRACK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingMode {
    /// Solve each fixed point exactly.
    Exact,
    /// Apply one backup of the current operator per step.
    OneStep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackStep {
    pub t: usize,
    /// Operator distance between steps `t + 1` and `t` at the common radius.
    pub eta: f64,
    /// Measured quantity checked at this step.
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    pub mode: TrackingMode,
    pub radius: f64,
    pub etas: Vec<f64>,
    /// Exact mode: `||V*_{t+1} - V*_t||` against `eta_t / (1 - gamma)`.
    /// One-step mode: `||V_t - V*_t||` against the recursion bound.
    pub steps: Vec<TrackStep>,
    /// Exact mode only: `||V*_T - V*_0||` against `sum_t eta_t / (1 - gamma)`.
    pub cumulative: Option<(f64, f64)>,
    pub violations: usize,
}

impl TrackingReport {
    pub fn pass(&self) -> bool {
        self.violations == 0
    }
}

/// Tracks the fixed points of `ops`, which must be closed, share a space
/// and a discount. The radius is the largest declared output ball. In
/// one-step mode `v0` (default zero) seeds the iterates.
pub fn track_fixed_points(ops: &[Transformer], mode: TrackingMode, v0: Option<&ValueFn>) -> Result<TrackingReport> {
    let first = ops
        .first()
        .ok_or_else(|| Error::InvalidValue("empty operator sequence".into()))?;
    let gamma = first.gamma();
    for op in ops {
        if !op.is_closed() {
            return Err(Error::TypeMismatch("tracking needs closed transformers".into()));
        }
        op.in_space().ensure_eq(first.in_space())?;
        if op.gamma() != gamma {
            return Err(Error::InvalidComponent("tracking needs a common discount".into()));
        }
    }
    let radius = ops.iter().map(|o| o.ball_out()).fold(0.0, f64::max);
    let etas = ops
        .windows(2)
        .map(|w| w[1].to_affine().distance(&w[0].to_affine(), radius))
        .collect::<Result<Vec<_>>>()?;
    let fixed: Vec<Vec<f64>> = ops
        .iter()
        .map(|o| solve_linear(o).map(ValueFn::into_values))
        .collect::<Result<_>>()?;
    let drift = |eta: f64| eta / (1.0 - gamma);
    let mut steps = Vec::new();
    let mut cumulative = None;
    match mode {
        TrackingMode::Exact => {
            for (t, &eta) in etas.iter().enumerate() {
                let measured = sup_dist(&fixed[t + 1], &fixed[t]);
                let bound = drift(eta);
                steps.push(TrackStep { t, eta, measured, bound, pass: measured <= bound + TRACK_TOL });
            }
            let total = sup_dist(&fixed[fixed.len() - 1], &fixed[0]);
            let bound: f64 = etas.iter().map(|&e| drift(e)).sum();
            cumulative = Some((total, bound));
        }
        TrackingMode::OneStep => {
            let mut v = match v0 {
                Some(v) => {
                    v.space().ensure_eq(first.in_space())?;
                    v.values().to_vec()
                }
                None => vec![0.0; first.in_space().size()],
            };
            if sup_norm(&v) > radius + TRACK_TOL {
                return Err(Error::BallViolation { norm: sup_norm(&v), radius });
            }
            let mut bound = sup_dist(&v, &fixed[0]);
            for t in 0..ops.len() {
                let measured = sup_dist(&v, &fixed[t]);
                let eta = etas.get(t).copied().unwrap_or(0.0);
                steps.push(TrackStep { t, eta, measured, bound, pass: measured <= bound + TRACK_TOL });
                if t + 1 < ops.len() {
                    v = ops[t].apply_raw(&v);
                    bound = gamma * bound + drift(eta);
                }
            }
        }
    }
    let mut violations = steps.iter().filter(|s| !s.pass).count();
    if let Some((m, b)) = cumulative {
        if m > b + TRACK_TOL {
            violations += 1;
        }
    }
    Ok(TrackingReport {
        mode,
        radius,
        etas,
        steps,
        cumulative,
        violations,
    })
}

/// A random drifting sequence of `len` transformers on `n` states: each
/// step moves every reward by at most `reward_step` (clipped to `[-1, 1]`)
/// and mixes the kernel toward a fresh random kernel at rate `mix_step`.
/// Balls are set from the declared reward bound 1.
pub fn drifting_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    gamma: f64,
    len: usize,
    reward_step: f64,
    mix_step: f64,
) -> Result<Vec<Transformer>> {
    let s = FiniteSpace::indexed("S", "s", n)?;
    let mut reward = random_values(rng, n, 1.0);
    let mut kernel = random_kernel(rng, &s, &s, true);
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            for r in reward.iter_mut() {
                *r = (*r + rng.gen_range(-reward_step..=reward_step)).clamp(-1.0, 1.0);
            }
            let fresh = random_kernel(rng, &s, &s, true);
            kernel = kernel.mix(1.0 - mix_step, &fresh)?;
        }
        out.push(Transformer::new(ValueFn::new(&s, reward.clone())?, gamma, kernel.clone())?.with_reward_bound(1.0)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng;

    #[test]
    fn constant_sequence_has_no_drift() {
        let mut r = rng(1);
        let ops = drifting_sequence(&mut r, 3, 0.9, 1, 0.0, 0.0).unwrap();
        let seq = vec![ops[0].clone(); 5];
        let rep = track_fixed_points(&seq, TrackingMode::Exact, None).unwrap();
        assert!(rep.etas.iter().all(|&e| e == 0.0));
        assert!(rep.steps.iter().all(|s| s.measured == 0.0));
        assert!(rep.pass());
    }

    #[test]
    fn reward_drift_matches_resolvent() {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        let rows = vec![vec![0.5, 0.5], vec![0.2, 0.8]];
        let t0 = Transformer::from_tables(&s, vec![0.1, 0.2], 0.5, rows.clone()).unwrap().with_reward_bound(1.0).unwrap();
        let t1 = Transformer::from_tables(&s, vec![0.15, 0.25], 0.5, rows).unwrap().with_reward_bound(1.0).unwrap();
        let rep = track_fixed_points(&[t0, t1], TrackingMode::Exact, None).unwrap();
        // A uniform shift delta moves the fixed point by delta / (1 - gamma).
        assert!((rep.etas[0] - 0.05).abs() < 1e-15);
        assert!((rep.steps[0].measured - 0.1).abs() < 1e-12);
        assert!(rep.pass());
    }

    #[test]
    fn random_drift_has_no_violations() {
        let mut r = rng(77);
        let ops = drifting_sequence(&mut r, 5, 0.8, 20, 0.1, 0.2).unwrap();
        for mode in [TrackingMode::Exact, TrackingMode::OneStep] {
            let rep = track_fixed_points(&ops, mode, None).unwrap();
            assert!(rep.pass(), "{mode:?}");
        }
    }
}
