//! Typed Bellman transformers and their solvers.

use rand::Rng;
use rayon::prelude::*;

use crate::affine::AffineOperator;
use crate::component::{close_loop, expected_reward, marginal_state, Mdp, Oddc, Policy};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{sup_dist, sup_norm, Matrix};
use crate::random::stream_rng;
use crate::space::FiniteSpace;
use crate::value::ValueFn;

/// Default solver tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_ITERATIONS: usize = 10_000_000;

/// Affine Bellman operator `V |-> r + gamma P V`, typed `B(Y) -> B(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer {
    reward: ValueFn,
    gamma: f64,
    trans: Kernel,
    ball_in: f64,
    ball_out: f64,
}

impl Transformer {
    /// Both balls default to `max |r| / (1 - gamma)`.
    pub fn new(reward: ValueFn, gamma: f64, trans: Kernel) -> Result<Self> {
        crate::component::check_discount(gamma)?;
        trans.from_space().ensure_eq(reward.space())?;
        let v_max = reward.sup_norm() / (1.0 - gamma);
        Ok(Self {
            reward: ValueFn::from_parts(trans.from_space(), reward.into_values(), None),
            gamma,
            trans,
            ball_in: v_max,
            ball_out: v_max,
        })
    }

    /// Convenience constructor from raw rows.
    pub fn from_tables(space: &FiniteSpace, reward: Vec<f64>, gamma: f64, trans: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(ValueFn::new(space, reward)?, gamma, Kernel::new(space, space, trans)?)
    }

    pub fn with_balls(mut self, ball_in: f64, ball_out: f64) -> Result<Self> {
        if !(ball_in >= 0.0 && ball_out >= 0.0) {
            return Err(Error::InvalidValue(format!("ball radii {ball_in}, {ball_out}")));
        }
        self.ball_in = ball_in;
        self.ball_out = ball_out;
        Ok(self)
    }

    /// Sets both balls to `r_max / (1 - gamma)` for a declared reward bound.
    pub fn with_reward_bound(self, r_max: f64) -> Result<Self> {
        if r_max + 1e-12 < self.reward.sup_norm() {
            return Err(Error::InvalidComponent(format!(
                "reward bound {r_max} below max |r| = {}",
                self.reward.sup_norm()
            )));
        }
        let v = r_max / (1.0 - self.gamma);
        self.with_balls(v, v)
    }

    /// Recovers Bellman form from an affine operator whose linear part is a
    /// scaled stochastic matrix.
    pub fn from_affine(op: &AffineOperator) -> Result<Self> {
        let (g, trans) = op
            .bellman_form()
            .ok_or_else(|| Error::TypeMismatch("linear part is not a discounted stochastic matrix".into()))?;
        let reward = ValueFn::from_parts(op.in_space(), op.offset().to_vec(), None);
        Self::new(reward, g, trans)?.with_balls(op.ball_in(), op.ball_out())
    }

    pub fn in_space(&self) -> &FiniteSpace {
        self.trans.from_space()
    }
    pub fn out_space(&self) -> &FiniteSpace {
        self.trans.to_space()
    }
    pub fn reward(&self) -> &ValueFn {
        &self.reward
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn trans(&self) -> &Kernel {
        &self.trans
    }
    pub fn ball_in(&self) -> f64 {
        self.ball_in
    }
    pub fn ball_out(&self) -> f64 {
        self.ball_out
    }
    pub fn is_closed(&self) -> bool {
        self.in_space() == self.out_space()
    }

    pub fn to_affine(&self) -> AffineOperator {
        AffineOperator::new(
            self.in_space(),
            self.out_space(),
            self.reward.values().to_vec(),
            self.trans.matrix().scale(self.gamma),
            self.ball_in,
            self.ball_out,
        )
        .expect("transformer is a well-formed affine operator")
    }

    pub fn apply(&self, v: &ValueFn) -> Result<ValueFn> {
        self.to_affine().apply(v)
    }

    /// `r + gamma P v` without checks.
    pub fn apply_raw(&self, v: &[f64]) -> Vec<f64> {
        let pv = self.trans.expect(v);
        self.reward
            .values()
            .iter()
            .zip(pv)
            .map(|(r, x)| r + self.gamma * x)
            .collect()
    }
}

/// `T^pi` for a component and policy: expected reward plus discounted
/// state-marginal continuation. Balls default to `R_max / (1 - gamma)`.
pub fn make_transformer(m: &Oddc, pi: &Policy) -> Result<Transformer> {
    let reward = expected_reward(m, pi)?;
    let trans = marginal_state(&close_loop(m, pi)?, m.s_out(), m.reward_space());
    Transformer::new(reward, m.gamma(), trans)?.with_reward_bound(m.r_max())
}

/// `T^pi` for an MDP with deterministic rewards.
pub fn mdp_transformer(mdp: &Mdp, pi: &Policy) -> Result<Transformer> {
    let reward = ValueFn::new(mdp.states(), mdp.policy_reward(pi)?)?;
    Transformer::new(reward, mdp.gamma(), mdp.policy_kernel(pi)?)?.with_reward_bound(mdp.r_max())
}

/// Output of [`value_iteration`].
#[derive(Debug, Clone)]
pub struct ViRun {
    pub value: ValueFn,
    pub iterations: usize,
    /// `||V_k - V_{k-1}||` of the last step.
    pub residual: f64,
    /// `V_0 = 0, V_1, ...` when recording was requested.
    pub iterates: Vec<Vec<f64>>,
}

/// Value iteration from `V_0 = 0` for a closed affine operator with modulus
/// `||M||_inf < 1`. Stops once `a * ||V_k - V_{k-1}|| <= tol (1 - a)`, which
/// bounds the error of `V_k` by `tol`.
pub fn value_iteration(op: &AffineOperator, tol: f64, record: bool) -> Result<ViRun> {
    if !op.is_closed() {
        return Err(Error::TypeMismatch(format!(
            "fixed point of an open operator {} <- {}",
            op.in_space(),
            op.out_space()
        )));
    }
    let a = op.lipschitz();
    if a >= 1.0 {
        return Err(Error::NonContraction { modulus: a });
    }
    let mut v = vec![0.0; op.in_space().size()];
    let mut iterates = Vec::new();
    if record {
        iterates.push(v.clone());
    }
    for k in 1..=MAX_ITERATIONS {
        let next = op.apply_raw(&v);
        let residual = sup_dist(&next, &v);
        v = next;
        if record {
            iterates.push(v.clone());
        }
        if a * residual <= tol * (1.0 - a) {
            return Ok(ViRun {
                value: ValueFn::from_parts(op.in_space(), v, None),
                iterations: k,
                residual,
                iterates,
            });
        }
        if !residual.is_finite() {
            return Err(Error::NoConvergence { iterations: k, residual });
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        residual: f64::NAN,
    })
}

/// Fixed point by value iteration; returns the value and the iteration count.
pub fn solve_fixed_point(t: &Transformer, tol: f64) -> Result<(ValueFn, usize)> {
    let run = value_iteration(&t.to_affine(), tol, false)?;
    Ok((run.value, run.iterations))
}

/// Solves `(I - M) V = b` directly.
pub fn solve_affine_linear(op: &AffineOperator) -> Result<ValueFn> {
    if !op.is_closed() {
        return Err(Error::TypeMismatch(format!(
            "fixed point of an open operator {} <- {}",
            op.in_space(),
            op.out_space()
        )));
    }
    let n = op.in_space().size();
    let system = Matrix::identity(n).sub(op.lin());
    let v = system.solve_vec(op.offset())?;
    Ok(ValueFn::from_parts(op.in_space(), v, None))
}

/// Solves `(I - gamma P) V = r` by Gaussian elimination with partial pivoting.
pub fn solve_linear(t: &Transformer) -> Result<ValueFn> {
    solve_affine_linear(&t.to_affine())
}

/// Smallest `H` with `gamma^H v_max <= eps`.
pub fn truncation_horizon(gamma: f64, v_max: f64, eps: f64) -> usize {
    if v_max <= eps {
        return 0;
    }
    let h = ((eps / v_max).ln() / gamma.ln()).ceil();
    let mut h = h.max(0.0) as usize;
    while gamma.powi(h as i32) * v_max > eps {
        h += 1;
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n: usize,
}

impl McEstimate {
    /// Mean and standard error of per-sample values, summed in order.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std_error: 0.0,
                n,
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            std_error: (var / n as f64).sqrt(),
            n,
        }
    }

    /// Acceptance half-width `sigmas * std_error + bias` around an exact value.
    pub fn tolerance(&self, sigmas: f64, bias: f64) -> f64 {
        sigmas * self.std_error + bias
    }

    /// `|mean - exact|`.
    pub fn gap(&self, exact: f64) -> f64 {
        (self.mean - exact).abs()
    }
}

/// Row-wise sampler over the nonzero entries of a kernel.
pub(crate) struct RowSampler {
    rows: Vec<(Vec<usize>, Vec<f64>)>,
}

impl RowSampler {
    pub(crate) fn new(k: &Kernel) -> Self {
        let rows = (0..k.from_space().size())
            .map(|i| {
                let mut idx = Vec::new();
                let mut cum = Vec::new();
                let mut acc = 0.0;
                for (j, &p) in k.row(i).iter().enumerate() {
                    if p > 0.0 {
                        acc += p;
                        idx.push(j);
                        cum.push(acc);
                    }
                }
                (idx, cum)
            })
            .collect();
        Self { rows }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, row: usize, rng: &mut R) -> usize {
        let (idx, cum) = &self.rows[row];
        let u = rng.gen::<f64>() * cum[cum.len() - 1];
        let k = cum.partition_point(|&c| c <= u).min(idx.len() - 1);
        idx[k]
    }
}

/// Truncated discounted return `sum_{t<H} gamma^t rho(r_t)` averaged over
/// `n_traj` trajectories from `s0`. Trajectory `i` draws from stream `i` of
/// the seeded generator, so results do not depend on the thread count.
pub fn monte_carlo_value(
    m: &Oddc,
    pi: &Policy,
    s0: usize,
    horizon: usize,
    n_traj: usize,
    seed: u64,
) -> Result<McEstimate> {
    if m.s_in() != m.s_out() {
        return Err(Error::TypeMismatch("trajectories need s_in == s_out".into()));
    }
    if s0 >= m.s_in().size() {
        return Err(Error::InvalidValue(format!("start state {s0} out of range")));
    }
    let k = close_loop(m, pi)?;
    let sampler = RowSampler::new(&k);
    let nr = m.reward_space().size();
    let rho = m.rho();
    let gamma = m.gamma();
    let returns: Vec<f64> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut s = s0;
            let mut disc = 1.0;
            let mut ret = 0.0;
            for _ in 0..horizon {
                let j = sampler.sample(s, &mut rng);
                ret += disc * rho[j % nr];
                disc *= gamma;
                s = j / nr;
            }
            ret
        })
        .collect();
    Ok(McEstimate::from_samples(&returns))
}

/// Exact `sup_{||V|| <= radius} ||t V - u V||_inf` for affine transformers.
pub fn operator_distance(t: &Transformer, u: &Transformer, radius: f64) -> Result<f64> {
    t.to_affine().distance(&u.to_affine(), radius)
}

/// One optimality backup: `(T* V)(s) = max_a r(s,a) + gamma sum P(s'|s,a) V(s')`,
/// with ties going to the lowest action index.
pub fn optimality_backup(mdp: &Mdp, v: &ValueFn) -> Result<(ValueFn, Vec<usize>)> {
    mdp.states().ensure_eq(v.space())?;
    let (values, argmax) = backup_raw(mdp, v.values());
    Ok((ValueFn::from_parts(mdp.states(), values, None), argmax))
}

fn backup_raw(mdp: &Mdp, v: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let na = mdp.actions().size();
    let mut values = Vec::with_capacity(v.len());
    let mut argmax = Vec::with_capacity(v.len());
    for s in 0..mdp.states().size() {
        let mut best = f64::NEG_INFINITY;
        let mut best_a = 0;
        for a in 0..na {
            let q = mdp.r(s, a) + mdp.gamma() * crate::linalg::dot(mdp.transition_row(s, a), v);
            if q > best {
                best = q;
                best_a = a;
            }
        }
        values.push(best);
        argmax.push(best_a);
    }
    (values, argmax)
}

#[derive(Debug, Clone)]
pub struct OptimalSolution {
    pub value: ValueFn,
    /// Greedy action per state with respect to `value`.
    pub policy: Vec<usize>,
    pub iterations: usize,
}

/// Optimal value by iterating `T*` from zero, with the same stopping rule as
/// [`value_iteration`].
pub fn solve_optimal(mdp: &Mdp, tol: f64) -> Result<OptimalSolution> {
    let g = mdp.gamma();
    let mut v = vec![0.0; mdp.states().size()];
    for k in 1..=MAX_ITERATIONS {
        let (next, _) = backup_raw(mdp, &v);
        let residual = sup_dist(&next, &v);
        v = next;
        if g * residual <= tol * (1.0 - g) {
            let (_, policy) = backup_raw(mdp, &v);
            return Ok(OptimalSolution {
                value: ValueFn::from_parts(mdp.states(), v, None),
                policy,
                iterations: k,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        residual: sup_norm(&v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state() -> Transformer {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        Transformer::from_tables(&s, vec![1.0, 0.0], 0.5, vec![vec![0.5, 0.5], vec![0.0, 1.0]]).unwrap()
    }

    #[test]
    fn two_state_fixed_point() {
        let t = two_state();
        let lin = solve_linear(&t).unwrap();
        assert!((lin.get(0) - 4.0 / 3.0).abs() < 1e-14);
        assert!(lin.get(1).abs() < 1e-14);
        let (vi, _) = solve_fixed_point(&t, 1e-12).unwrap();
        assert!(sup_dist(vi.values(), lin.values()) <= 1e-12);
    }

    #[test]
    fn zero_reward_converges_in_one_step() {
        let s = FiniteSpace::indexed("S", "s", 3).unwrap();
        let t = Transformer::from_tables(&s, vec![0.0; 3], 0.9, vec![vec![1.0 / 3.0; 3]; 3]).unwrap();
        let (v, k) = solve_fixed_point(&t, 1e-10).unwrap();
        assert_eq!(k, 1);
        assert!(v.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn constant_reward_closed_form() {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        let t = Transformer::from_tables(&s, vec![0.3, 0.3], 0.75, vec![vec![0.2, 0.8], vec![0.6, 0.4]]).unwrap();
        let v = solve_linear(&t).unwrap();
        assert!(v.values().iter().all(|x| (x - 1.2).abs() < 1e-14));
    }

    #[test]
    fn affine_shift_law() {
        let t = two_state();
        let s = t.in_space().clone();
        let c = 0.7;
        let base = t.apply(&ValueFn::zeros(&s)).unwrap();
        let shifted = t.apply(&ValueFn::constant(&s, c)).unwrap();
        for i in 0..2 {
            assert!((shifted.get(i) - base.get(i) - 0.5 * c).abs() < 1e-15);
        }
        assert_eq!(base.values(), t.reward().values());
    }

    #[test]
    fn open_and_expansive_operators_are_rejected() {
        let x = FiniteSpace::indexed("X", "x", 2).unwrap();
        let y = FiniteSpace::indexed("Y", "y", 2).unwrap();
        let t = Transformer::new(ValueFn::zeros(&x), 0.5, Kernel::new(&x, &y, vec![vec![1.0, 0.0]; 2]).unwrap()).unwrap();
        assert!(matches!(solve_fixed_point(&t, 1e-10), Err(Error::TypeMismatch(_))));
        let op = AffineOperator::linear(&x, &x, Matrix::identity(2), 1.0).unwrap();
        assert!(matches!(value_iteration(&op, 1e-10, false), Err(Error::NonContraction { .. })));
    }

    #[test]
    fn horizon_meets_truncation() {
        let h = truncation_horizon(0.9, 10.0, 1e-4);
        assert!(0.9f64.powi(h as i32) * 10.0 <= 1e-4);
        assert!(0.9f64.powi(h as i32 - 1) * 10.0 > 1e-4);
        assert_eq!(truncation_horizon(0.9, 0.0, 1e-4), 0);
    }

    #[test]
    fn deterministic_chain_monte_carlo_is_exact() {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        let a = FiniteSpace::indexed("A", "a", 1).unwrap();
        let mdp = Mdp::from_tables(&s, &a, vec![vec![0.0, 1.0], vec![0.0, 1.0]], vec![1.0, 0.0], 0.5).unwrap();
        let m = mdp.to_oddc().unwrap();
        let pi = Policy::uniform(&s, &a);
        let est = monte_carlo_value(&m, &pi, 0, 40, 100, 3).unwrap();
        assert_eq!(est.mean, 1.0);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn tie_break_prefers_lowest_action() {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        let a = FiniteSpace::indexed("A", "a", 2).unwrap();
        let row = vec![0.5, 0.5];
        let mdp = Mdp::from_tables(&s, &a, vec![row.clone(); 4], vec![1.0, 1.0, 0.0, 0.0], 0.9).unwrap();
        let (_, argmax) = optimality_backup(&mdp, &ValueFn::zeros(&s)).unwrap();
        assert_eq!(argmax, vec![0, 0]);
    }
}
