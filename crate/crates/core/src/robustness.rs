//! End-to-end scenarios: additive factorization of independent products and
//! depth-discounted robustness of a two-module series loop.

use rand::Rng;

use crate::bellman::{make_transformer, solve_affine_linear, solve_linear, Transformer};
use crate::circuit::CircuitExpr;
use crate::component::{Oddc, Policy};
use crate::error::{Error, Result};
use crate::kernel::Kernel;
use crate::linalg::{sup_dist, Matrix};
use crate::random::{random_kernel, random_policy, random_probs, random_values, rng};
use crate::space::FiniteSpace;
use crate::value::ValueFn;

/// Slack on every asserted link.
pub const LINK_TOL: f64 = 1e-9;
/// Tolerance for additive factorization.
pub const FACTOR_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelReport {
    /// `max |V(s1, s2) - V1(s1) - V2(s2)|`.
    pub factor_gap: f64,
    /// `max |T(V1 + V2) - (T1 V1 + T2 V2)|` on a sampled separable argument.
    pub separable_gap: f64,
    /// Factorization gap when a joint bonus couples the rewards.
    pub coupled_gap: f64,
    pub pass: bool,
}

/// Separable function `(s1, s2) |-> v1(s1) + v2(s2)`.
fn separable(v1: &[f64], v2: &[f64]) -> Vec<f64> {
    v1.iter().flat_map(|a| v2.iter().map(move |b| a + b)).collect()
}

/// Solves the product and both factors; the negative control adds a bonus
/// of `coupling` whenever both modules sit in their first state.
pub fn run_parallel_factorization(m1: &Oddc, m2: &Oddc, pi1: &Policy, pi2: &Policy, coupling: f64, seed: u64) -> Result<ParallelReport> {
    let prod = Oddc::parallel(m1, m2)?;
    let pi = Policy::tensor(pi1, pi2);
    let (t1, t2, t) = (make_transformer(m1, pi1)?, make_transformer(m2, pi2)?, make_transformer(&prod, &pi)?);
    let (v1, v2, v) = (solve_linear(&t1)?, solve_linear(&t2)?, solve_linear(&t)?);
    let sum = separable(v1.values(), v2.values());
    let factor_gap = sup_dist(v.values(), &sum);

    let mut r = rng(seed);
    let w1 = random_values(&mut r, t1.out_space().size(), t1.ball_out());
    let w2 = random_values(&mut r, t2.out_space().size(), t2.ball_out());
    let separable_gap = sup_dist(
        &t.apply_raw(&separable(&w1, &w2)),
        &separable(&t1.apply_raw(&w1), &t2.apply_raw(&w2)),
    );

    let mut reward = t.reward().values().to_vec();
    reward[0] += coupling;
    let coupled = Transformer::new(ValueFn::new(t.in_space(), reward)?, t.gamma(), t.trans().clone())?;
    let coupled_gap = sup_dist(solve_linear(&coupled)?.values(), &sum);
    Ok(ParallelReport {
        factor_gap,
        separable_gap,
        coupled_gap,
        pass: factor_gap <= FACTOR_TOL && separable_gap <= FACTOR_TOL,
    })
}

/// Perturbation of one module of a two-module loop. `eps_p` is the row-wise
/// L1 distance attained by every perturbed transition row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    /// 0 for the first (outer) module, 1 for the second.
    pub target: usize,
    pub eps_r: f64,
    pub eps_p: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target > 1 {
            return Err(Error::InvalidPerturbation(format!("module index {} not in {{0, 1}}", self.target)));
        }
        if !(self.eps_r >= 0.0) || !(0.0..=2.0).contains(&self.eps_p) {
            return Err(Error::InvalidPerturbation(format!(
                "eps_r = {}, eps_P = {} out of range",
                self.eps_r, self.eps_p
            )));
        }
        Ok(())
    }
}

/// Shifts all rewards by `+eps` (or `-eps` if that overflows `r_max`).
fn shift_rewards(r: &[f64], eps: f64, r_max: f64) -> Result<Vec<f64>> {
    let hi = r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lo = r.iter().fold(f64::INFINITY, |m, &x| m.min(x));
    let delta = if hi + eps <= r_max {
        eps
    } else if lo - eps >= -r_max {
        -eps
    } else {
        return Err(Error::InvalidPerturbation(format!(
            "reward shift {eps} leaves [-{r_max}, {r_max}] in both directions"
        )));
    };
    Ok(r.iter().map(|x| x + delta).collect())
}

/// Mixes each row toward a random row at the rate that makes the L1
/// distance exactly `eps`, falling back to the point mass on the least
/// likely column when the random row is too close.
fn perturb_rows<R: Rng + ?Sized>(k: &Kernel, eps: f64, rng: &mut R) -> Result<Kernel> {
    if eps == 0.0 {
        return Ok(k.clone());
    }
    let n = k.to_space().size();
    let mut m = Matrix::zeros(k.from_space().size(), n);
    for i in 0..k.from_space().size() {
        let p = k.row(i);
        let mut q = random_probs(rng, n, false);
        let mut d: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
        if d < eps {
            let j = (0..n)
                .min_by(|&a, &b| p[a].total_cmp(&p[b]))
                .expect("nonempty row");
            q = vec![0.0; n];
            q[j] = 1.0;
            d = 2.0 * (1.0 - p[j]);
        }
        if d < eps {
            return Err(Error::InvalidPerturbation(format!("row {i} cannot move by {eps} in L1")));
        }
        let lam = eps / d;
        for j in 0..n {
            m.set(i, j, (1.0 - lam) * p[j] + lam * q[j]);
        }
    }
    Kernel::from_matrix(k.from_space(), k.to_space(), m)
}

/// A closed two-module loop `first: B(Y) -> B(X)` after `second: B(X) -> B(Y)`
/// with a common discount and reward bound.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoModuleCircuit {
    pub first: Transformer,
    pub second: Transformer,
    pub r_max: f64,
}

impl TwoModuleCircuit {
    pub fn new(first: Transformer, second: Transformer, r_max: f64) -> Result<Self> {
        if first.gamma() != second.gamma() {
            return Err(Error::InvalidComponent("modules need a common discount".into()));
        }
        first.out_space().ensure_eq(second.in_space())?;
        second.out_space().ensure_eq(first.in_space())?;
        Ok(Self {
            first: first.with_reward_bound(r_max)?,
            second: second.with_reward_bound(r_max)?,
            r_max,
        })
    }

    pub fn from_components(m1: &Oddc, pi1: &Policy, m2: &Oddc, pi2: &Policy) -> Result<Self> {
        if m1.r_max() != m2.r_max() {
            return Err(Error::RewardBoundMismatch(m1.r_max(), m2.r_max()));
        }
        Self::new(make_transformer(m1, pi1)?, make_transformer(m2, pi2)?, m1.r_max())
    }

    pub fn gamma(&self) -> f64 {
        self.first.gamma()
    }

    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma())
    }

    pub fn expr(&self) -> CircuitExpr {
        CircuitExpr::series(CircuitExpr::transformer(&self.first), CircuitExpr::transformer(&self.second))
    }

    pub fn module(&self, i: usize) -> &Transformer {
        if i == 0 {
            &self.first
        } else {
            &self.second
        }
    }

    pub fn perturbed(&self, spec: &PerturbationSpec) -> Result<TwoModuleCircuit> {
        spec.validate()?;
        let mut r = rng(spec.seed);
        let t = self.module(spec.target);
        let reward = shift_rewards(t.reward().values(), spec.eps_r, self.r_max)?;
        let trans = perturb_rows(t.trans(), spec.eps_p, &mut r)?;
        let p = Transformer::new(ValueFn::new(t.in_space(), reward)?, t.gamma(), trans)?;
        if spec.target == 0 {
            Self::new(p, self.second.clone(), self.r_max)
        } else {
            Self::new(self.first.clone(), p, self.r_max)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub name: String,
    pub bound: f64,
    pub measured: f64,
    pub pass: bool,
}

impl Link {
    fn new(name: &str, bound: f64, measured: f64) -> Self {
        Self {
            name: name.to_string(),
            bound,
            measured,
            pass: measured <= bound + LINK_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    /// Local mismatch `eps_r + gamma V_max eps_P` per module, from measured parts.
    pub eps_formula: [f64; 2],
    /// Exact operator distance per module at `V_max`.
    pub eps_exact: [f64; 2],
    /// `eps_1 + gamma eps_2`.
    pub macro_bound: f64,
    pub macro_distance: f64,
    /// `(eps_1 + gamma eps_2) / (1 - gamma^2)`.
    pub gap_bound: f64,
    pub gap_measured: f64,
    pub links: Vec<Link>,
}

impl RobustnessReport {
    pub fn pass(&self) -> bool {
        self.links.iter().all(|l| l.pass)
    }

    pub fn slack(&self) -> f64 {
        self.gap_bound - self.gap_measured
    }
}

/// `sup_x |r - r'|` and `sup_x ||P(.|x) - P'(.|x)||_1`.
fn mismatch_parts(t: &Transformer, u: &Transformer) -> (f64, f64) {
    let er = sup_dist(t.reward().values(), u.reward().values());
    let ep = (0..t.in_space().size())
        .map(|x| t.trans().row(x).iter().zip(u.trans().row(x)).map(|(a, b)| (a - b).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    (er, ep)
}

/// Runs the full chain from local mismatch to fixed-point gap for a base
/// loop and its perturbation.
pub fn run_two_module_robustness(base: &TwoModuleCircuit, spec: &PerturbationSpec) -> Result<RobustnessReport> {
    let pert = base.perturbed(spec)?;
    robustness_chain(base, &pert)
}

/// The chain for an arbitrary pair of loops of the same type.
pub fn robustness_chain(base: &TwoModuleCircuit, pert: &TwoModuleCircuit) -> Result<RobustnessReport> {
    let gamma = base.gamma();
    let v_max = base.v_max();
    let mut eps_formula = [0.0; 2];
    let mut eps_exact = [0.0; 2];
    let mut links = Vec::new();
    for i in 0..2 {
        let (er, ep) = mismatch_parts(base.module(i), pert.module(i));
        eps_formula[i] = er + gamma * v_max * ep;
        eps_exact[i] = base.module(i).to_affine().distance(&pert.module(i).to_affine(), v_max)?;
        links.push(Link::new(&format!("module {} local mismatch", i + 1), eps_formula[i], eps_exact[i]));
    }
    let (c0, c1) = (base.expr().compile()?, pert.expr().compile()?);
    let macro_bound = eps_formula[0] + gamma * eps_formula[1];
    let macro_distance = c0.distance(&c1, v_max)?;
    links.push(Link::new("macro mismatch", macro_bound, macro_distance));
    let gap_bound = macro_bound / (1.0 - gamma * gamma);
    let gap_measured = sup_dist(solve_affine_linear(&c0)?.values(), solve_affine_linear(&c1)?.values());
    links.push(Link::new("fixed-point gap", gap_bound, gap_measured));
    Ok(RobustnessReport {
        eps_formula,
        eps_exact,
        macro_bound,
        macro_distance,
        gap_bound,
        gap_measured,
        links,
    })
}

/// The same perturbation placed on the first and on the second module.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthReport {
    pub first: RobustnessReport,
    pub second: RobustnessReport,
    /// `|macro_bound(second) - gamma macro_bound(first)|`; zero when both
    /// perturbations attain the same local mismatch.
    pub attenuation_error: f64,
    pub pass: bool,
}

/// Runs the chain for `(eps_r, eps_p)` on module 1 and on module 2 and checks
/// that the deeper placement is certified with one extra factor `gamma`.
pub fn depth_attenuation(base: &TwoModuleCircuit, eps_r: f64, eps_p: f64, seed: u64) -> Result<DepthReport> {
    let first = run_two_module_robustness(base, &PerturbationSpec { target: 0, eps_r, eps_p, seed })?;
    let second = run_two_module_robustness(base, &PerturbationSpec { target: 1, eps_r, eps_p, seed })?;
    let attenuation_error = (second.macro_bound - base.gamma() * first.macro_bound).abs();
    let pass = first.pass() && second.pass() && attenuation_error <= LINK_TOL;
    Ok(DepthReport {
        first,
        second,
        attenuation_error,
        pass,
    })
}

/// Random component `s_in x A -> s_out x R` with reward levels in `[-0.8, 0.8]`
/// and declared bound 1.
pub fn random_module<R: Rng + ?Sized>(
    rng: &mut R,
    s_in: &FiniteSpace,
    s_out: &FiniteSpace,
    n_actions: usize,
    n_rewards: usize,
    gamma: f64,
) -> Result<Oddc> {
    let a = FiniteSpace::indexed("A", "a", n_actions)?;
    let r = FiniteSpace::indexed("R", "r", n_rewards)?;
    let k = random_kernel(rng, &FiniteSpace::product(s_in, &a), &FiniteSpace::product(s_out, &r), true);
    let rho = random_values(rng, n_rewards, 0.8);
    Oddc::new(s_in, &a, s_out, &r, k, rho, gamma)?.with_reward_bound(1.0)
}

/// Random loop between spaces of sizes `n_x` and `n_y`.
pub fn random_two_module<R: Rng + ?Sized>(rng: &mut R, n_x: usize, n_y: usize, gamma: f64) -> Result<TwoModuleCircuit> {
    let x = FiniteSpace::indexed("X", "x", n_x)?;
    let y = FiniteSpace::indexed("Y", "y", n_y)?;
    let na = rng.gen_range(1..=3);
    let m1 = random_module(rng, &x, &y, na, 3, gamma)?;
    let m2 = random_module(rng, &y, &x, na, 3, gamma)?;
    let pi1 = random_policy(rng, &x, m1.actions());
    let pi2 = random_policy(rng, &y, m2.actions());
    TwoModuleCircuit::from_components(&m1, &pi1, &m2, &pi2)
}

/// The fixed instance with `gamma = 0.5` used for the reward-only example.
pub fn reference_loop() -> Result<TwoModuleCircuit> {
    let x = FiniteSpace::indexed("X", "x", 2)?;
    let y = FiniteSpace::indexed("Y", "y", 2)?;
    let first = Transformer::new(
        ValueFn::new(&x, vec![0.5, -0.25])?,
        0.5,
        Kernel::new(&x, &y, vec![vec![0.7, 0.3], vec![0.2, 0.8]])?,
    )?;
    let second = Transformer::new(
        ValueFn::new(&y, vec![0.25, 0.0])?,
        0.5,
        Kernel::new(&y, &x, vec![vec![0.5, 0.5], vec![1.0, 0.0]])?,
    )?;
    TwoModuleCircuit::new(first, second, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::random_oddc;

    #[test]
    fn reward_only_on_second_module() {
        let base = reference_loop().unwrap();
        let spec = PerturbationSpec { target: 1, eps_r: 0.1, eps_p: 0.0, seed: 0 };
        let rep = run_two_module_robustness(&base, &spec).unwrap();
        assert!((rep.gap_bound - 1.0 / 15.0).abs() < 1e-15);
        assert!(rep.pass(), "{rep:?}");
        assert!(rep.gap_measured > 0.0);
    }

    #[test]
    fn null_perturbation() {
        let base = reference_loop().unwrap();
        let spec = PerturbationSpec { target: 0, eps_r: 0.0, eps_p: 0.0, seed: 0 };
        let rep = run_two_module_robustness(&base, &spec).unwrap();
        assert!(rep.gap_measured <= 1e-8);
    }

    #[test]
    fn transition_perturbation_is_attained() {
        let base = reference_loop().unwrap();
        let spec = PerturbationSpec { target: 0, eps_r: 0.0, eps_p: 0.3, seed: 9 };
        let p = base.perturbed(&spec).unwrap();
        let (_, ep) = mismatch_parts(&base.first, &p.first);
        assert!((ep - 0.3).abs() < 1e-12);
    }

    #[test]
    fn bad_specs_are_rejected() {
        let base = reference_loop().unwrap();
        for spec in [
            PerturbationSpec { target: 2, eps_r: 0.0, eps_p: 0.0, seed: 0 },
            PerturbationSpec { target: 0, eps_r: -1.0, eps_p: 0.0, seed: 0 },
            PerturbationSpec { target: 0, eps_r: 0.0, eps_p: 2.5, seed: 0 },
        ] {
            assert!(matches!(base.perturbed(&spec), Err(Error::InvalidPerturbation(_))));
        }
    }

    #[test]
    fn depth_attenuation_of_the_certificate() {
        let base = reference_loop().unwrap();
        let outer = run_two_module_robustness(&base, &PerturbationSpec { target: 0, eps_r: 0.1, eps_p: 0.0, seed: 0 }).unwrap();
        let inner = run_two_module_robustness(&base, &PerturbationSpec { target: 1, eps_r: 0.1, eps_p: 0.0, seed: 0 }).unwrap();
        assert!((inner.macro_bound - 0.5 * outer.macro_bound).abs() < 1e-15);
        let rep = depth_attenuation(&base, 0.1, 0.2, 3).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn factorization_and_negative_control() {
        let mut r = rng(4);
        let m1 = random_oddc(&mut r, 3, 2, 2, 0.9);
        let m2 = random_oddc(&mut r, 2, 2, 3, 0.9);
        let pi1 = random_policy(&mut r, m1.s_in(), m1.actions());
        let pi2 = random_policy(&mut r, m2.s_in(), m2.actions());
        let rep = run_parallel_factorization(&m1, &m2, &pi1, &pi2, 0.5, 1).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.coupled_gap >= 0.5 - 1e-12);
    }
}
