//! Finite-prefix importance weights, exact prefix enumeration and the
//! factorization of weights across independent and interface-coupled modules.

use rand::Rng;
use rayon::prelude::*;

use crate::bellman::{McEstimate, RowSampler};
use crate::component::{Mdp, Policy};
use crate::error::{Error, Result};
use crate::kernel::{Dist, Kernel};
use crate::random::stream_rng;
use crate::space::FiniteSpace;

/// Relative tolerance for identities that hold exactly in real arithmetic.
pub const EXACT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPrefix {
    steps: Vec<Step>,
}

impl TrajectoryPrefix {
    pub fn new(steps: Vec<Step>) -> Result<Self> {
        for (t, w) in steps.windows(2).enumerate() {
            if w[0].next_state != w[1].state {
                return Err(Error::InvalidValue(format!(
                    "prefix breaks at step {}: next state {} but state {}",
                    t + 1,
                    w[0].next_state,
                    w[1].state
                )));
            }
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `sum_t gamma^t r_t`.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        let mut disc = 1.0;
        let mut ret = 0.0;
        for s in &self.steps {
            ret += disc * s.reward;
            disc *= gamma;
        }
        ret
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceWeights {
    /// `pi(a_t|s_t) / mu(a_t|s_t)`.
    pub step: Vec<f64>,
    /// `cumulative[t]` is the product of the first `t` step weights; `cumulative[0] = 1`.
    pub cumulative: Vec<f64>,
}

impl ImportanceWeights {
    pub fn total(&self) -> f64 {
        *self.cumulative.last().expect("cumulative starts at 1")
    }
}

/// Per-step ratios; `target` and `behavior` give each policy's probability
/// of the realized action.
fn ratio_weights(
    traj: &TrajectoryPrefix,
    target: impl Fn(&Step) -> f64,
    behavior: impl Fn(&Step) -> f64,
) -> Result<ImportanceWeights> {
    let mut step = Vec::with_capacity(traj.len());
    let mut cumulative = Vec::with_capacity(traj.len() + 1);
    cumulative.push(1.0);
    for (t, s) in traj.steps.iter().enumerate() {
        let (p, q) = (target(s), behavior(s));
        let w = if p == 0.0 {
            0.0
        } else if q == 0.0 {
            return Err(Error::AbsoluteContinuityViolation {
                step: t,
                state: s.state,
                action: s.action,
            });
        } else {
            p / q
        };
        step.push(w);
        cumulative.push(cumulative[t] * w);
    }
    Ok(ImportanceWeights { step, cumulative })
}

pub fn importance_weights(traj: &TrajectoryPrefix, pi: &Policy, mu: &Policy) -> Result<ImportanceWeights> {
    pi.state_space().ensure_eq(mu.state_space())?;
    pi.action_space().ensure_eq(mu.action_space())?;
    let (ns, na) = (pi.state_space().size(), pi.action_space().size());
    if traj.steps.iter().any(|s| s.state >= ns || s.action >= na) {
        return Err(Error::InvalidValue("prefix index out of range".into()));
    }
    ratio_weights(traj, |s| pi.prob(s.state, s.action), |s| mu.prob(s.state, s.action))
}

/// Requires `mu(a|s) > 0` wherever `pi(a|s) > 0`, so that behavior
/// enumeration sees every prefix the target can produce.
pub fn check_support(pi: &Policy, mu: &Policy) -> Result<()> {
    pi.state_space().ensure_eq(mu.state_space())?;
    pi.action_space().ensure_eq(mu.action_space())?;
    for s in 0..pi.state_space().size() {
        for a in 0..pi.action_space().size() {
            if pi.prob(s, a) > 0.0 && mu.prob(s, a) == 0.0 {
                return Err(Error::PolicySupport { state: s, action: a });
            }
        }
    }
    Ok(())
}

/// All length-`horizon` prefixes with positive probability under `pi`,
/// with their probabilities. Initial states are drawn from `init`.
pub fn enumerate_prefixes(mdp: &Mdp, init: &Dist, pi: &Policy, horizon: usize) -> Result<Vec<(TrajectoryPrefix, f64)>> {
    init.space().ensure_eq(mdp.states())?;
    pi.state_space().ensure_eq(mdp.states())?;
    pi.action_space().ensure_eq(mdp.actions())?;
    let mut out = Vec::new();
    let mut stack = Vec::with_capacity(horizon);
    for (s0, &p0) in init.probs().iter().enumerate() {
        if p0 > 0.0 {
            extend(mdp, pi, horizon, s0, p0, &mut stack, &mut out);
        }
    }
    Ok(out)
}

fn extend(
    mdp: &Mdp,
    pi: &Policy,
    horizon: usize,
    s: usize,
    prob: f64,
    stack: &mut Vec<Step>,
    out: &mut Vec<(TrajectoryPrefix, f64)>,
) {
    if stack.len() == horizon {
        out.push((TrajectoryPrefix { steps: stack.clone() }, prob));
        return;
    }
    for a in 0..mdp.actions().size() {
        let pa = pi.prob(s, a);
        if pa == 0.0 {
            continue;
        }
        for (s2, &q) in mdp.transition_row(s, a).iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            stack.push(Step {
                state: s,
                action: a,
                reward: mdp.r(s, a),
                next_state: s2,
            });
            extend(mdp, pi, horizon, s2, prob * pa * q, stack, out);
            stack.pop();
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + b.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChangeOfMeasure {
    /// `E_mu[W_T g]` over enumerated behavior prefixes.
    pub weighted: f64,
    /// `E_pi[g]` over enumerated target prefixes.
    pub target: f64,
    /// `E_mu[W_t]` for `t = 0..=T`.
    pub martingale: Vec<f64>,
    pub prefixes: usize,
    pub pass: bool,
}

/// Checks `E_mu[W_T g] = E_pi[g]` and `E_mu[W_t] = 1` by full enumeration.
pub fn change_of_measure(
    mdp: &Mdp,
    init: &Dist,
    pi: &Policy,
    mu: &Policy,
    horizon: usize,
    g: impl Fn(&TrajectoryPrefix) -> f64,
) -> Result<ChangeOfMeasure> {
    check_support(pi, mu)?;
    let behavior = enumerate_prefixes(mdp, init, mu, horizon)?;
    let mut weighted = 0.0;
    let mut martingale = vec![0.0; horizon + 1];
    for (traj, p) in &behavior {
        let w = importance_weights(traj, pi, mu)?;
        weighted += p * w.total() * g(traj);
        for (m, c) in martingale.iter_mut().zip(&w.cumulative) {
            *m += p * c;
        }
    }
    let target: f64 = enumerate_prefixes(mdp, init, pi, horizon)?
        .iter()
        .map(|(traj, p)| p * g(traj))
        .sum();
    let pass = rel_err(weighted, target) <= EXACT_TOL && martingale.iter().all(|m| (m - 1.0).abs() <= EXACT_TOL);
    Ok(ChangeOfMeasure {
        weighted,
        target,
        martingale,
        prefixes: behavior.len(),
        pass,
    })
}

/// One module of a decomposable circuit with its target and behavior policies.
#[derive(Debug, Clone, Copy)]
pub struct ModuleSpec<'a> {
    pub mdp: &'a Mdp,
    pub init: &'a Dist,
    pub target: &'a Policy,
    pub behavior: &'a Policy,
}

/// Independent product of two MDPs with additive rewards.
pub fn product_mdp(m1: &Mdp, m2: &Mdp) -> Result<Mdp> {
    if m1.gamma() != m2.gamma() {
        return Err(Error::InvalidComponent("product modules need a common discount".into()));
    }
    let states = FiniteSpace::product(m1.states(), m2.states());
    let actions = FiniteSpace::product(m1.actions(), m2.actions());
    let (n2, na1, na2) = (m2.states().size(), m1.actions().size(), m2.actions().size());
    let mut rows = Vec::with_capacity(states.size() * actions.size());
    let mut reward = Vec::with_capacity(states.size() * actions.size());
    for s1 in 0..m1.states().size() {
        for s2 in 0..n2 {
            for a1 in 0..na1 {
                for a2 in 0..na2 {
                    let (r1, r2) = (m1.transition_row(s1, a1), m2.transition_row(s2, a2));
                    rows.push(r1.iter().flat_map(|p| r2.iter().map(move |q| p * q)).collect());
                    reward.push(m1.r(s1, a1) + m2.r(s2, a2));
                }
            }
        }
    }
    let trans = Kernel::new(&FiniteSpace::product(&states, &actions), &states, rows)?;
    Mdp::new(&states, &actions, trans, reward, m1.gamma())?.with_reward_bound(m1.r_max() + m2.r_max())
}

/// Product of two initial distributions.
pub fn product_dist(d1: &Dist, d2: &Dist) -> Result<Dist> {
    let probs = d1
        .probs()
        .iter()
        .flat_map(|p| d2.probs().iter().map(move |q| p * q))
        .collect();
    Dist::new(&FiniteSpace::product(d1.space(), d2.space()), probs)
}

/// Projects a product-space prefix onto one module.
fn project(traj: &TrajectoryPrefix, first: bool, m1: &Mdp, m2: &Mdp) -> TrajectoryPrefix {
    let (n2, na2) = (m2.states().size(), m2.actions().size());
    let steps = traj
        .steps
        .iter()
        .map(|s| {
            let (s1, s2, a1, a2, t1, t2) = (s.state / n2, s.state % n2, s.action / na2, s.action % na2, s.next_state / n2, s.next_state % n2);
            if first {
                Step { state: s1, action: a1, reward: m1.r(s1, a1), next_state: t1 }
            } else {
                Step { state: s2, action: a2, reward: m2.r(s2, a2), next_state: t2 }
            }
        })
        .collect();
    TrajectoryPrefix { steps }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorReport {
    pub prefixes: usize,
    /// Largest `|W - W1 W2| / (1 + |W|)` over enumerated prefixes.
    pub max_factor_error: f64,
    /// `E_mu[W^2]` per module.
    pub module_second_moments: [f64; 2],
    pub global_second_moment: f64,
    /// `|log E[W^2] - log E[W1^2] - log E[W2^2]|`.
    pub log_additivity_error: f64,
    pub global_mean_weight: f64,
    pub pass: bool,
}

/// Enumerates the product circuit under the product behavior policy and
/// checks that global weights factorize and second moments multiply.
pub fn factorized_weights(m1: ModuleSpec<'_>, m2: ModuleSpec<'_>, horizon: usize) -> Result<FactorReport> {
    let mdp = product_mdp(m1.mdp, m2.mdp)?;
    let init = product_dist(m1.init, m2.init)?;
    let pi = Policy::tensor(m1.target, m2.target);
    let mu = Policy::tensor(m1.behavior, m2.behavior);
    check_support(&pi, &mu)?;
    let prefixes = enumerate_prefixes(&mdp, &init, &mu, horizon)?;
    let mut max_factor_error = 0.0_f64;
    let (mut second, mut mean) = (0.0, 0.0);
    for (traj, p) in &prefixes {
        let w = importance_weights(traj, &pi, &mu)?.total();
        let w1 = importance_weights(&project(traj, true, m1.mdp, m2.mdp), m1.target, m1.behavior)?.total();
        let w2 = importance_weights(&project(traj, false, m1.mdp, m2.mdp), m2.target, m2.behavior)?.total();
        max_factor_error = max_factor_error.max(rel_err(w1 * w2, w));
        second += p * w * w;
        mean += p * w;
    }
    let module_second = |m: ModuleSpec<'_>| -> Result<f64> {
        let mut acc = 0.0;
        for (traj, p) in enumerate_prefixes(m.mdp, m.init, m.behavior, horizon)? {
            let w = importance_weights(&traj, m.target, m.behavior)?.total();
            acc += p * w * w;
        }
        Ok(acc)
    };
    let module_second_moments = [module_second(m1)?, module_second(m2)?];
    let log_additivity_error =
        (second.ln() - module_second_moments[0].ln() - module_second_moments[1].ln()).abs();
    let pass = max_factor_error <= EXACT_TOL && log_additivity_error <= EXACT_TOL && (mean - 1.0).abs() <= EXACT_TOL;
    Ok(FactorReport {
        prefixes: prefixes.len(),
        max_factor_error,
        module_second_moments,
        global_second_moment: second,
        log_additivity_error,
        global_mean_weight: mean,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledMoments {
    pub module: [McEstimate; 2],
    pub global: McEstimate,
    pub max_factor_error: f64,
    pub log_gap: f64,
    /// Four delta-method standard errors of the log-moment gap.
    pub tolerance: f64,
    pub pass: bool,
}

/// Monte Carlo estimate of the module and global second moments under the
/// product behavior policy.
pub fn sampled_second_moments(
    m1: ModuleSpec<'_>,
    m2: ModuleSpec<'_>,
    horizon: usize,
    n_traj: usize,
    seed: u64,
) -> Result<SampledMoments> {
    let mdp = product_mdp(m1.mdp, m2.mdp)?;
    let init = product_dist(m1.init, m2.init)?;
    let pi = Policy::tensor(m1.target, m2.target);
    let mu = Policy::tensor(m1.behavior, m2.behavior);
    check_support(&pi, &mu)?;
    let trans = RowSampler::new(mdp.trans());
    let act = RowSampler::new(mu.kernel());
    let init_k = Kernel::constant(&FiniteSpace::unit(), &init);
    let start = RowSampler::new(&init_k);
    let na = mdp.actions().size();
    let samples: Vec<Result<[f64; 4]>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut s = start.sample(0, &mut rng);
            let mut steps = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                let a = act.sample(s, &mut rng);
                let s2 = trans.sample(s * na + a, &mut rng);
                steps.push(Step { state: s, action: a, reward: mdp.r(s, a), next_state: s2 });
                s = s2;
            }
            let traj = TrajectoryPrefix { steps };
            let w = importance_weights(&traj, &pi, &mu)?.total();
            let w1 = importance_weights(&project(&traj, true, m1.mdp, m2.mdp), m1.target, m1.behavior)?.total();
            let w2 = importance_weights(&project(&traj, false, m1.mdp, m2.mdp), m2.target, m2.behavior)?.total();
            Ok([w, w1, w2, rel_err(w1 * w2, w)])
        })
        .collect();
    let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
    let sq = |k: usize| McEstimate::from_samples(&samples.iter().map(|x| x[k] * x[k]).collect::<Vec<_>>());
    let (global, e1, e2) = (sq(0), sq(1), sq(2));
    let max_factor_error = samples.iter().map(|x| x[3]).fold(0.0, f64::max);
    let log_gap = (global.mean.ln() - e1.mean.ln() - e2.mean.ln()).abs();
    let tolerance = 4.0 * (global.std_error / global.mean + e1.std_error / e1.mean + e2.std_error / e2.mean);
    Ok(SampledMoments {
        module: [e1, e2],
        global,
        max_factor_error,
        log_gap,
        tolerance,
        pass: max_factor_error <= EXACT_TOL && log_gap <= tolerance,
    })
}

/// Two modules wired in series through an interface: the upstream module
/// picks `y` from `S`, the downstream module picks its action from the
/// interface pair `(s, y)`. The joint action space is `Y x A2`.
#[derive(Debug, Clone)]
pub struct SeriesInterface {
    pub mdp: Mdp,
    pub init: Dist,
    pub upstream_target: Policy,
    pub upstream_behavior: Policy,
    /// Kernels `S x Y -> A2`.
    pub downstream_target: Kernel,
    pub downstream_behavior: Kernel,
}

impl SeriesInterface {
    fn joint(&self, up: &Policy, down: &Kernel) -> Result<Policy> {
        let s = self.mdp.states();
        let (ny, n2) = (up.action_space().size(), down.to_space().size());
        let rows = (0..s.size())
            .map(|st| {
                (0..ny)
                    .flat_map(|y| (0..n2).map(move |a| (y, a)))
                    .map(|(y, a)| up.prob(st, y) * down.prob(st * ny + y, a))
                    .collect()
            })
            .collect();
        Policy::from_rows(s, self.mdp.actions(), rows)
    }

    pub fn joint_target(&self) -> Result<Policy> {
        self.joint(&self.upstream_target, &self.downstream_target)
    }

    pub fn joint_behavior(&self) -> Result<Policy> {
        self.joint(&self.upstream_behavior, &self.downstream_behavior)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesChainReport {
    pub prefixes: usize,
    /// Largest `|W - W_up W_down|` relative error.
    pub max_factor_error: f64,
    pub upstream_mean_weight: f64,
    pub global_mean_weight: f64,
    pub change_of_measure: ChangeOfMeasure,
    pub pass: bool,
}

/// Enumerates the interface-decomposed instance and checks the chain rule
/// `W = W_up * W_down|up` per prefix, the martingale property of both the
/// upstream and the global weights, and the change-of-measure identity for
/// the discounted return.
pub fn series_chain_rule(inst: &SeriesInterface, horizon: usize) -> Result<SeriesChainReport> {
    let pi = inst.joint_target()?;
    let mu = inst.joint_behavior()?;
    check_support(&pi, &mu)?;
    let ny = inst.upstream_target.action_space().size();
    let n2 = inst.downstream_target.to_space().size();
    let prefixes = enumerate_prefixes(&inst.mdp, &inst.init, &mu, horizon)?;
    let mut max_factor_error = 0.0_f64;
    let (mut up_mean, mut mean) = (0.0, 0.0);
    for (traj, p) in &prefixes {
        let w = importance_weights(traj, &pi, &mu)?.total();
        let up = ratio_weights(
            traj,
            |s| inst.upstream_target.prob(s.state, s.action / n2),
            |s| inst.upstream_behavior.prob(s.state, s.action / n2),
        )?
        .total();
        let down = ratio_weights(
            traj,
            |s| inst.downstream_target.prob(s.state * ny + s.action / n2, s.action % n2),
            |s| inst.downstream_behavior.prob(s.state * ny + s.action / n2, s.action % n2),
        )?
        .total();
        max_factor_error = max_factor_error.max(rel_err(up * down, w));
        up_mean += p * up;
        mean += p * w;
    }
    let gamma = inst.mdp.gamma();
    let com = change_of_measure(&inst.mdp, &inst.init, &pi, &mu, horizon, |t| t.discounted_return(gamma))?;
    let pass = max_factor_error <= EXACT_TOL
        && (up_mean - 1.0).abs() <= EXACT_TOL
        && (mean - 1.0).abs() <= EXACT_TOL
        && com.pass;
    Ok(SeriesChainReport {
        prefixes: prefixes.len(),
        max_factor_error,
        upstream_mean_weight: up_mean,
        global_mean_weight: mean,
        change_of_measure: com,
        pass,
    })
}

/// Random interface-decomposed instance with full-support behavior policies.
pub fn random_series_interface<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_interface: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<SeriesInterface> {
    use crate::random::{random_kernel, random_values};
    let s = FiniteSpace::indexed("S", "s", n_states)?;
    let y = FiniteSpace::indexed("Y", "y", n_interface)?;
    let a2 = FiniteSpace::indexed("A", "a", n_actions)?;
    let actions = FiniteSpace::product(&y, &a2);
    let sa = FiniteSpace::product(&s, &actions);
    let trans = random_kernel(rng, &sa, &s, true);
    let reward = random_values(rng, sa.size(), 1.0);
    let mdp = Mdp::new(&s, &actions, trans, reward, gamma)?.with_reward_bound(1.0)?;
    let sy = FiniteSpace::product(&s, &y);
    Ok(SeriesInterface {
        init: crate::random::random_dist(rng, &s),
        upstream_target: Policy::new(random_kernel(rng, &s, &y, true)),
        upstream_behavior: Policy::new(random_kernel(rng, &s, &y, false)),
        downstream_target: random_kernel(rng, &sy, &a2, true),
        downstream_behavior: random_kernel(rng, &sy, &a2, false),
        mdp,
    })
}
