//! Finite POMDPs, the Bayes filter and exact belief trees.

use rand::Rng;
use rayon::prelude::*;

use crate::bellman::{McEstimate, RowSampler};
use crate::component::{check_discount, Mdp, Policy};
use crate::error::{Error, Result};
use crate::kernel::{Dist, Kernel};
use crate::random::stream_rng;
use crate::space::FiniteSpace;

/// Default node budget for belief-tree enumeration.
pub const NODE_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Pomdp {
    states: FiniteSpace,
    actions: FiniteSpace,
    observations: FiniteSpace,
    trans: Kernel,
    obs: Kernel,
    reward: Vec<f64>,
    gamma: f64,
    r_max: f64,
    init: Dist,
}

impl Pomdp {
    /// `trans: S x A -> S`; `obs: S x A -> O` keyed by `(s', a)`; `reward`
    /// indexed `s * |A| + a`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        states: &FiniteSpace,
        actions: &FiniteSpace,
        observations: &FiniteSpace,
        trans: Kernel,
        obs: Kernel,
        reward: Vec<f64>,
        gamma: f64,
        init: Dist,
    ) -> Result<Self> {
        check_discount(gamma)?;
        let sa = FiniteSpace::product(states, actions);
        trans.from_space().ensure_eq(&sa)?;
        trans.to_space().ensure_eq(states)?;
        obs.from_space().ensure_eq(&sa)?;
        obs.to_space().ensure_eq(observations)?;
        init.space().ensure_eq(states)?;
        if reward.len() != sa.size() || reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidComponent(format!(
                "reward table needs {} finite entries",
                sa.size()
            )));
        }
        let r_max = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self {
            states: states.clone(),
            actions: actions.clone(),
            observations: observations.clone(),
            trans,
            obs,
            reward,
            gamma,
            r_max,
            init,
        })
    }

    pub fn with_reward_bound(mut self, r_max: f64) -> Result<Self> {
        if !(r_max >= self.r_max) {
            return Err(Error::InvalidComponent(format!(
                "declared reward bound {r_max} is below max |r| = {}",
                self.r_max
            )));
        }
        self.r_max = r_max;
        Ok(self)
    }

    /// Observation `o = s'` with probability one.
    pub fn perfect_observation(mdp: &Mdp, init: Dist) -> Result<Self> {
        let sa = FiniteSpace::product(mdp.states(), mdp.actions());
        let na = mdp.actions().size();
        let map: Vec<usize> = (0..sa.size()).map(|i| i / na).collect();
        let obs = Kernel::deterministic(&sa, mdp.states(), &map)?;
        Self::new(
            mdp.states(),
            mdp.actions(),
            mdp.states(),
            mdp.trans().clone(),
            obs,
            mdp.reward().to_vec(),
            mdp.gamma(),
            init,
        )?
        .with_reward_bound(mdp.r_max())
    }

    pub fn states(&self) -> &FiniteSpace {
        &self.states
    }
    pub fn actions(&self) -> &FiniteSpace {
        &self.actions
    }
    pub fn observations(&self) -> &FiniteSpace {
        &self.observations
    }
    pub fn trans(&self) -> &Kernel {
        &self.trans
    }
    pub fn obs(&self) -> &Kernel {
        &self.obs
    }
    pub fn reward(&self) -> &[f64] {
        &self.reward
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }
    pub fn init(&self) -> &Dist {
        &self.init
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.actions.size() + a]
    }

    /// The underlying fully observed MDP.
    pub fn underlying_mdp(&self) -> Result<Mdp> {
        Mdp::new(&self.states, &self.actions, self.trans.clone(), self.reward.clone(), self.gamma)?
            .with_reward_bound(self.r_max)
    }

    /// Lifted reward `sum_s r(s, a) b(s)`.
    pub fn belief_reward(&self, b: &[f64], a: usize) -> f64 {
        b.iter().enumerate().map(|(s, p)| p * self.r(s, a)).sum()
    }

    /// Predicted next-state distribution `sum_s P(.|s, a) b(s)`.
    fn predict(&self, b: &[f64], a: usize) -> Vec<f64> {
        let na = self.actions.size();
        let mut pred = vec![0.0; self.states.size()];
        for (s, &p) in b.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (s2, q) in self.trans.row(s * na + a).iter().enumerate() {
                pred[s2] += p * q;
            }
        }
        pred
    }

    /// Observation law `l(.|b, a)` over `O`.
    pub fn observation_law(&self, b: &[f64], a: usize) -> Vec<f64> {
        let na = self.actions.size();
        let pred = self.predict(b, a);
        let mut law = vec![0.0; self.observations.size()];
        for (s2, &p) in pred.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (o, g) in self.obs.row(s2 * na + a).iter().enumerate() {
                law[o] += p * g;
            }
        }
        law
    }

    /// Raw filter step on probability vectors: `(posterior, pred_prob)`.
    pub(crate) fn filter(&self, b: &[f64], a: usize, o: usize) -> (Vec<f64>, f64) {
        let na = self.actions.size();
        let mut post = self.predict(b, a);
        for (s2, p) in post.iter_mut().enumerate() {
            *p *= self.obs.prob(s2 * na + a, o);
        }
        let mass: f64 = post.iter().sum();
        if mass > 0.0 {
            post.iter_mut().for_each(|p| *p /= mass);
        } else {
            let n = post.len() as f64;
            post.iter_mut().for_each(|p| *p = 1.0 / n);
        }
        (post, mass)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesUpdate {
    pub posterior: Dist,
    pub pred_prob: f64,
    /// Set when `pred_prob = 0`; the posterior is then uniform.
    pub zero_prob: bool,
}

pub fn bayes_update(p: &Pomdp, b: &Dist, a: usize, o: usize) -> Result<BayesUpdate> {
    b.space().ensure_eq(p.states())?;
    if a >= p.actions.size() || o >= p.observations.size() {
        return Err(Error::InvalidValue(format!("action {a} or observation {o} out of range")));
    }
    let (post, mass) = p.filter(b.probs(), a, o);
    Ok(BayesUpdate {
        posterior: Dist::new(p.states(), post)?,
        pred_prob: mass,
        zero_prob: mass == 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefNode {
    pub belief: Vec<f64>,
    pub depth: usize,
    pub parent: Option<usize>,
    /// `(action, observation)` leading here from the parent.
    pub via: Option<(usize, usize)>,
    /// Reached through an observation of zero predictive probability.
    pub zero_prob: bool,
}

/// Exact reachable belief tree from the initial belief. Children of node
/// `n` under action `a` are `children[n][a]`, one `(node, mass)` per
/// observation. Zero-mass branches are kept as flagged leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefTree {
    pub nodes: Vec<BeliefNode>,
    pub children: Vec<Vec<Vec<(usize, f64)>>>,
    pub horizon: usize,
}

impl BeliefTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn zero_prob_branches(&self) -> usize {
        self.nodes.iter().filter(|n| n.zero_prob).count()
    }

    /// Expected truncated return `E sum_{t<H} gamma^t r_B(b_t, a_t)` from the
    /// root under a belief policy `(belief, depth) -> action distribution`.
    pub fn policy_value<F>(&self, p: &Pomdp, policy: F) -> Result<f64>
    where
        F: Fn(&[f64], usize) -> Vec<f64>,
    {
        let na = p.actions().size();
        let mut value = vec![0.0; self.nodes.len()];
        // Children always follow their parent in `nodes`.
        for n in (0..self.nodes.len()).rev() {
            let node = &self.nodes[n];
            if node.depth >= self.horizon || self.children[n].is_empty() {
                continue;
            }
            let act = policy(&node.belief, node.depth);
            check_action_dist(&act, na)?;
            let mut v = 0.0;
            for (a, &pa) in act.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let cont: f64 = self.children[n][a].iter().map(|&(c, m)| m * value[c]).sum();
                v += pa * (p.belief_reward(&node.belief, a) + p.gamma() * cont);
            }
            value[n] = v;
        }
        Ok(value[0])
    }

    /// Optimal truncated value over belief policies.
    pub fn optimal_value(&self, p: &Pomdp) -> f64 {
        let na = p.actions().size();
        let mut value = vec![0.0; self.nodes.len()];
        for n in (0..self.nodes.len()).rev() {
            let node = &self.nodes[n];
            if node.depth >= self.horizon || self.children[n].is_empty() {
                continue;
            }
            value[n] = (0..na)
                .map(|a| {
                    let cont: f64 = self.children[n][a].iter().map(|&(c, m)| m * value[c]).sum();
                    p.belief_reward(&node.belief, a) + p.gamma() * cont
                })
                .fold(f64::NEG_INFINITY, f64::max);
        }
        value[0]
    }
}

fn check_action_dist(act: &[f64], na: usize) -> Result<()> {
    let total: f64 = act.iter().sum();
    if act.len() != na || act.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!(
            "belief policy returned {act:?} for {na} actions"
        )));
    }
    Ok(())
}

/// Number of nodes in a full tree of the given branching and depth.
fn tree_size(branching: usize, horizon: usize) -> Option<usize> {
    let mut total: usize = 1;
    let mut level: usize = 1;
    for _ in 0..horizon {
        level = level.checked_mul(branching)?;
        total = total.checked_add(level)?;
    }
    Some(total)
}

/// Enumerates all beliefs reachable from the initial belief to depth
/// `horizon`, without merging.
pub fn belief_mdp_to_horizon(p: &Pomdp, horizon: usize) -> Result<BeliefTree> {
    belief_tree_with_budget(p, horizon, NODE_BUDGET)
}

pub fn belief_tree_with_budget(p: &Pomdp, horizon: usize, limit: usize) -> Result<BeliefTree> {
    let (na, no) = (p.actions().size(), p.observations().size());
    // Worst case: every branch expanded.
    let worst = tree_size(na * no, horizon).unwrap_or(usize::MAX);
    if worst > limit {
        return Err(Error::BudgetExceeded { nodes: worst, limit });
    }
    let mut nodes = vec![BeliefNode {
        belief: p.init().probs().to_vec(),
        depth: 0,
        parent: None,
        via: None,
        zero_prob: false,
    }];
    let mut children: Vec<Vec<Vec<(usize, f64)>>> = vec![Vec::new()];
    let mut n = 0;
    while n < nodes.len() {
        if nodes[n].depth < horizon && !nodes[n].zero_prob {
            let mut per_action = Vec::with_capacity(na);
            for a in 0..na {
                let mut per_obs = Vec::with_capacity(no);
                for o in 0..no {
                    let (post, mass) = p.filter(&nodes[n].belief, a, o);
                    let id = nodes.len();
                    nodes.push(BeliefNode {
                        belief: post,
                        depth: nodes[n].depth + 1,
                        parent: Some(n),
                        via: Some((a, o)),
                        zero_prob: mass == 0.0,
                    });
                    children.push(Vec::new());
                    per_obs.push((id, mass));
                }
                per_action.push(per_obs);
            }
            children[n] = per_action;
        }
        n += 1;
    }
    Ok(BeliefTree {
        nodes,
        children,
        horizon,
    })
}

/// Belief policy `pi_B(a|b) = sum_s b(s) pi(a|s)`; on point-mass beliefs it
/// coincides with the state policy.
pub fn belief_linear(pi: &Policy) -> impl Fn(&[f64], usize) -> Vec<f64> + Sync + '_ {
    move |b: &[f64], _depth: usize| {
        let na = pi.action_space().size();
        let mut out = vec![0.0; na];
        for (s, &w) in b.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (a, o) in out.iter_mut().enumerate() {
                *o += w * pi.prob(s, a);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefReport {
    pub tree_value: f64,
    pub mc: McEstimate,
    pub nodes: usize,
    pub zero_prob_branches: usize,
    /// `gamma^H V_max`, the mass the horizon cuts off.
    pub truncation: f64,
    /// `4 std_error + truncation`.
    pub tolerance: f64,
    pub gap: f64,
    pub pass: bool,
}

/// Runs the same belief policy on the POMDP (filtering online, Monte Carlo)
/// and on the enumerated belief tree (exact expectation) and compares the
/// truncated discounted returns.
pub fn verify_belief_equivalence<F>(
    p: &Pomdp,
    policy: F,
    horizon: usize,
    n_traj: usize,
    seed: u64,
) -> Result<BeliefReport>
where
    F: Fn(&[f64], usize) -> Vec<f64> + Sync,
{
    let tree = belief_mdp_to_horizon(p, horizon)?;
    let tree_value = tree.policy_value(p, &policy)?;
    let na = p.actions().size();
    let trans = RowSampler::new(p.trans());
    let obs = RowSampler::new(p.obs());
    let init = p.init().probs();
    let returns: Vec<Result<f64>> = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut s = sample_index(init, &mut rng);
            let mut b = init.to_vec();
            let (mut ret, mut disc) = (0.0, 1.0);
            for t in 0..horizon {
                let act = policy(&b, t);
                check_action_dist(&act, na)?;
                let a = sample_index(&act, &mut rng);
                ret += disc * p.r(s, a);
                disc *= p.gamma();
                s = trans.sample(s * na + a, &mut rng);
                let o = obs.sample(s * na + a, &mut rng);
                b = p.filter(&b, a, o).0;
            }
            Ok(ret)
        })
        .collect();
    let returns = returns.into_iter().collect::<Result<Vec<_>>>()?;
    let mc = McEstimate::from_samples(&returns);
    let truncation = p.gamma().powi(horizon as i32) * p.v_max();
    let tolerance = mc.tolerance(4.0, truncation);
    let gap = mc.gap(tree_value);
    Ok(BeliefReport {
        tree_value,
        mc,
        nodes: tree.len(),
        zero_prob_branches: tree.zero_prob_branches(),
        truncation,
        tolerance,
        gap,
        pass: gap <= tolerance,
    })
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u = rng.gen::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Random POMDP with rewards in `[-1, 1]`, declared `R_max = 1` and a random
/// initial belief.
pub fn random_pomdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, n_obs: usize, gamma: f64) -> Result<Pomdp> {
    use crate::random::{random_dist, random_kernel, random_values};
    let s = FiniteSpace::indexed("S", "s", n_states)?;
    let a = FiniteSpace::indexed("A", "a", n_actions)?;
    let o = FiniteSpace::indexed("O", "o", n_obs)?;
    let sa = FiniteSpace::product(&s, &a);
    let trans = random_kernel(rng, &sa, &s, true);
    let obs = random_kernel(rng, &sa, &o, true);
    let reward = random_values(rng, sa.size(), 1.0);
    let init = random_dist(rng, &s);
    Pomdp::new(&s, &a, &o, trans, obs, reward, gamma, init)?.with_reward_bound(1.0)
}

/// A two-state listening problem: action 0 listens (85% accurate), actions
/// 1 and 2 open a door and reset the hidden state uniformly.
pub fn tiger(gamma: f64) -> Result<Pomdp> {
    let s = FiniteSpace::new("S", ["left", "right"])?;
    let a = FiniteSpace::new("A", ["listen", "open-left", "open-right"])?;
    let o = FiniteSpace::new("O", ["hear-left", "hear-right"])?;
    let stay = |s: usize| if s == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
    let reset = vec![0.5, 0.5];
    let mut trans = Vec::new();
    let mut obs = Vec::new();
    let mut reward = Vec::new();
    for st in 0..2 {
        for act in 0..3 {
            trans.push(if act == 0 { stay(st) } else { reset.clone() });
            // keyed by (s', a): the same row serves as G(.|s', a).
            obs.push(if act == 0 {
                if st == 0 {
                    vec![0.85, 0.15]
                } else {
                    vec![0.15, 0.85]
                }
            } else {
                vec![0.5, 0.5]
            });
            reward.push(match (st, act) {
                (_, 0) => -0.01,
                (0, 1) | (1, 2) => -1.0,
                _ => 0.1,
            });
        }
    }
    let sa = FiniteSpace::product(&s, &a);
    Pomdp::new(
        &s,
        &a,
        &o,
        Kernel::new(&sa, &s, trans)?,
        Kernel::new(&sa, &o, obs)?,
        reward,
        gamma,
        Dist::uniform(&s),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bellman::{mdp_transformer, solve_linear};
    use crate::random::{random_mdp, random_policy, rng};

    #[test]
    fn perfect_observation_is_a_dirac_filter() {
        let mut r = rng(3);
        let mdp = random_mdp(&mut r, 3, 2, 0.5);
        let p = Pomdp::perfect_observation(&mdp, Dist::uniform(mdp.states())).unwrap();
        for o in 0..3 {
            let u = bayes_update(&p, p.init(), 1, o).unwrap();
            if u.zero_prob {
                continue;
            }
            assert_eq!(u.posterior.prob(o), 1.0);
        }
    }

    #[test]
    fn uninformative_observation_returns_prediction() {
        let mut t = tiger(0.9).unwrap();
        // Opening a door: uniform observation rows.
        let b = Dist::new(t.states(), vec![0.7, 0.3]).unwrap();
        let u = bayes_update(&t, &b, 1, 0).unwrap();
        assert!((u.posterior.prob(0) - 0.5).abs() < 1e-15);
        assert!((u.pred_prob - 0.5).abs() < 1e-15);
        t = t.with_reward_bound(1.0).unwrap();
        assert_eq!(t.r_max(), 1.0);
    }

    #[test]
    fn depth_zero_tree_is_the_root() {
        let t = tiger(0.9).unwrap();
        let tree = belief_mdp_to_horizon(&t, 0).unwrap();
        assert_eq!(tree.len(), 1);
        assert_eq!(tree.nodes[0].belief, vec![0.5, 0.5]);
    }

    #[test]
    fn tiger_listen_twice() {
        let t = tiger(0.9).unwrap();
        let tree = belief_mdp_to_horizon(&t, 2).unwrap();
        // Listen, hear left, listen, hear left: 0.85^2 / (0.85^2 + 0.15^2).
        let n1 = tree.children[0][0][0].0;
        let n2 = tree.children[n1][0][0].0;
        let want = 0.85 * 0.85 / (0.85 * 0.85 + 0.15 * 0.15);
        assert!((tree.nodes[n2].belief[0] - want).abs() < 1e-15);
        for n in 0..tree.len() {
            for branch in &tree.children[n] {
                let m: f64 = branch.iter().map(|x| x.1).sum();
                assert!((m - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let t = tiger(0.9).unwrap();
        assert!(matches!(
            belief_tree_with_budget(&t, 20, 1000),
            Err(Error::BudgetExceeded { limit: 1000, .. })
        ));
    }

    #[test]
    fn perfect_observation_tree_matches_mdp() {
        let mut r = rng(11);
        let mdp = random_mdp(&mut r, 2, 2, 0.1);
        let pi = random_policy(&mut r, mdp.states(), mdp.actions());
        let init = Dist::point(mdp.states(), 0);
        let p = Pomdp::perfect_observation(&mdp, init).unwrap();
        let tree = belief_mdp_to_horizon(&p, 9).unwrap();
        let v = tree.policy_value(&p, belief_linear(&pi)).unwrap();
        let exact = solve_linear(&mdp_transformer(&mdp, &pi).unwrap()).unwrap();
        assert!((v - exact.get(0)).abs() <= 1e-8);
    }
}
