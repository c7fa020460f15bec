//! Open discounted decision components, policies, and closed loops.

use crate::error::{Error, Result};
use crate::kernel::{compose_kernels, pair_with_policy, tensor_kernels, Kernel};
use crate::linalg::Matrix;
use crate::space::FiniteSpace;
use crate::value::ValueFn;

pub(crate) fn check_discount(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidComponent(format!("discount {gamma} not in (0, 1)")))
    }
}

/// A stochastic policy `state -> Delta(actions)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    kernel: Kernel,
}

impl Policy {
    pub fn new(kernel: Kernel) -> Self {
        Self { kernel }
    }

    pub fn from_rows(states: &FiniteSpace, actions: &FiniteSpace, rows: Vec<Vec<f64>>) -> Result<Self> {
        Ok(Self::new(Kernel::new(states, actions, rows)?))
    }

    pub fn deterministic(states: &FiniteSpace, actions: &FiniteSpace, choice: &[usize]) -> Result<Self> {
        Ok(Self::new(Kernel::deterministic(states, actions, choice)?))
    }

    pub fn uniform(states: &FiniteSpace, actions: &FiniteSpace) -> Self {
        let row = vec![1.0 / actions.size() as f64; actions.size()];
        let rows = vec![row; states.size()];
        Self::new(Kernel::new(states, actions, rows).expect("uniform rows are stochastic"))
    }

    pub fn state_space(&self) -> &FiniteSpace {
        self.kernel.from_space()
    }

    pub fn action_space(&self) -> &FiniteSpace {
        self.kernel.to_space()
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.kernel.prob(state, action)
    }

    /// `lambda * self + (1 - lambda) * other`.
    pub fn mix(&self, lambda: f64, other: &Policy) -> Result<Policy> {
        Ok(Self::new(self.kernel.mix(lambda, &other.kernel)?))
    }

    /// Product policy on `S1 x S2 -> A1 x A2`.
    pub fn tensor(p1: &Policy, p2: &Policy) -> Policy {
        Self::new(tensor_kernels(&p1.kernel, &p2.kernel))
    }
}

/// Open discounted decision component: a one-step kernel
/// `S_in x A -> S_out x R` with reward scalarization `rho: R -> f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Oddc {
    s_in: FiniteSpace,
    actions: FiniteSpace,
    s_out: FiniteSpace,
    reward_space: FiniteSpace,
    kernel: Kernel,
    rho: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

impl Oddc {
    /// Builds a component; the reward bound defaults to `max |rho|`.
    pub fn new(
        s_in: &FiniteSpace,
        actions: &FiniteSpace,
        s_out: &FiniteSpace,
        reward_space: &FiniteSpace,
        kernel: Kernel,
        rho: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        check_discount(gamma)?;
        let from = FiniteSpace::product(s_in, actions);
        let to = FiniteSpace::product(s_out, reward_space);
        kernel.from_space().ensure_eq(&from)?;
        kernel.to_space().ensure_eq(&to)?;
        if rho.len() != reward_space.size() {
            return Err(Error::InvalidComponent(format!(
                "rho has {} entries for reward space {reward_space}",
                rho.len()
            )));
        }
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidComponent("rho has non-finite entries".into()));
        }
        let r_max = rho.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self {
            s_in: s_in.clone(),
            actions: actions.clone(),
            s_out: s_out.clone(),
            reward_space: reward_space.clone(),
            kernel,
            rho,
            gamma,
            r_max,
        })
    }

    /// Declares a (possibly shared) reward bound; it must dominate `max |rho|`.
    pub fn with_reward_bound(mut self, r_max: f64) -> Result<Self> {
        let own = self.rho.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if !(r_max >= own) {
            return Err(Error::InvalidComponent(format!(
                "declared reward bound {r_max} is below max |rho| = {own}"
            )));
        }
        self.r_max = r_max;
        Ok(self)
    }

    pub fn s_in(&self) -> &FiniteSpace {
        &self.s_in
    }
    pub fn actions(&self) -> &FiniteSpace {
        &self.actions
    }
    pub fn s_out(&self) -> &FiniteSpace {
        &self.s_out
    }
    pub fn reward_space(&self) -> &FiniteSpace {
        &self.reward_space
    }
    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn r_max(&self) -> f64 {
        self.r_max
    }
    /// `R_max / (1 - gamma)`.
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    fn check_policy(&self, pi: &Policy) -> Result<()> {
        pi.state_space().ensure_eq(&self.s_in)?;
        pi.action_space().ensure_eq(&self.actions)
    }

    /// Scalarized expected reward of each `(s, a)` row, indexed `s * |A| + a`.
    pub fn state_action_reward(&self) -> Vec<f64> {
        let nr = self.reward_space.size();
        let m = self.kernel.matrix();
        (0..m.rows())
            .map(|row| {
                m.row(row)
                    .chunks(nr)
                    .map(|chunk| chunk.iter().zip(&self.rho).map(|(p, r)| p * r).sum::<f64>())
                    .sum()
            })
            .collect()
    }

    /// State marginal `P(s' | s, a)` of the joint kernel.
    pub fn state_action_transition(&self) -> Kernel {
        marginal_state(&self.kernel, &self.s_out, &self.reward_space)
    }

    /// Parallel composition with independent dynamics and additive scalarization.
    pub fn parallel(m1: &Oddc, m2: &Oddc) -> Result<Oddc> {
        if m1.gamma != m2.gamma {
            return Err(Error::InvalidComponent(format!(
                "parallel components need a common discount ({} vs {})",
                m1.gamma, m2.gamma
            )));
        }
        let s_in = FiniteSpace::product(&m1.s_in, &m2.s_in);
        let actions = FiniteSpace::product(&m1.actions, &m2.actions);
        let s_out = FiniteSpace::product(&m1.s_out, &m2.s_out);
        let rewards = FiniteSpace::product(&m1.reward_space, &m2.reward_space);
        let (na1, na2) = (m1.actions.size(), m2.actions.size());
        let (no1, no2) = (m1.s_out.size(), m2.s_out.size());
        let (nr1, nr2) = (m1.reward_space.size(), m2.reward_space.size());
        let from = FiniteSpace::product(&s_in, &actions);
        let to = FiniteSpace::product(&s_out, &rewards);
        let mut rows = Matrix::zeros(from.size(), to.size());
        for s1 in 0..m1.s_in.size() {
            for s2 in 0..m2.s_in.size() {
                for a1 in 0..na1 {
                    for a2 in 0..na2 {
                        let row = ((s1 * m2.s_in.size() + s2) * na1 + a1) * na2 + a2;
                        let k1 = m1.kernel.row(s1 * na1 + a1);
                        let k2 = m2.kernel.row(s2 * na2 + a2);
                        let out = rows.row_mut(row);
                        for t1 in 0..no1 {
                            for r1 in 0..nr1 {
                                let p1 = k1[t1 * nr1 + r1];
                                if p1 == 0.0 {
                                    continue;
                                }
                                for t2 in 0..no2 {
                                    for r2 in 0..nr2 {
                                        let col = ((t1 * no2 + t2) * nr1 + r1) * nr2 + r2;
                                        out[col] = p1 * k2[t2 * nr2 + r2];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let kernel = Kernel::from_matrix(&from, &to, rows)?;
        let mut rho = Vec::with_capacity(rewards.size());
        for r1 in &m1.rho {
            for r2 in &m2.rho {
                rho.push(r1 + r2);
            }
        }
        Oddc::new(&s_in, &actions, &s_out, &rewards, kernel, rho, m1.gamma)?
            .with_reward_bound(m1.r_max + m2.r_max)
    }
}

/// Marginalizes a kernel into `S' x R` onto its `S'` coordinate.
pub(crate) fn marginal_state(k: &Kernel, s_out: &FiniteSpace, rewards: &FiniteSpace) -> Kernel {
    let nr = rewards.size();
    let mut rows = Matrix::zeros(k.from_space().size(), s_out.size());
    for i in 0..k.from_space().size() {
        for (j, chunk) in k.row(i).chunks(nr).enumerate() {
            rows.set(i, j, chunk.iter().sum());
        }
    }
    Kernel::from_matrix(k.from_space(), s_out, rows).expect("marginal of a stochastic kernel")
}

/// `K^pi = K . <id, pi>`: the closed-loop kernel `S_in -> S_out x R`.
pub fn close_loop(m: &Oddc, pi: &Policy) -> Result<Kernel> {
    m.check_policy(pi)?;
    compose_kernels(&pair_with_policy(pi.kernel()), &m.kernel)
}

/// `r^pi(s) = sum_{s', r} K^pi(s', r | s) rho(r)`.
pub fn expected_reward(m: &Oddc, pi: &Policy) -> Result<ValueFn> {
    let k = close_loop(m, pi)?;
    let nr = m.reward_space.size();
    let values = (0..m.s_in.size())
        .map(|s| {
            k.row(s)
                .chunks(nr)
                .map(|c| c.iter().zip(&m.rho).map(|(p, r)| p * r).sum::<f64>())
                .sum()
        })
        .collect();
    ValueFn::new(&m.s_in, values)
}

/// A finite MDP with deterministic scalar rewards `r(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mdp {
    states: FiniteSpace,
    actions: FiniteSpace,
    trans: Kernel,
    reward: Vec<f64>,
    gamma: f64,
    r_max: f64,
}

impl Mdp {
    /// `trans` maps `S x A -> S`; `reward` is indexed `s * |A| + a`.
    pub fn new(
        states: &FiniteSpace,
        actions: &FiniteSpace,
        trans: Kernel,
        reward: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        check_discount(gamma)?;
        trans
            .from_space()
            .ensure_eq(&FiniteSpace::product(states, actions))?;
        trans.to_space().ensure_eq(states)?;
        if reward.len() != states.size() * actions.size() {
            return Err(Error::InvalidComponent(format!(
                "reward table has {} entries, expected {}",
                reward.len(),
                states.size() * actions.size()
            )));
        }
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidComponent("reward has non-finite entries".into()));
        }
        let r_max = reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Self {
            states: states.clone(),
            actions: actions.clone(),
            trans,
            reward,
            gamma,
            r_max,
        })
    }

    /// Convenience constructor from per-`(s, a)` transition rows.
    pub fn from_tables(
        states: &FiniteSpace,
        actions: &FiniteSpace,
        trans_rows: Vec<Vec<f64>>,
        reward: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let sa = FiniteSpace::product(states, actions);
        Self::new(states, actions, Kernel::new(&sa, states, trans_rows)?, reward, gamma)
    }

    pub fn with_reward_bound(mut self, r_max: f64) -> Result<Self> {
        let own = self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        if !(r_max >= own) {
            return Err(Error::InvalidComponent(format!(
                "declared reward bound {r_max} is below max |r| = {own}"
            )));
        }
        self.r_max = r_max;
        Ok(self)
    }

    pub fn states(&self) -> &FiniteSpace {
        &self.states
    }
    pub fn actions(&self) -> &FiniteSpace {
        &self.actions
    }
    pub fn trans(&self) -> &Kernel {
        &self.trans
    }
    pub fn reward(&self) -> &[f64] {
        &self.reward
    }
    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.actions.size() + a]
    }
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        self.trans.row(s * self.actions.size() + a)
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

    fn check_policy(&self, pi: &Policy) -> Result<()> {
        pi.state_space().ensure_eq(&self.states)?;
        pi.action_space().ensure_eq(&self.actions)
    }

    /// `r^pi(s) = sum_a pi(a|s) r(s, a)`.
    pub fn policy_reward(&self, pi: &Policy) -> Result<Vec<f64>> {
        self.check_policy(pi)?;
        let na = self.actions.size();
        Ok((0..self.states.size())
            .map(|s| (0..na).map(|a| pi.prob(s, a) * self.r(s, a)).sum())
            .collect())
    }

    /// `P^pi(s'|s) = sum_a pi(a|s) P(s'|s, a)`.
    pub fn policy_kernel(&self, pi: &Policy) -> Result<Kernel> {
        self.check_policy(pi)?;
        compose_kernels(&pair_with_policy(pi.kernel()), &self.trans)
    }

    /// Re-expresses the MDP as a component whose reward signal space holds
    /// the distinct reward values (in first-seen order).
    pub fn to_oddc(&self) -> Result<Oddc> {
        let mut levels: Vec<f64> = Vec::new();
        let mut level_of = Vec::with_capacity(self.reward.len());
        for &r in &self.reward {
            let idx = match levels.iter().position(|&l| l == r) {
                Some(i) => i,
                None => {
                    levels.push(r);
                    levels.len() - 1
                }
            };
            level_of.push(idx);
        }
        let rewards = FiniteSpace::indexed("R", "r", levels.len())?;
        let from = FiniteSpace::product(&self.states, &self.actions);
        let to = FiniteSpace::product(&self.states, &rewards);
        let nl = levels.len();
        let mut rows = Matrix::zeros(from.size(), to.size());
        for (row, &lvl) in level_of.iter().enumerate() {
            for (s2, &p) in self.trans.row(row).iter().enumerate() {
                rows.set(row, s2 * nl + lvl, p);
            }
        }
        let kernel = Kernel::from_matrix(&from, &to, rows)?;
        Oddc::new(&self.states, &self.actions, &self.states, &rewards, kernel, levels, self.gamma)?
            .with_reward_bound(self.r_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Dist;

    fn spaces() -> (FiniteSpace, FiniteSpace, FiniteSpace) {
        (
            FiniteSpace::indexed("S", "s", 2).unwrap(),
            FiniteSpace::new("A", ["a0", "a1"]).unwrap(),
            FiniteSpace::new("R", ["lo", "hi"]).unwrap(),
        )
    }

    fn sample_oddc(rho: Vec<f64>) -> Oddc {
        let (s, a, r) = spaces();
        let rows = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.5, 0.0, 0.0, 0.5],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.25, 0.25, 0.25, 0.25],
        ];
        let k = Kernel::new(&FiniteSpace::product(&s, &a), &FiniteSpace::product(&s, &r), rows).unwrap();
        Oddc::new(&s, &a, &s, &r, k, rho, 0.9).unwrap()
    }

    #[test]
    fn rejects_bad_discount_and_rho() {
        let (s, a, r) = spaces();
        let k = sample_oddc(vec![0.0, 1.0]).kernel().clone();
        assert!(Oddc::new(&s, &a, &s, &r, k.clone(), vec![0.0, 1.0], 1.0).is_err());
        assert!(Oddc::new(&s, &a, &s, &r, k, vec![0.0], 0.5).is_err());
        assert!(sample_oddc(vec![0.0, 2.0]).with_reward_bound(1.0).is_err());
    }

    #[test]
    fn uniform_policy_averages_action_slices() {
        let m = sample_oddc(vec![0.0, 1.0]);
        let pi = Policy::uniform(m.s_in(), m.actions());
        let k = close_loop(&m, &pi).unwrap();
        for s in 0..2 {
            for j in 0..4 {
                let avg = 0.5 * (m.kernel().prob(s * 2, j) + m.kernel().prob(s * 2 + 1, j));
                assert!((k.prob(s, j) - avg).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_action_fixes_the_slice() {
        let m = sample_oddc(vec![0.0, 1.0]);
        let pi = Policy::deterministic(m.s_in(), m.actions(), &[1, 1]).unwrap();
        let k = close_loop(&m, &pi).unwrap();
        assert_eq!(k.row(0), m.kernel().row(1));
        assert_eq!(k.row(1), m.kernel().row(3));
    }

    #[test]
    fn constant_rho_gives_constant_reward() {
        let m = sample_oddc(vec![0.7, 0.7]);
        let pi = Policy::uniform(m.s_in(), m.actions());
        let r = expected_reward(&m, &pi).unwrap();
        assert!(r.values().iter().all(|v| (v - 0.7).abs() < 1e-15));
        let zero = expected_reward(&sample_oddc(vec![0.0, 0.0]), &pi).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn policy_space_is_checked() {
        let m = sample_oddc(vec![0.0, 1.0]);
        let other = FiniteSpace::indexed("T", "t", 2).unwrap();
        let pi = Policy::uniform(&other, m.actions());
        assert!(matches!(close_loop(&m, &pi), Err(Error::SpaceMismatch { .. })));
    }

    #[test]
    fn mdp_round_trips_through_oddc() {
        let (s, a, _) = spaces();
        let mdp = Mdp::from_tables(
            &s,
            &a,
            vec![vec![0.2, 0.8], vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]],
            vec![1.0, -1.0, 0.5, 1.0],
            0.8,
        )
        .unwrap();
        let m = mdp.to_oddc().unwrap();
        assert_eq!(m.reward_space().size(), 3);
        let pi = Policy::from_rows(&s, &a, vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let r1 = expected_reward(&m, &pi).unwrap();
        let r2 = mdp.policy_reward(&pi).unwrap();
        for (x, y) in r1.values().iter().zip(&r2) {
            assert!((x - y).abs() < 1e-15);
        }
        let p1 = marginal_state(&close_loop(&m, &pi).unwrap(), &s, m.reward_space());
        assert!(p1.max_abs_diff(&mdp.policy_kernel(&pi).unwrap()) < 1e-15);
        let d = Dist::uniform(&s);
        assert_eq!(d.probs().len(), 2);
    }
}
