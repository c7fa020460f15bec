//! State abstractions: MDP homomorphisms, value pullback, exact and
//! approximate value-preservation checks, and adapter-level mismatch.

use crate::affine::AffineOperator;
use crate::bellman::{mdp_transformer, operator_distance, optimality_backup, solve_linear, solve_optimal, Transformer};
use crate::circuit::{congruence_bound, CircuitExpr, CongruenceReport, HoleSpec, CERT_TOL};
use crate::component::{Mdp, Policy};
use crate::error::{Error, Result};
use crate::kernel::{tv_distance, Dist, Kernel};
use crate::linalg::{sup_dist, Matrix};
use crate::random::{random_values, rng};
use crate::space::FiniteSpace;
use crate::value::ValueFn;

/// Both mismatches at most this are treated as an exact homomorphism.
pub const EXACT_TOL: f64 = 1e-12;
const INTERTWINING_SAMPLES: usize = 100;
const INTERTWINING_SEED: u64 = 0xab57;

/// A surjection `phi: S -> S_hat`, optionally with an action relabeling `eta`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionMap {
    concrete: FiniteSpace,
    abstract_: FiniteSpace,
    phi: Vec<usize>,
    eta: Option<Vec<usize>>,
}

impl AbstractionMap {
    pub fn new(concrete: &FiniteSpace, abstract_: &FiniteSpace, phi: Vec<usize>) -> Result<Self> {
        if phi.len() != concrete.size() {
            return Err(Error::InvalidAbstraction(format!(
                "phi has {} entries for {} concrete states",
                phi.len(),
                concrete.size()
            )));
        }
        let mut hit = vec![false; abstract_.size()];
        for (s, &b) in phi.iter().enumerate() {
            if b >= abstract_.size() {
                return Err(Error::InvalidAbstraction(format!("phi({s}) = {b} is out of range")));
            }
            hit[b] = true;
        }
        if let Some(b) = hit.iter().position(|h| !h) {
            return Err(Error::InvalidAbstraction(format!(
                "phi is not surjective: abstract state {} has an empty fiber",
                abstract_.label(b)
            )));
        }
        Ok(Self {
            concrete: concrete.clone(),
            abstract_: abstract_.clone(),
            phi,
            eta: None,
        })
    }

    pub fn identity(space: &FiniteSpace) -> Self {
        Self::new(space, space, (0..space.size()).collect()).expect("identity is surjective")
    }

    /// Adds an action relabeling; it must be a bijection on `n_actions` actions.
    pub fn with_eta(mut self, eta: Vec<usize>, n_actions: usize) -> Result<Self> {
        let mut seen = vec![false; n_actions];
        if eta.len() != n_actions {
            return Err(Error::InvalidAbstraction(format!("eta has {} entries for {n_actions} actions", eta.len())));
        }
        for &a in &eta {
            if a >= n_actions || seen[a] {
                return Err(Error::InvalidAbstraction("eta is not a bijection on actions".into()));
            }
            seen[a] = true;
        }
        self.eta = Some(eta);
        Ok(self)
    }

    pub fn concrete(&self) -> &FiniteSpace {
        &self.concrete
    }
    pub fn abstract_space(&self) -> &FiniteSpace {
        &self.abstract_
    }
    pub fn phi(&self) -> &[usize] {
        &self.phi
    }
    pub fn eta(&self) -> Option<&[usize]> {
        self.eta.as_deref()
    }

    fn action(&self, a: usize) -> usize {
        self.eta.as_ref().map_or(a, |e| e[a])
    }

    pub fn fibers(&self) -> Vec<Vec<usize>> {
        let mut f = vec![Vec::new(); self.abstract_.size()];
        for (s, &b) in self.phi.iter().enumerate() {
            f[b].push(s);
        }
        f
    }

    /// The 0/1 matrix `Phi[s][b] = [phi(s) = b]`, so `phi^* V = Phi V`.
    pub fn indicator(&self) -> Matrix {
        let mut m = Matrix::zeros(self.concrete.size(), self.abstract_.size());
        for (s, &b) in self.phi.iter().enumerate() {
            m.set(s, b, 1.0);
        }
        m
    }

    /// `phi_# mu`: mass summed over fibers.
    pub fn pushforward(&self, mu: &Dist) -> Result<Dist> {
        self.concrete.ensure_eq(mu.space())?;
        Dist::new(&self.abstract_, self.push_probs(mu.probs()))
    }

    fn push_probs(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.abstract_.size()];
        for (s, &b) in self.phi.iter().enumerate() {
            out[b] += p[s];
        }
        out
    }

    /// `phi^* V_hat = V_hat . phi`.
    pub fn pullback_value(&self, vhat: &ValueFn) -> Result<ValueFn> {
        self.abstract_.ensure_eq(vhat.space())?;
        let values = self.phi.iter().map(|&b| vhat.get(b)).collect();
        Ok(ValueFn::from_parts(&self.concrete, values, vhat.radius()))
    }

    /// `pi(a|s) = pi_hat(eta(a) | phi(s))`.
    pub fn lift_policy(&self, pihat: &Policy, concrete_actions: &FiniteSpace) -> Result<Policy> {
        self.abstract_.ensure_eq(pihat.state_space())?;
        if concrete_actions.size() != pihat.action_space().size() {
            return Err(Error::InvalidAbstraction("action spaces differ in size".into()));
        }
        let rows = self
            .phi
            .iter()
            .map(|&b| (0..concrete_actions.size()).map(|a| pihat.prob(b, self.action(a))).collect())
            .collect();
        Policy::from_rows(&self.concrete, concrete_actions, rows)
    }

    fn check_models(&self, concrete: &Mdp, abs: &Mdp) -> Result<()> {
        self.concrete.ensure_eq(concrete.states())?;
        self.abstract_.ensure_eq(abs.states())?;
        match &self.eta {
            None => concrete.actions().ensure_eq(abs.actions())?,
            Some(e) if e.len() != concrete.actions().size() || abs.actions().size() != e.len() => {
                return Err(Error::InvalidAbstraction("eta does not match the action spaces".into()))
            }
            Some(_) => {}
        }
        if concrete.gamma() != abs.gamma() {
            return Err(Error::InvalidAbstraction(format!(
                "discounts differ: {} vs {}",
                concrete.gamma(),
                abs.gamma()
            )));
        }
        Ok(())
    }
}

/// `(eps_r, eps_P)`: worst reward gap and worst pushforward TV mismatch over all `(s, a)`.
pub fn measure_mismatch(concrete: &Mdp, abs: &Mdp, phi: &AbstractionMap) -> Result<(f64, f64)> {
    phi.check_models(concrete, abs)?;
    let mut eps_r = 0.0_f64;
    let mut eps_p = 0.0_f64;
    for s in 0..concrete.states().size() {
        let b = phi.phi[s];
        for a in 0..concrete.actions().size() {
            let ah = phi.action(a);
            eps_r = eps_r.max((concrete.r(s, a) - abs.r(b, ah)).abs());
            let pushed = phi.push_probs(concrete.transition_row(s, a));
            eps_p = eps_p.max(crate::kernel::l1_dist(&pushed, abs.transition_row(b, ah)));
        }
    }
    Ok((eps_r, eps_p))
}

/// `(eps_r + gamma V_max eps_P) / (1 - gamma)`.
pub fn approx_hom_bound(eps_r: f64, eps_p: f64, gamma: f64, v_max: f64) -> f64 {
    (eps_r + gamma * v_max * eps_p) / (1.0 - gamma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomReport {
    pub eps_r: f64,
    pub eps_p: f64,
    pub exact: bool,
    pub bound: f64,
    pub measured_gap: f64,
    /// Worst intertwining residual over sampled abstract values (exact checks only).
    pub intertwining_residual: Option<f64>,
    pub pass: bool,
}

fn common_v_max(concrete: &Mdp, abs: &Mdp) -> Result<f64> {
    if (concrete.r_max() - abs.r_max()).abs() > 1e-12 {
        return Err(Error::RewardBoundMismatch(concrete.r_max(), abs.r_max()));
    }
    Ok(concrete.v_max())
}

fn sample_abstract_values(phi: &AbstractionMap, radius: f64) -> Vec<ValueFn> {
    let mut r = rng(INTERTWINING_SEED);
    (0..INTERTWINING_SAMPLES)
        .map(|_| ValueFn::from_parts(&phi.abstract_, random_values(&mut r, phi.abstract_.size(), radius), None))
        .collect()
}

/// Exact homomorphism under a fixed abstract policy: intertwining on sampled
/// values and equality of the lifted-policy value with the pulled-back value.
pub fn verify_exact_hom(concrete: &Mdp, abs: &Mdp, phi: &AbstractionMap, pihat: &Policy) -> Result<HomReport> {
    let (eps_r, eps_p) = measure_mismatch(concrete, abs, phi)?;
    if eps_r > EXACT_TOL || eps_p > EXACT_TOL {
        return Err(Error::NotExact { eps_r, eps_p });
    }
    let v_max = common_v_max(concrete, abs)?;
    let pi = phi.lift_policy(pihat, concrete.actions())?;
    let t = mdp_transformer(concrete, &pi)?;
    let that = mdp_transformer(abs, pihat)?;
    let mut residual = 0.0_f64;
    for vh in sample_abstract_values(phi, v_max) {
        let lhs = t.apply_raw(phi.pullback_value(&vh)?.values());
        let rhs = phi.pullback_value(&ValueFn::from_parts(abs.states(), that.apply_raw(vh.values()), None))?;
        residual = residual.max(sup_dist(&lhs, rhs.values()));
    }
    let v = solve_linear(&t)?;
    let vh = phi.pullback_value(&solve_linear(&that)?)?;
    let gap = sup_dist(v.values(), vh.values());
    Ok(HomReport {
        eps_r,
        eps_p,
        exact: true,
        bound: approx_hom_bound(eps_r, eps_p, concrete.gamma(), v_max),
        measured_gap: gap,
        intertwining_residual: Some(residual),
        pass: residual <= 1e-10 && gap <= 1e-8,
    })
}

/// Optimality variant: `T*(phi^* V) = phi^*(T_hat* V)` and `V* = phi^* V_hat*`.
pub fn verify_exact_optimal(concrete: &Mdp, abs: &Mdp, phi: &AbstractionMap) -> Result<HomReport> {
    let (eps_r, eps_p) = measure_mismatch(concrete, abs, phi)?;
    if eps_r > EXACT_TOL || eps_p > EXACT_TOL {
        return Err(Error::NotExact { eps_r, eps_p });
    }
    let v_max = common_v_max(concrete, abs)?;
    let mut residual = 0.0_f64;
    for vh in sample_abstract_values(phi, v_max) {
        let (lhs, _) = optimality_backup(concrete, &phi.pullback_value(&vh)?)?;
        let (rhs, _) = optimality_backup(abs, &vh)?;
        residual = residual.max(sup_dist(lhs.values(), phi.pullback_value(&rhs)?.values()));
    }
    let v = solve_optimal(concrete, 1e-12)?.value;
    let vh = phi.pullback_value(&solve_optimal(abs, 1e-12)?.value)?;
    let gap = sup_dist(v.values(), vh.values());
    Ok(HomReport {
        eps_r,
        eps_p,
        exact: true,
        bound: 0.0,
        measured_gap: gap,
        intertwining_residual: Some(residual),
        pass: residual <= 1e-10 && gap <= 1e-8,
    })
}

/// Approximate homomorphism: measured `||V^pi - phi^* V_hat^pi_hat||` against
/// `(eps_r + gamma V_max eps_P) / (1 - gamma)`.
pub fn verify_approx_hom(concrete: &Mdp, abs: &Mdp, phi: &AbstractionMap, pihat: &Policy) -> Result<HomReport> {
    let (eps_r, eps_p) = measure_mismatch(concrete, abs, phi)?;
    let v_max = common_v_max(concrete, abs)?;
    let pi = phi.lift_policy(pihat, concrete.actions())?;
    let v = solve_linear(&mdp_transformer(concrete, &pi)?)?;
    let vh = phi.pullback_value(&solve_linear(&mdp_transformer(abs, pihat)?)?)?;
    let gap = sup_dist(v.values(), vh.values());
    let bound = approx_hom_bound(eps_r, eps_p, concrete.gamma(), v_max);
    Ok(HomReport {
        eps_r,
        eps_p,
        exact: eps_r <= EXACT_TOL && eps_p <= EXACT_TOL,
        bound,
        measured_gap: gap,
        intertwining_residual: None,
        pass: gap <= bound + CERT_TOL,
    })
}

/// Concrete adapter `V_hat |-> r + gamma P (phi^* V_hat)`, typed `B(S_hat) -> B(S)`.
pub fn concrete_adapter(t: &Transformer, phi: &AbstractionMap) -> Result<Transformer> {
    t.in_space().ensure_eq(&phi.concrete)?;
    t.out_space().ensure_eq(&phi.concrete)?;
    let p = t.trans().matrix().matmul(&phi.indicator())?;
    let trans = Kernel::from_matrix(&phi.concrete, &phi.abstract_, p)?;
    Transformer::new(t.reward().clone(), t.gamma(), trans)?.with_balls(t.ball_in(), t.ball_out())
}

/// Abstract adapter `V_hat |-> phi^*(T_hat V_hat)`, typed `B(S_hat) -> B(S)`.
pub fn abstract_adapter(that: &Transformer, phi: &AbstractionMap) -> Result<Transformer> {
    that.in_space().ensure_eq(&phi.abstract_)?;
    that.out_space().ensure_eq(&phi.abstract_)?;
    let reward = phi.pullback_value(that.reward())?;
    let rows = phi.phi.iter().map(|&b| that.trans().row(b).to_vec()).collect();
    let trans = Kernel::new(&phi.concrete, &phi.abstract_, rows)?;
    Transformer::new(ValueFn::from_parts(&phi.concrete, reward.into_values(), None), that.gamma(), trans)?
        .with_balls(that.ball_in(), that.ball_out())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterDefect {
    /// Exact `sup_{||V_hat|| <= radius} ||T(phi^* V_hat) - phi^*(T_hat V_hat)||`.
    pub defect: f64,
    /// Transformer-level reward and transition mismatch.
    pub eps_r: f64,
    pub eps_p: f64,
    /// `eps_r + gamma radius eps_P`.
    pub bound: f64,
    pub pass: bool,
}

/// Exact intertwining defect on the ball of the given radius.
pub fn adapter_defect(t: &Transformer, that: &Transformer, phi: &AbstractionMap, radius: f64) -> Result<AdapterDefect> {
    if t.gamma() != that.gamma() {
        return Err(Error::InvalidAbstraction("adapters need a common discount".into()));
    }
    let a = concrete_adapter(t, phi)?;
    let ah = abstract_adapter(that, phi)?;
    let defect = operator_distance(&a, &ah, radius)?;
    let mut eps_r = 0.0_f64;
    let mut eps_p = 0.0_f64;
    for s in 0..phi.concrete.size() {
        let b = phi.phi[s];
        eps_r = eps_r.max((t.reward().get(s) - that.reward().get(b)).abs());
        let pushed = phi.pushforward(&t.trans().row_dist(s))?;
        eps_p = eps_p.max(tv_distance(&pushed, &that.trans().row_dist(b))?);
    }
    let bound = eps_r + t.gamma() * radius * eps_p;
    Ok(AdapterDefect {
        defect,
        eps_r,
        eps_p,
        bound,
        pass: defect <= bound + CERT_TOL,
    })
}

/// The adapter hole `B_{V_max}(S_hat) -> B_{V_max}(S)`.
pub fn adapter_hole(phi: &AbstractionMap, gamma: f64, v_max: f64) -> HoleSpec {
    HoleSpec {
        in_space: phi.concrete.clone(),
        out_space: phi.abstract_.clone(),
        ball_in: v_max,
        ball_out: v_max,
        gamma,
    }
}

/// Fiber averaging `B(S) -> B(S_hat)`, a right inverse of the pullback.
pub fn fiber_average(phi: &AbstractionMap, ball: f64) -> AffineOperator {
    let mut lin = Matrix::zeros(phi.abstract_.size(), phi.concrete.size());
    for (b, fiber) in phi.fibers().iter().enumerate() {
        for &s in fiber {
            lin.set(b, s, 1.0 / fiber.len() as f64);
        }
    }
    AffineOperator::linear(&phi.abstract_, &phi.concrete, lin, ball).expect("shapes agree")
}

/// Closes the adapter hole directly: `V |-> A(avg V)`. Plugging the abstract
/// adapter yields `phi^* V_hat` as fixed point.
pub fn direct_closure_context(phi: &AbstractionMap, gamma: f64, v_max: f64) -> CircuitExpr {
    CircuitExpr::series(
        CircuitExpr::hole(adapter_hole(phi, gamma, v_max)),
        CircuitExpr::leaf(fiber_average(phi, v_max)),
    )
}

/// Plugs both adapters into `context` and audits the congruence bound.
pub fn abstraction_in_context(
    context: &CircuitExpr,
    t: &Transformer,
    that: &Transformer,
    phi: &AbstractionMap,
) -> Result<CongruenceReport> {
    let a = concrete_adapter(t, phi)?.to_affine();
    let ah = abstract_adapter(that, phi)?.to_affine();
    congruence_bound(context, &a, &ah)
}

/// Treats `(phi, eta)` as a self-homomorphism of `mdp` and audits it with the
/// uniform policy.
pub fn verify_symmetry(mdp: &Mdp, phi: Vec<usize>, eta: Vec<usize>) -> Result<HomReport> {
    let map = AbstractionMap::new(mdp.states(), mdp.states(), phi)?.with_eta(eta, mdp.actions().size())?;
    let uniform = Policy::uniform(mdp.states(), mdp.actions());
    verify_approx_hom(mdp, mdp, &map, &uniform)
}

/// Random exactly lumpable pair: an abstract MDP with rewards in `[-0.9, 0.9]`
/// and a concrete MDP whose blocks have between 1 and `max_fiber` states,
/// with each abstract row split at random over the target block. Both
/// declare `R_max = 1`.
pub fn random_lumpable<R: rand::Rng + ?Sized>(
    rng: &mut R,
    n_abstract: usize,
    max_fiber: usize,
    n_actions: usize,
    gamma: f64,
) -> Result<(Mdp, Mdp, AbstractionMap)> {
    use crate::random::{random_kernel, random_probs};
    let sh = FiniteSpace::indexed("B", "b", n_abstract)?;
    let a = FiniteSpace::indexed("A", "a", n_actions)?;
    let abs_trans = random_kernel(rng, &FiniteSpace::product(&sh, &a), &sh, true);
    let abs_reward = random_values(rng, n_abstract * n_actions, 0.9);
    let abs = Mdp::new(&sh, &a, abs_trans, abs_reward, gamma)?.with_reward_bound(1.0)?;
    let sizes: Vec<usize> = (0..n_abstract).map(|_| rng.gen_range(1..=max_fiber.max(1))).collect();
    let phi: Vec<usize> = sizes.iter().enumerate().flat_map(|(b, &k)| std::iter::repeat_n(b, k)).collect();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &k| { let o = *acc; *acc += k; Some(o) }).collect();
    let n = phi.len();
    let s = FiniteSpace::indexed("S", "s", n)?;
    let mut rows = Vec::with_capacity(n * n_actions);
    let mut reward = Vec::with_capacity(n * n_actions);
    for &b in &phi {
        for act in 0..n_actions {
            let mut row = vec![0.0; n];
            for (b2, &p) in abs.transition_row(b, act).iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (k, w) in random_probs(rng, sizes[b2], true).into_iter().enumerate() {
                    row[offsets[b2] + k] = p * w;
                }
            }
            rows.push(row);
            reward.push(abs.r(b, act));
        }
    }
    let concrete = Mdp::from_tables(&s, &a, rows, reward, gamma)?.with_reward_bound(1.0)?;
    let map = AbstractionMap::new(&s, &sh, phi)?;
    Ok((concrete, abs, map))
}

/// Perturbs a concrete MDP: rewards move by at most `eps_r` (clipped to
/// `[-1, 1]`) and every row is mixed toward a random row at rate `mix`.
pub fn perturb_mdp<R: rand::Rng + ?Sized>(rng: &mut R, mdp: &Mdp, eps_r: f64, mix: f64) -> Result<Mdp> {
    use crate::random::random_kernel;
    let reward = mdp
        .reward()
        .iter()
        .map(|r| (r + rng.gen_range(-eps_r..=eps_r)).clamp(-1.0, 1.0))
        .collect();
    let fresh = random_kernel(rng, mdp.trans().from_space(), mdp.states(), true);
    let trans = mdp.trans().mix(1.0 - mix, &fresh)?;
    Mdp::new(mdp.states(), mdp.actions(), trans, reward, mdp.gamma())?.with_reward_bound(mdp.r_max())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Four states lumped into two blocks with block-constant dynamics.
    fn lumpable() -> (Mdp, Mdp, AbstractionMap) {
        let s = FiniteSpace::indexed("S", "s", 4).unwrap();
        let a = FiniteSpace::indexed("A", "a", 2).unwrap();
        let trans = vec![
            vec![0.1, 0.2, 0.3, 0.4],
            vec![0.5, 0.25, 0.25, 0.0],
            vec![0.3, 0.0, 0.3, 0.4],
            vec![0.0, 0.75, 0.0, 0.25],
            vec![0.0, 0.7, 0.1, 0.2],
            vec![0.4, 0.35, 0.25, 0.0],
            vec![0.5, 0.2, 0.2, 0.1],
            vec![0.25, 0.5, 0.25, 0.0],
        ];
        let reward = vec![1.0, 0.0, 1.0, 0.0, -0.5, 0.5, -0.5, 0.5];
        let concrete = Mdp::from_tables(&s, &a, trans, reward, 0.9).unwrap();
        let sh = FiniteSpace::indexed("B", "b", 2).unwrap();
        let abs = Mdp::from_tables(
            &sh,
            &a,
            vec![vec![0.3, 0.7], vec![0.75, 0.25], vec![0.7, 0.3], vec![0.75, 0.25]],
            vec![1.0, 0.0, -0.5, 0.5],
            0.9,
        )
        .unwrap();
        let phi = AbstractionMap::new(&s, &sh, vec![0, 0, 1, 1]).unwrap();
        (concrete, abs, phi)
    }

    #[test]
    fn non_surjective_maps_are_rejected() {
        let s = FiniteSpace::indexed("S", "s", 3).unwrap();
        let sh = FiniteSpace::indexed("B", "b", 2).unwrap();
        assert!(AbstractionMap::new(&s, &sh, vec![0, 0, 0]).is_err());
    }

    #[test]
    fn lumpable_chain_is_exact() {
        let (c, a, phi) = lumpable();
        let (er, ep) = measure_mismatch(&c, &a, &phi).unwrap();
        assert!(er <= 1e-15 && ep <= 1e-15);
        let pihat = Policy::from_rows(a.states(), a.actions(), vec![vec![0.3, 0.7], vec![1.0, 0.0]]).unwrap();
        let rep = verify_exact_hom(&c, &a, &phi, &pihat).unwrap();
        assert!(rep.pass, "{rep:?}");
        let opt = verify_exact_optimal(&c, &a, &phi).unwrap();
        assert!(opt.pass, "{opt:?}");
    }

    #[test]
    fn reward_shift_bound() {
        let (c, a, phi) = lumpable();
        let shifted = Mdp::from_tables(
            a.states(),
            a.actions(),
            (0..4).map(|i| a.trans().row(i).to_vec()).collect(),
            a.reward().iter().map(|r| r - 0.05).collect(),
            0.9,
        )
        .unwrap()
        .with_reward_bound(1.0)
        .unwrap();
        let c = c.with_reward_bound(1.0).unwrap();
        let (er, ep) = measure_mismatch(&c, &shifted, &phi).unwrap();
        assert!((er - 0.05).abs() < 1e-12 && ep <= 1e-15);
        let pihat = Policy::uniform(a.states(), a.actions());
        let rep = verify_approx_hom(&c, &shifted, &phi, &pihat).unwrap();
        assert!((rep.bound - 0.5).abs() < 1e-12);
        assert!(rep.pass);
        assert!(matches!(verify_exact_hom(&c, &shifted, &phi, &pihat), Err(Error::NotExact { .. })));
    }

    #[test]
    fn reward_bounds_must_agree() {
        let (c, a, phi) = lumpable();
        let c = c.with_reward_bound(2.0).unwrap();
        let pihat = Policy::uniform(a.states(), a.actions());
        assert!(matches!(verify_approx_hom(&c, &a, &phi, &pihat), Err(Error::RewardBoundMismatch(..))));
    }

    #[test]
    fn mirror_symmetry_is_exact() {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        let a = FiniteSpace::new("A", ["left", "right"]).unwrap();
        // Action "left" in s0 mirrors "right" in s1.
        let mdp = Mdp::from_tables(
            &s,
            &a,
            vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.7, 0.3], vec![0.2, 0.8]],
            vec![1.0, 0.0, 0.0, 1.0],
            0.8,
        )
        .unwrap();
        let rep = verify_symmetry(&mdp, vec![1, 0], vec![1, 0]).unwrap();
        assert!(rep.exact && rep.pass, "{rep:?}");
    }

    #[test]
    fn exact_adapters_coincide() {
        let (c, a, phi) = lumpable();
        let pihat = Policy::uniform(a.states(), a.actions());
        let t = mdp_transformer(&c, &phi.lift_policy(&pihat, c.actions()).unwrap()).unwrap();
        let th = mdp_transformer(&a, &pihat).unwrap();
        let d = adapter_defect(&t, &th, &phi, c.v_max()).unwrap();
        assert!(d.defect < 1e-12, "{d:?}");
        let ctx = direct_closure_context(&phi, c.gamma(), c.v_max());
        let rep = abstraction_in_context(&ctx, &t, &th, &phi).unwrap();
        assert!(rep.measured < 1e-10, "{rep:?}");
    }
}
