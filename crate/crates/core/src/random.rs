//! Seeded generators for random test instances and audits.
//!
//! Every generator takes an explicit RNG so audit runs are reproducible
//! from a recorded seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::component::{Mdp, Oddc, Policy};
use crate::kernel::{Dist, Kernel};
use crate::linalg::Matrix;
use crate::space::FiniteSpace;

pub type AuditRng = ChaCha8Rng;

pub fn rng(seed: u64) -> AuditRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> AuditRng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// A random probability vector; roughly a third of the entries are zero
/// when `sparse` is set (at least one entry stays positive).
pub fn random_probs<R: Rng + ?Sized>(rng: &mut R, n: usize, sparse: bool) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.gen_bool(0.35) {
                0.0
            } else {
                -(1.0 - rng.gen::<f64>()).ln()
            }
        })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        let i = rng.gen_range(0..n);
        w[i] = 1.0;
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

pub fn random_dist<R: Rng + ?Sized>(rng: &mut R, space: &FiniteSpace) -> Dist {
    Dist::new(space, random_probs(rng, space.size(), false)).expect("normalized")
}

pub fn random_kernel<R: Rng + ?Sized>(rng: &mut R, from: &FiniteSpace, to: &FiniteSpace, sparse: bool) -> Kernel {
    let mut m = Matrix::zeros(from.size(), to.size());
    for i in 0..from.size() {
        m.row_mut(i).copy_from_slice(&random_probs(rng, to.size(), sparse));
    }
    Kernel::from_matrix(from, to, m).expect("normalized rows")
}

pub fn random_values<R: Rng + ?Sized>(rng: &mut R, n: usize, radius: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-radius..=radius)).collect()
}

pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, states: &FiniteSpace, actions: &FiniteSpace) -> Policy {
    Policy::new(random_kernel(rng, states, actions, true))
}

/// Random MDP with rewards in `[-1, 1]` and declared `R_max = 1`.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, n_states: usize, n_actions: usize, gamma: f64) -> Mdp {
    let s = FiniteSpace::indexed("S", "s", n_states).expect("n_states >= 1");
    let a = FiniteSpace::indexed("A", "a", n_actions).expect("n_actions >= 1");
    let sa = FiniteSpace::product(&s, &a);
    let trans = random_kernel(rng, &sa, &s, true);
    let reward = random_values(rng, n_states * n_actions, 1.0);
    Mdp::new(&s, &a, trans, reward, gamma)
        .and_then(|m| m.with_reward_bound(1.0))
        .expect("valid random MDP")
}

/// Random component with its own reward-signal space of `n_rewards` levels in `[-1, 1]`.
pub fn random_oddc<R: Rng + ?Sized>(
    rng: &mut R,
    n_states: usize,
    n_actions: usize,
    n_rewards: usize,
    gamma: f64,
) -> Oddc {
    let s = FiniteSpace::indexed("S", "s", n_states).expect("n_states >= 1");
    let a = FiniteSpace::indexed("A", "a", n_actions).expect("n_actions >= 1");
    let r = FiniteSpace::indexed("R", "r", n_rewards).expect("n_rewards >= 1");
    let k = random_kernel(rng, &FiniteSpace::product(&s, &a), &FiniteSpace::product(&s, &r), true);
    let rho = random_values(rng, n_rewards, 1.0);
    Oddc::new(&s, &a, &s, &r, k, rho, gamma)
        .and_then(|m| m.with_reward_bound(1.0))
        .expect("valid random component")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_instance() {
        let a = random_mdp(&mut rng(7), 5, 3, 0.9);
        let b = random_mdp(&mut rng(7), 5, 3, 0.9);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_differ() {
        let x: u64 = stream_rng(1, 0).gen();
        let y: u64 = stream_rng(1, 1).gen();
        assert_ne!(x, y);
    }
}
