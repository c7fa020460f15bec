use bellwire::bellman::{mdp_transformer, solve_linear};
use bellwire::component::{Mdp, Policy};
use bellwire::error::Error;
use bellwire::extensions::ope::{
    change_of_measure, enumerate_prefixes, factorized_weights, random_series_interface, series_chain_rule,
};
use bellwire::extensions::pomdp::{belief_linear, random_pomdp, tiger};
use bellwire::extensions::tracking::drifting_sequence;
use bellwire::extensions::{
    bayes_update, belief_mdp_to_horizon, importance_weights, track_fixed_points, verify_belief_equivalence,
    ModuleSpec, Pomdp, Step, TrackingMode, TrajectoryPrefix,
};
use bellwire::kernel::Dist;
use bellwire::linalg::sup_dist;
use bellwire::random::{random_dist, random_mdp, random_policy, rng};
use proptest::prelude::*;

/// Joint table `P(s, s', o | b, a)` marginalized onto `s'` given `o`.
fn posterior_oracle(p: &Pomdp, b: &[f64], a: usize, o: usize) -> (Vec<f64>, f64) {
    let (ns, na) = (p.states().size(), p.actions().size());
    let mut joint = vec![vec![0.0; ns]; ns];
    for s in 0..ns {
        for s2 in 0..ns {
            joint[s][s2] = b[s] * p.trans().prob(s * na + a, s2) * p.obs().prob(s2 * na + a, o);
        }
    }
    let marg: Vec<f64> = (0..ns).map(|s2| (0..ns).map(|s| joint[s][s2]).sum()).collect();
    let z: f64 = marg.iter().sum();
    (marg.iter().map(|m| m / z).collect(), z)
}

/// Optimal `H`-step value by recursion over action-observation histories on
/// unnormalized state weights, without any belief normalization.
fn history_optimal(p: &Pomdp, alpha: &[f64], depth: usize) -> f64 {
    if depth == 0 {
        return 0.0;
    }
    let (ns, na, no) = (p.states().size(), p.actions().size(), p.observations().size());
    (0..na)
        .map(|a| {
            let reward: f64 = (0..ns).map(|s| alpha[s] * p.r(s, a)).sum();
            let cont: f64 = (0..no)
                .map(|o| {
                    let next: Vec<f64> = (0..ns)
                        .map(|s2| (0..ns).map(|s| alpha[s] * p.trans().prob(s * na + a, s2)).sum::<f64>() * p.obs().prob(s2 * na + a, o))
                        .collect();
                    if next.iter().sum::<f64>() == 0.0 {
                        0.0
                    } else {
                        history_optimal(p, &next, depth - 1)
                    }
                })
                .sum();
            reward + p.gamma() * cont
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `E_pi sum_{t<T} gamma^t r_t` by backward induction.
fn truncated_value(m: &Mdp, init: &Dist, pi: &Policy, horizon: usize) -> f64 {
    let t = mdp_transformer(m, pi).unwrap();
    let mut v = vec![0.0; m.states().size()];
    for _ in 0..horizon {
        v = t.apply_raw(&v);
    }
    init.expect(&v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bayes_filter_matches_the_joint_table(seed in any::<u64>(), ns in 1usize..5, no in 1usize..5) {
        let mut r = rng(seed);
        let p = random_pomdp(&mut r, ns, 2, no, 0.9).unwrap();
        let b = random_dist(&mut r, p.states());
        for a in 0..2 {
            let law = p.observation_law(b.probs(), a);
            prop_assert!((law.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            for o in 0..no {
                let up = bayes_update(&p, &b, a, o).unwrap();
                prop_assert!((up.pred_prob - law[o]).abs() <= 1e-12);
                prop_assert!((up.posterior.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                let (want, z) = posterior_oracle(&p, b.probs(), a, o);
                prop_assert!((up.pred_prob - z).abs() <= 1e-12);
                if z > 0.0 {
                    prop_assert!(!up.zero_prob);
                    prop_assert!(sup_dist(up.posterior.probs(), &want) <= 1e-12);
                } else {
                    prop_assert!(up.zero_prob);
                }
            }
        }
    }

    #[test]
    fn belief_tree_branches_carry_the_observation_law(seed in any::<u64>(), ns in 1usize..4, no in 1usize..4, h in 0usize..4) {
        let mut r = rng(seed);
        let p = random_pomdp(&mut r, ns, 2, no, 0.8).unwrap();
        let tree = belief_mdp_to_horizon(&p, h).unwrap();
        for (n, node) in tree.nodes.iter().enumerate() {
            prop_assert!((node.belief.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            if node.depth >= h || node.zero_prob {
                prop_assert!(tree.children[n].iter().all(|c| c.is_empty()));
                continue;
            }
            for a in 0..2 {
                let law = p.observation_law(&node.belief, a);
                let total: f64 = tree.children[n][a].iter().map(|&(_, m)| m).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                for &(c, m) in &tree.children[n][a] {
                    let (_, o) = tree.nodes[c].via.unwrap();
                    prop_assert!((m - law[o]).abs() <= 1e-15);
                    prop_assert_eq!(tree.nodes[c].depth, node.depth + 1);
                }
            }
        }
        let oracle = history_optimal(&p, p.init().probs(), h);
        prop_assert!((tree.optimal_value(&p) - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
    }

    #[test]
    fn importance_weights_are_products_of_ratios(seed in any::<u64>(), len in 1usize..6) {
        let mut r = rng(seed);
        let m = random_mdp(&mut r, 2, 2, 0.9);
        let pi = random_policy(&mut r, m.states(), m.actions());
        let mu = Policy::uniform(m.states(), m.actions());
        let init = random_dist(&mut r, m.states());
        let prefixes = enumerate_prefixes(&m, &init, &mu, len).unwrap();
        for (traj, _) in prefixes.iter().take(8) {
            let w = importance_weights(traj, &pi, &mu).unwrap();
            let mut prod = 1.0;
            for (t, s) in traj.steps().iter().enumerate() {
                prod *= pi.prob(s.state, s.action) / mu.prob(s.state, s.action);
                prop_assert!((w.cumulative[t + 1] - prod).abs() <= 1e-12 * prod.max(1.0));
            }
            prop_assert_eq!(w.cumulative[0], 1.0);
        }
    }
}

#[test]
fn tiger_tree_at_depth_three() {
    let p = tiger(0.95).unwrap();
    let tree = belief_mdp_to_horizon(&p, 3).unwrap();
    // 1 + 6 + 36 + 216 nodes: every branch has positive probability.
    assert_eq!(tree.len(), 259);
    assert_eq!(tree.zero_prob_branches(), 0);
    let listen = |_: &[f64], _: usize| vec![1.0, 0.0, 0.0];
    let v = tree.policy_value(&p, listen).unwrap();
    assert!((v - -0.01 * (1.0 + 0.95 + 0.95 * 0.95)).abs() <= 1e-15);
    let oracle = history_optimal(&p, p.init().probs(), 3);
    assert!((tree.optimal_value(&p) - oracle).abs() <= 1e-12);
}

#[test]
fn belief_policies_agree_with_sampled_pomdp_runs() {
    let mut r = rng(91);
    for i in 0..8 {
        let ns = 2 + i % 3;
        let no = 2 + (i / 2) % 3;
        let h = 3 + i % 4;
        let p = random_pomdp(&mut r, ns, 2, no, 0.9).unwrap();
        let pi = random_policy(&mut r, p.states(), p.actions());
        let rep = verify_belief_equivalence(&p, belief_linear(&pi), h, 20_000, 1000 + i as u64).unwrap();
        assert!(rep.pass, "instance {i}: {rep:?}");
    }
}

#[test]
fn perfect_observation_tree_matches_truncated_mdp_value() {
    let mut r = rng(5);
    let m = random_mdp(&mut r, 3, 2, 0.9);
    // The first action is chosen before any observation, so start from a known state.
    let init = Dist::point(m.states(), 1);
    let p = Pomdp::perfect_observation(&m, init.clone()).unwrap();
    let pi = random_policy(&mut r, m.states(), m.actions());
    for h in 0..6 {
        let tree = belief_mdp_to_horizon(&p, h).unwrap();
        let v = tree.policy_value(&p, belief_linear(&pi)).unwrap();
        assert!((v - truncated_value(&m, &init, &pi, h)).abs() <= 1e-12);
    }
}

#[test]
fn change_of_measure_is_exact_on_enumerated_prefixes() {
    let mut r = rng(12);
    for i in 0..20 {
        let m = random_mdp(&mut r, 2, 2, 0.9);
        let init = random_dist(&mut r, m.states());
        let pi = random_policy(&mut r, m.states(), m.actions());
        let mu = Policy::from_rows(m.states(), m.actions(), vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let horizon = 1 + i % 4;
        let rep = change_of_measure(&m, &init, &pi, &mu, horizon, |t| t.discounted_return(0.9)).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.martingale.len(), horizon + 1);
        let oracle = truncated_value(&m, &init, &pi, horizon);
        assert!((rep.target - oracle).abs() <= 1e-12 * (1.0 + oracle.abs()));
    }
}

#[test]
fn missing_behavior_support_is_rejected() {
    let mut r = rng(2);
    let m = random_mdp(&mut r, 2, 2, 0.9);
    let pi = Policy::uniform(m.states(), m.actions());
    let mu = Policy::deterministic(m.states(), m.actions(), &[0, 0]).unwrap();
    let traj = TrajectoryPrefix::new(vec![Step {
        state: 1,
        action: 1,
        reward: 0.0,
        next_state: 0,
    }])
    .unwrap();
    match importance_weights(&traj, &pi, &mu) {
        Err(Error::AbsoluteContinuityViolation { step, state, action }) => assert_eq!((step, state, action), (0, 1, 1)),
        other => panic!("expected a support violation, got {other:?}"),
    }
}

#[test]
fn product_weights_factorize_and_second_moments_multiply() {
    let mut r = rng(44);
    for horizon in 1..=3 {
        let m1 = random_mdp(&mut r, 2, 2, 0.9);
        let m2 = random_mdp(&mut r, 2, 2, 0.9);
        let (i1, i2) = (random_dist(&mut r, m1.states()), random_dist(&mut r, m2.states()));
        let (p1, p2) = (random_policy(&mut r, m1.states(), m1.actions()), random_policy(&mut r, m2.states(), m2.actions()));
        // Behavior policies need full support; mixing with uniform guarantees it.
        let b1 = Policy::uniform(m1.states(), m1.actions());
        let b2 = random_policy(&mut r, m2.states(), m2.actions()).mix(0.7, &Policy::uniform(m2.states(), m2.actions())).unwrap();
        let rep = factorized_weights(
            ModuleSpec { mdp: &m1, init: &i1, target: &p1, behavior: &b1 },
            ModuleSpec { mdp: &m2, init: &i2, target: &p2, behavior: &b2 },
            horizon,
        )
        .unwrap();
        assert!(rep.pass, "{rep:?}");
        let product = rep.module_second_moments[0] * rep.module_second_moments[1];
        assert!((rep.global_second_moment - product).abs() <= 1e-12 * product, "{rep:?} {product}");
        assert!((rep.global_mean_weight - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn enumeration_checks_reject_unsupported_behavior() {
    let mut r = rng(46);
    let m = random_mdp(&mut r, 2, 2, 0.9);
    let init = random_dist(&mut r, m.states());
    let pi = Policy::uniform(m.states(), m.actions());
    let mu = Policy::deterministic(m.states(), m.actions(), &[1, 1]).unwrap();
    let spec = ModuleSpec { mdp: &m, init: &init, target: &pi, behavior: &mu };
    assert!(matches!(
        change_of_measure(&m, &init, &pi, &mu, 2, |_| 1.0),
        Err(Error::PolicySupport { state: 0, action: 0 })
    ));
    assert!(matches!(factorized_weights(spec, spec, 1), Err(Error::PolicySupport { .. })));
}

#[test]
fn series_interfaces_obey_the_chain_rule() {
    let mut r = rng(45);
    for horizon in 1..=3 {
        let inst = random_series_interface(&mut r, 2, 2, 2, 0.9).unwrap();
        let rep = series_chain_rule(&inst, horizon).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}

/// `max_x |db_x| + radius sum_j |dM_xj|` for two Bellman transformers.
fn eta_oracle(a: &bellwire::bellman::Transformer, b: &bellwire::bellman::Transformer, radius: f64) -> f64 {
    let n = a.in_space().size();
    (0..n)
        .map(|x| {
            let db = (a.reward().get(x) - b.reward().get(x)).abs();
            let dm: f64 = (0..n).map(|j| (a.gamma() * a.trans().prob(x, j) - b.gamma() * b.trans().prob(x, j)).abs()).sum();
            db + radius * dm
        })
        .fold(0.0, f64::max)
}

#[test]
fn drifting_fixed_points_stay_within_tracking_bounds() {
    let mut r = rng(60);
    for _ in 0..10 {
        let g = 0.85;
        let ops = drifting_sequence(&mut r, 4, g, 20, 0.02, 0.05).unwrap();
        let exact = track_fixed_points(&ops, TrackingMode::Exact, None).unwrap();
        assert!(exact.pass(), "{exact:?}");
        let radius = ops.iter().map(|t| t.ball_out()).fold(0.0, f64::max);
        let fps: Vec<Vec<f64>> = ops.iter().map(|t| solve_linear(t).unwrap().into_values()).collect();
        let mut total = 0.0;
        for t in 0..ops.len() - 1 {
            let eta = eta_oracle(&ops[t + 1], &ops[t], radius);
            assert!((eta - exact.etas[t]).abs() <= 1e-12);
            assert!(sup_dist(&fps[t + 1], &fps[t]) <= eta / (1.0 - g) + 1e-9);
            total += eta;
        }
        assert!(sup_dist(&fps[ops.len() - 1], &fps[0]) <= total / (1.0 - g) + 1e-9);

        let one = track_fixed_points(&ops, TrackingMode::OneStep, None).unwrap();
        assert!(one.pass(), "{one:?}");
        // Independent recursion b_{t+1} = g b_t + eta_t / (1 - g) from b_0 = ||V*_0||.
        let mut v = vec![0.0; 4];
        let mut bound = sup_dist(&v, &fps[0]);
        for t in 0..ops.len() {
            assert!(sup_dist(&v, &fps[t]) <= bound + 1e-9, "step {t}");
            v = ops[t].apply_raw(&v);
            if t + 1 < ops.len() {
                bound = g * bound + eta_oracle(&ops[t + 1], &ops[t], radius) / (1.0 - g);
            }
        }
    }
}
