use bellwire::abstraction::{
    abstraction_in_context, adapter_defect, approx_hom_bound, direct_closure_context, measure_mismatch, perturb_mdp,
    random_lumpable, verify_approx_hom, verify_exact_hom, verify_exact_optimal, AbstractionMap,
};
use bellwire::bellman::{mdp_transformer, solve_affine_linear, solve_linear, Transformer};
use bellwire::circuit::plug;
use bellwire::component::{Mdp, Policy};
use bellwire::linalg::sup_dist;
use bellwire::random::{random_dist, random_kernel, random_policy, random_values, rng, AuditRng};
use bellwire::space::FiniteSpace;
use bellwire::value::ValueFn;
use proptest::prelude::*;

fn lumpable(seed: u64, gamma: f64) -> (Mdp, Mdp, AbstractionMap, AuditRng) {
    let mut r = rng(seed);
    let (c, a, phi) = random_lumpable(&mut r, 3, 3, 2, gamma).unwrap();
    (c, a, phi, r)
}

fn transformers(c: &Mdp, a: &Mdp, phi: &AbstractionMap, pihat: &Policy) -> (Transformer, Transformer) {
    let pi = phi.lift_policy(pihat, c.actions()).unwrap();
    (mdp_transformer(c, &pi).unwrap(), mdp_transformer(a, pihat).unwrap())
}

/// `(eps_r, eps_P)` recomputed by summing concrete mass into blocks.
fn mismatch_oracle(c: &Mdp, a: &Mdp, phi: &[usize]) -> (f64, f64) {
    let mut eps_r = 0.0_f64;
    let mut eps_p = 0.0_f64;
    for s in 0..c.states().size() {
        for act in 0..c.actions().size() {
            eps_r = eps_r.max((c.r(s, act) - a.r(phi[s], act)).abs());
            let mut pushed = vec![0.0; a.states().size()];
            for (s2, p) in c.transition_row(s, act).iter().enumerate() {
                pushed[phi[s2]] += p;
            }
            let d: f64 = pushed.iter().zip(a.transition_row(phi[s], act)).map(|(x, y)| (x - y).abs()).sum();
            eps_p = eps_p.max(d);
        }
    }
    (eps_r, eps_p)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pullback_is_an_isometry_and_pushforward_keeps_mass(seed in any::<u64>()) {
        let (_, _, phi, mut r) = lumpable(seed, 0.9);
        let v = ValueFn::new(phi.abstract_space(), random_values(&mut r, phi.abstract_space().size(), 4.0)).unwrap();
        let w = ValueFn::new(phi.abstract_space(), random_values(&mut r, phi.abstract_space().size(), 4.0)).unwrap();
        let (pv, pw) = (phi.pullback_value(&v).unwrap(), phi.pullback_value(&w).unwrap());
        prop_assert_eq!(pv.sup_norm(), v.sup_norm());
        prop_assert!((sup_dist(pv.values(), pw.values()) - sup_dist(v.values(), w.values())).abs() <= 1e-15);
        let mu = random_dist(&mut r, phi.concrete());
        let pushed = phi.pushforward(&mu).unwrap();
        prop_assert!((pushed.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // E_mu[phi^* v] = E_{phi_# mu}[v].
        prop_assert!((mu.expect(pv.values()) - pushed.expect(v.values())).abs() <= 1e-12);
    }

    #[test]
    fn lumpable_models_are_exact_homomorphisms(seed in any::<u64>(), gamma in 0.5f64..0.95) {
        let (c, a, phi, mut r) = lumpable(seed, gamma);
        let pihat = random_policy(&mut r, a.states(), a.actions());
        let rep = verify_exact_hom(&c, &a, &phi, &pihat).unwrap();
        prop_assert!(rep.pass, "{rep:?}");
        prop_assert!(rep.intertwining_residual.unwrap() <= 1e-10 && rep.measured_gap <= 1e-8);
        let opt = verify_exact_optimal(&c, &a, &phi).unwrap();
        prop_assert!(opt.pass, "{opt:?}");
    }

    #[test]
    fn approximate_homomorphism_bound_holds(seed in any::<u64>(), eps in 0.0f64..0.2, mix in 0.0f64..0.3, gamma in 0.5f64..0.95) {
        let (c, a, phi, mut r) = lumpable(seed, gamma);
        let noisy = perturb_mdp(&mut r, &c, eps, mix).unwrap();
        let (er, ep) = measure_mismatch(&noisy, &a, &phi).unwrap();
        let (or, op) = mismatch_oracle(&noisy, &a, phi.phi());
        prop_assert!((er - or).abs() <= 1e-12 && (ep - op).abs() <= 1e-12);
        let pihat = random_policy(&mut r, a.states(), a.actions());
        let rep = verify_approx_hom(&noisy, &a, &phi, &pihat).unwrap();
        prop_assert!(rep.pass, "{rep:?}");
        prop_assert!((rep.bound - approx_hom_bound(er, ep, gamma, noisy.v_max())).abs() <= 1e-12);
    }

    #[test]
    fn adapter_defect_is_the_vertex_maximum(seed in any::<u64>(), mix in 0.0f64..0.5) {
        let (c, a, phi, mut r) = lumpable(seed, 0.8);
        let noisy = perturb_mdp(&mut r, &c, 0.1, mix).unwrap();
        let pihat = random_policy(&mut r, a.states(), a.actions());
        let (t, th) = transformers(&noisy, &a, &phi, &pihat);
        let radius = noisy.v_max();
        let d = adapter_defect(&t, &th, &phi, radius).unwrap();
        prop_assert!(d.pass, "{d:?}");
        let n = phi.abstract_space().size();
        let mut best = 0.0_f64;
        for mask in 0u32..(1 << n) {
            let vh: Vec<f64> = (0..n).map(|j| if mask & (1 << j) != 0 { radius } else { -radius }).collect();
            let vh = ValueFn::new(phi.abstract_space(), vh).unwrap();
            let lhs = t.apply_raw(phi.pullback_value(&vh).unwrap().values());
            let rhs = phi.pullback_value(&ValueFn::new(a.states(), th.apply_raw(vh.values())).unwrap()).unwrap();
            best = best.max(sup_dist(&lhs, rhs.values()));
        }
        prop_assert!((d.defect - best).abs() <= 1e-12 * (1.0 + best), "{} vs {best}", d.defect);
    }
}

#[test]
fn adapter_defect_grows_with_the_perturbation() {
    let (c, a, phi, mut r) = lumpable(31, 0.85);
    let pihat = random_policy(&mut r, a.states(), a.actions());
    let (t, th) = transformers(&c, &a, &phi, &pihat);
    let fresh = random_kernel(&mut r, t.in_space(), t.out_space(), true);
    let shift = random_values(&mut r, t.in_space().size(), 0.1);
    let mut last = 0.0;
    for k in 0..=10 {
        let lam = k as f64 / 10.0;
        let reward: Vec<f64> = t.reward().values().iter().zip(&shift).map(|(x, d)| x + lam * d).collect();
        let trans = t.trans().mix(1.0 - lam, &fresh).unwrap();
        let tl = Transformer::new(ValueFn::new(t.in_space(), reward).unwrap(), t.gamma(), trans).unwrap();
        let d = adapter_defect(&tl, &th, &phi, c.v_max()).unwrap();
        assert!(d.pass);
        if k == 0 {
            assert!(d.defect <= 1e-12);
        }
        assert!(d.defect + 1e-12 >= last, "defect fell from {last} to {} at {lam}", d.defect);
        last = d.defect;
    }
    assert!(last > 0.0);
}

#[test]
fn direct_closure_recovers_the_abstract_value() {
    for seed in 0..20 {
        let (c, a, phi, mut r) = lumpable(seed, 0.8);
        let pihat = random_policy(&mut r, a.states(), a.actions());
        let (t, th) = transformers(&c, &a, &phi, &pihat);
        let ctx = direct_closure_context(&phi, 0.8, c.v_max());
        let abs_adapter = bellwire::abstraction::abstract_adapter(&th, &phi).unwrap().to_affine();
        let fixed = solve_affine_linear(&plug(&ctx, &abs_adapter).unwrap().compile().unwrap()).unwrap();
        let want = phi.pullback_value(&solve_linear(&th).unwrap()).unwrap();
        assert!(sup_dist(fixed.values(), want.values()) <= 1e-10);
        // Exact case: both adapters close to the same value.
        let rep = abstraction_in_context(&ctx, &t, &th, &phi).unwrap();
        assert!(rep.pass && rep.measured <= 1e-10, "{rep:?}");
        // Approximate case: the congruence bound still certifies the gap.
        let noisy = perturb_mdp(&mut r, &c, 0.05, 0.2).unwrap();
        let (tn, _) = transformers(&noisy, &a, &phi, &pihat);
        let rep = abstraction_in_context(&ctx, &tn, &th, &phi).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}

#[test]
fn maps_must_be_surjective() {
    let s = FiniteSpace::indexed("S", "s", 3).unwrap();
    let b = FiniteSpace::indexed("B", "b", 2).unwrap();
    assert!(AbstractionMap::new(&s, &b, vec![0, 0, 0]).is_err());
    assert!(AbstractionMap::new(&s, &b, vec![0, 1, 2]).is_err());
    assert!(AbstractionMap::new(&s, &b, vec![0, 1, 1]).is_ok());
}
