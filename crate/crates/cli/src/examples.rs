//! Built-in scenarios runnable without an input document.

use anyhow::{bail, Result};
use bellwire::audit::run_congruence_audit;
use bellwire::extensions::pomdp::{belief_linear, belief_mdp_to_horizon, tiger, verify_belief_equivalence};
use bellwire::extensions::tracking::drifting_sequence;
use bellwire::extensions::{track_fixed_points, TrackingMode};
use bellwire::random::{random_oddc, random_policy, rng};
use bellwire::robustness::{
    depth_attenuation, reference_loop, run_parallel_factorization, run_two_module_robustness, PerturbationSpec,
    RobustnessReport, FACTOR_TOL,
};
use bellwire::Policy;

use crate::commands::DEFAULT_TRAJECTORIES;
use crate::report::Report;

pub const NAMES: [&str; 5] = [
    "two_module_robustness",
    "parallel_factorization",
    "congruence_audit",
    "tiger_belief",
    "drift_tracking",
];

pub fn run(name: &str, rep: &mut Report, trajectories: Option<usize>) -> Result<()> {
    match name {
        "two_module_robustness" => two_module_robustness(rep),
        "parallel_factorization" => parallel_factorization(rep),
        "congruence_audit" => congruence_audit(rep),
        "tiger_belief" => tiger_belief(rep, trajectories.unwrap_or(DEFAULT_TRAJECTORIES)),
        "drift_tracking" => drift_tracking(rep),
        _ => bail!("unknown example `{name}`; available: {}", NAMES.join(", ")),
    }
}

fn chain(rep: &mut Report, tag: &str, r: &RobustnessReport) {
    rep.nums(format!("{tag} local mismatch formula"), &r.eps_formula);
    rep.nums(format!("{tag} local mismatch exact"), &r.eps_exact);
    rep.num(format!("{tag} gap slack"), r.slack());
    for l in &r.links {
        rep.bounded(format!("{tag} {}", l.name), l.bound, l.measured);
    }
}

fn two_module_robustness(rep: &mut Report) -> Result<()> {
    let base = reference_loop()?;
    rep.num("gamma", base.gamma());
    rep.num("v_max", base.v_max());
    let spec = PerturbationSpec {
        target: 1,
        eps_r: 0.1,
        eps_p: 0.0,
        seed: rep.seed,
    };
    let r = run_two_module_robustness(&base, &spec)?;
    rep.num("reward-only gap bound", r.gap_bound);
    chain(rep, "reward-only", &r);
    let d = depth_attenuation(&base, 0.1, 0.2, rep.seed)?;
    chain(rep, "first perturbed", &d.first);
    chain(rep, "second perturbed", &d.second);
    rep.num("first perturbed macro bound", d.first.macro_bound);
    rep.num("second perturbed macro bound", d.second.macro_bound);
    rep.verdict("depth attenuation", Some(0.0), Some(d.attenuation_error), d.pass);
    Ok(())
}

fn parallel_factorization(rep: &mut Report) -> Result<()> {
    let mut r = rng(rep.seed);
    let m1 = random_oddc(&mut r, 3, 2, 2, 0.9);
    let m2 = random_oddc(&mut r, 2, 2, 3, 0.9);
    let pi1 = random_policy(&mut r, m1.s_in(), m1.actions());
    let pi2 = random_policy(&mut r, m2.s_in(), m2.actions());
    let p = run_parallel_factorization(&m1, &m2, &pi1, &pi2, 0.5, rep.seed)?;
    rep.bounded("additive value factorization", FACTOR_TOL, p.factor_gap);
    rep.bounded("separable invariance", FACTOR_TOL, p.separable_gap);
    rep.verdict(
        "coupled control breaks factorization",
        Some(FACTOR_TOL),
        Some(p.coupled_gap),
        p.coupled_gap > FACTOR_TOL,
    );
    Ok(())
}

fn congruence_audit(rep: &mut Report) -> Result<()> {
    let a = run_congruence_audit(rep.seed, 100, 0.1, 0.2)?;
    rep.int("draws", a.entries.len());
    rep.num("min slack", a.min_slack);
    rep.num("mean slack", a.mean_slack);
    rep.num("max slack", a.max_slack);
    for (i, e) in a.entries.iter().enumerate() {
        rep.bounded(format!("draw {i} {} gamma {}", e.family, e.gamma), e.report.bound, e.report.measured);
    }
    Ok(())
}

fn tiger_belief(rep: &mut Report, trajectories: usize) -> Result<()> {
    let p = tiger(0.5)?;
    let horizon = 6;
    let tree = belief_mdp_to_horizon(&p, horizon)?;
    rep.int("tree nodes", tree.len());
    rep.num("optimal tree value", tree.optimal_value(&p));
    let uniform = Policy::uniform(p.states(), p.actions());
    let b = verify_belief_equivalence(&p, belief_linear(&uniform), horizon, trajectories, rep.seed)?;
    rep.num("uniform policy tree value", b.tree_value);
    rep.num("mc mean", b.mc.mean);
    let tol = b.mc.tolerance(rep.tolerances.mc_sigmas, b.truncation);
    rep.verdict("belief tree agrees with filtering", Some(tol), Some(b.gap), b.gap <= tol);
    Ok(())
}

fn drift_tracking(rep: &mut Report) -> Result<()> {
    let ops = drifting_sequence(&mut rng(rep.seed), 4, 0.85, 20, 0.02, 0.05)?;
    for mode in [TrackingMode::Exact, TrackingMode::OneStep] {
        let r = track_fixed_points(&ops, mode, None)?;
        let tag = if mode == TrackingMode::Exact { "fixed-point drift" } else { "iterate tracking" };
        for s in &r.steps {
            rep.bounded(format!("{tag} t={}", s.t), s.bound, s.measured);
        }
        if let Some((measured, bound)) = r.cumulative {
            rep.bounded("cumulative drift", bound, measured);
        }
    }
    Ok(())
}
