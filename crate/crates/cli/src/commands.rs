//! One driver per subcommand. Drivers only call library operations and record
//! their results; pass/fail comes from the library or from `measured <= bound
//! + slack`.

use anyhow::{bail, Result};
use bellwire::abstraction::{
    abstraction_in_context, adapter_defect, direct_closure_context, measure_mismatch, verify_approx_hom,
    verify_exact_hom, verify_exact_optimal, AbstractionMap, EXACT_TOL,
};
use bellwire::bellman::{
    mdp_transformer, monte_carlo_value, solve_affine_linear, solve_linear, truncation_horizon, value_iteration,
};
use bellwire::circuit::{certify_with, congruence_bound, operator_congruence, Certificate};
use bellwire::contracts::{
    check_prefixed, kleene_lfp, lfp_trace_transformer, lift_parallel, lift_series, ContractFn,
};
use bellwire::extensions::ope::{change_of_measure, factorized_weights};
use bellwire::extensions::pomdp::{belief_linear, belief_mdp_to_horizon, verify_belief_equivalence};
use bellwire::extensions::tracking::drifting_sequence;
use bellwire::extensions::{track_fixed_points, ModuleSpec, TrackingMode};
use bellwire::linalg::sup_dist;
use bellwire::random::rng;
use bellwire::{Dist, Error, Policy, Transformer, ValueFn};

use crate::doc::{contract_fn, Document, TrackModeDecl};
use crate::report::{self, Report};

/// Monte Carlo truncation bias: the horizon is chosen so that the cut-off
/// tail is at most this much.
pub const MC_TRUNCATION: f64 = 1e-4;
pub const DEFAULT_TRAJECTORIES: usize = 20_000;
const KLEENE_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Vi,
    Linear,
    Mc,
}

pub fn solve(doc: &Document, rep: &mut Report, methods: &[Method], trajectories: usize) -> Result<()> {
    let tol = rep.tolerances.solver;
    let target = doc.solve.as_ref().and_then(|s| s.transformer.clone());
    let op = match &target {
        Some(name) => {
            rep.text("target", format!("transformer {name}"));
            doc.transformer(name)?.to_affine()
        }
        None => {
            let c = doc.circuit()?;
            if c.has_hole() {
                bail!("solve needs a closed circuit without holes");
            }
            rep.text("target", "circuit");
            c.compile()?
        }
    };
    rep.text("space", op.in_space().labels().join(" "));
    rep.num("contraction modulus", op.lipschitz());
    let mut linear = None;
    let mut vi = None;
    if methods.contains(&Method::Linear) {
        let v = solve_affine_linear(&op)?;
        rep.nums("linear value", v.values());
        let residual = sup_dist(&op.apply_raw(v.values()), v.values());
        rep.bounded("linear residual", tol, residual);
        linear = Some(v);
    }
    if methods.contains(&Method::Vi) {
        let run = value_iteration(&op, tol, false)?;
        rep.nums("vi value", run.value.values());
        rep.int("vi iterations", run.iterations);
        rep.num("vi last step", run.residual);
        vi = Some(run.value);
    }
    if let (Some(l), Some(v)) = (&linear, &vi) {
        rep.bounded("vi agrees with linear", tol, sup_dist(l.values(), v.values()));
    }
    if methods.contains(&Method::Mc) {
        let Some(name) = &target else {
            bail!("mc needs [solve] transformer = <name> declared from a component or MDP and a policy");
        };
        let Some((m, pi)) = doc.trajectory_source(name)? else {
            bail!("mc needs transformer `{name}` to be declared from a component or MDP and a policy");
        };
        let horizon = truncation_horizon(m.gamma(), m.v_max(), MC_TRUNCATION);
        rep.int("mc horizon", horizon);
        rep.int("mc trajectories", trajectories);
        let exact = linear.as_ref().or(vi.as_ref());
        let mut means = Vec::new();
        for s in 0..op.in_space().size() {
            let est = monte_carlo_value(&m, &pi, s, horizon, trajectories, rep.seed)?;
            means.push(est.mean);
            if let Some(v) = exact {
                let tol = est.tolerance(rep.tolerances.mc_sigmas, MC_TRUNCATION);
                rep.verdict(
                    format!("mc agrees at {}", op.in_space().label(s)),
                    Some(tol),
                    Some(est.gap(v.get(s))),
                    est.gap(v.get(s)) <= tol,
                );
            }
        }
        rep.nums("mc value", &means);
    }
    Ok(())
}

fn record_certificate(rep: &mut Report, cert: &Certificate) {
    if let Some(g) = cert.gain {
        rep.num("context gain", g);
    }
    rep.num("contraction modulus", cert.kappa);
    rep.text("closed", cert.closed.to_string());
    for n in &cert.nodes {
        let mut line = format!("{} lipschitz {}", n.kind, crate::report::num(n.lipschitz));
        if let Some(g) = n.gain {
            line += &format!(" gain {}", crate::report::num(g));
        }
        if let Some(k) = n.trace {
            line += &format!(
                " alpha {} eta {} beta {} a_x {}",
                crate::report::num(k.alpha),
                crate::report::num(k.eta),
                crate::report::num(k.beta),
                crate::report::num(k.a_x)
            );
        }
        rep.text(format!("node {}", n.path), line);
    }
}

pub fn certify(doc: &Document, rep: &mut Report) -> Result<()> {
    let spec = doc.section("certify", &doc.certify)?;
    let ctx = doc.circuit()?;
    if ctx.hole_count() != 1 {
        bail!("certify needs a context with exactly one hole, found {}", ctx.hole_count());
    }
    let t1 = doc.transformer(&spec.fillers[0])?.to_affine();
    let t2 = doc.transformer(&spec.fillers[1])?.to_affine();
    let cert = match certify_with(&ctx, &[&t1, &t2]) {
        Ok(c) => c,
        Err(e @ (Error::UncertifiableTrace { .. } | Error::UnguardedTrace { .. } | Error::EdgeBallViolation { .. })) => {
            rep.failed("certificate", e.to_string());
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    record_certificate(rep, &cert);
    let audit = if cert.closed {
        congruence_bound(&ctx, &t1, &t2)
    } else {
        operator_congruence(&ctx, &t1, &t2)
    };
    let audit = match audit {
        Ok(a) => a,
        Err(e @ Error::NonContraction { .. }) => {
            rep.failed("congruence", e.to_string());
            return Ok(());
        }
        Err(e) => return Err(e.into()),
    };
    rep.num("filler distance", audit.eps);
    rep.num("slack", audit.slack());
    let name = if cert.closed { "fixed-point congruence" } else { "operator congruence" };
    rep.bounded(name, audit.bound, audit.measured);
    Ok(())
}

fn render(c: &ContractFn) -> String {
    let cells: Vec<String> = c.values().iter().map(|v| v.finite().map_or_else(|| "inf".to_string(), report::num)).collect();
    format!("[{}]", cells.join(", "))
}

/// Obligation failures are verdicts, not input errors.
fn lift_verdict<T>(rep: &mut Report, name: &str, r: bellwire::Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e @ Error::ObligationFailed { .. }) => {
            rep.failed(name, e.to_string());
            Ok(None)
        }
        Err(e) => Err(e.into()),
    }
}

pub fn contract(doc: &Document, rep: &mut Report) -> Result<()> {
    let spec = doc.section("contract", &doc.contract)?;
    let tol = rep.tolerances.solver;
    if let Some(name) = &spec.transformer {
        let t = doc.contract_transformer(name)?;
        let run = kleene_lfp(&t, tol, KLEENE_MAX_ITER)?;
        rep.text("least fixed point", render(&run.lfp));
        rep.int("kleene iterations", run.iterations);
        if let (Some(cost), Some(lfp)) = (t.cost().to_finite(), run.lfp.to_finite()) {
            let bt = Transformer::new(ValueFn::new(t.in_space(), cost)?, t.gamma(), t.trans().clone())?;
            let exact = solve_linear(&bt)?;
            rep.bounded("lfp matches linear solve", tol, sup_dist(&lfp, exact.values()));
        }
        for (i, c) in spec.candidates.iter().enumerate() {
            let c = contract_fn(t.in_space(), c)?;
            let check = check_prefixed(&t, &c)?;
            rep.text(format!("candidate {i}"), render(&c));
            match check.witness {
                Some(w) => rep.verdict(format!("pre-fixed point {i} (violated at {})", t.in_space().label(w)), None, None, false),
                None => rep.verdict(format!("pre-fixed point {i}"), None, None, check.holds),
            }
            if check.holds {
                rep.verdict(format!("lfp below candidate {i}"), None, None, check.lfp_below == Some(true));
            }
        }
    }
    for (i, s) in spec.series.iter().enumerate() {
        let (t1, t2) = (doc.contract_transformer(&s.first)?, doc.contract_transformer(&s.second)?);
        let cz = contract_fn(t2.out_space(), &s.c_z)?;
        let cy = contract_fn(t1.out_space(), &s.c_y)?;
        let cx = contract_fn(t1.in_space(), &s.c_x)?;
        let name = format!("series lift {i}");
        if let Some(v) = lift_verdict(rep, &name, lift_series(&t1, &t2, &cz, &cy, &cx))? {
            rep.text(format!("{name} composed"), render(&v.composed));
            if let Some(l) = &v.closed_loop_lfp {
                rep.text(format!("{name} closed-loop lfp"), render(l));
            }
            rep.verdict(name, None, None, v.sound());
        }
    }
    for (i, p) in spec.parallel.iter().enumerate() {
        let (t1, t2) = (doc.contract_transformer(&p.left)?, doc.contract_transformer(&p.right)?);
        let cy1 = contract_fn(t1.out_space(), &p.c_y1)?;
        let cx1 = contract_fn(t1.in_space(), &p.c_x1)?;
        let cy2 = contract_fn(t2.out_space(), &p.c_y2)?;
        let cx2 = contract_fn(t2.in_space(), &p.c_x2)?;
        let name = format!("parallel lift {i}");
        if let Some(v) = lift_verdict(rep, &name, lift_parallel(&t1, &t2, &cy1, &cx1, &cy2, &cx2))? {
            rep.text(format!("{name} tensored"), render(&v.tensored));
            rep.verdict(name, None, None, v.holds);
        }
    }
    for (i, f) in spec.feedback.iter().enumerate() {
        let t = doc.contract_transformer(&f.body)?;
        let (Some((y, z)), Some((x, _))) = (t.out_space().summands(), t.in_space().summands()) else {
            bail!("contract.feedback[{i}]: body `{}` needs sum spaces Y + Z -> X + Z", f.body);
        };
        let c_y = contract_fn(y, &f.c_y)?;
        let c_z = contract_fn(z, &f.c_z)?;
        let c_x = contract_fn(x, &f.c_x)?;
        let name = format!("feedback lift {i}");
        if let Some(v) = lift_verdict(rep, &name, lfp_trace_transformer(&t, &c_y, &c_x, &c_z))? {
            rep.text(format!("{name} feedback lfp"), render(&v.feedback));
            rep.text(format!("{name} traced"), render(&v.traced));
            rep.verdict(name, None, None, v.holds);
        }
    }
    if rep.checks.is_empty() {
        bail!("[contract] names no transformer and no lifting obligations");
    }
    Ok(())
}

pub fn abstraction(doc: &Document, rep: &mut Report) -> Result<()> {
    let spec = doc.section("abstraction", &doc.abstraction)?;
    let c = doc.mdp(&spec.concrete)?;
    let a = doc.mdp(&spec.abstract_mdp)?;
    let mut phi = AbstractionMap::new(c.states(), a.states(), spec.phi.clone())?;
    if let Some(eta) = &spec.eta {
        phi = phi.with_eta(eta.clone(), c.actions().size())?;
    }
    let (er, ep) = measure_mismatch(&c, &a, &phi)?;
    rep.num("reward mismatch", er);
    rep.num("transition mismatch", ep);
    let exact = er <= EXACT_TOL && ep <= EXACT_TOL;
    rep.text("exact", exact.to_string());
    if exact {
        let opt = verify_exact_optimal(&c, &a, &phi)?;
        rep.num("optimal intertwining residual", opt.intertwining_residual.unwrap_or(0.0));
        rep.verdict("exact optimality", None, Some(opt.measured_gap), opt.pass);
    }
    let Some(pname) = &spec.policy else {
        return Ok(());
    };
    let pihat = doc.policy(pname)?;
    if exact {
        let hom = verify_exact_hom(&c, &a, &phi, &pihat)?;
        rep.num("policy intertwining residual", hom.intertwining_residual.unwrap_or(0.0));
        rep.verdict("exact homomorphism", None, Some(hom.measured_gap), hom.pass);
    } else {
        let hom = verify_approx_hom(&c, &a, &phi, &pihat)?;
        rep.bounded("approximate homomorphism", hom.bound, hom.measured_gap);
    }
    let pi = phi.lift_policy(&pihat, c.actions())?;
    let (t, th) = (mdp_transformer(&c, &pi)?, mdp_transformer(&a, &pihat)?);
    let d = adapter_defect(&t, &th, &phi, c.v_max())?;
    rep.bounded("adapter defect", d.bound, d.defect);
    let ctx = direct_closure_context(&phi, c.gamma(), c.v_max());
    let cong = abstraction_in_context(&ctx, &t, &th, &phi)?;
    rep.num("context gain", cong.gain);
    rep.num("context modulus", cong.kappa);
    rep.bounded("abstraction in context", cong.bound, cong.measured);
    Ok(())
}

pub fn belief(doc: &Document, rep: &mut Report, trajectories: Option<usize>) -> Result<()> {
    let spec = doc.section("belief", &doc.belief)?;
    let p = doc.pomdp(&spec.pomdp)?;
    let n = trajectories.or(spec.trajectories).unwrap_or(DEFAULT_TRAJECTORIES);
    let pi = match &spec.policy {
        Some(name) => doc.policy(name)?,
        None => Policy::uniform(p.states(), p.actions()),
    };
    let tree = belief_mdp_to_horizon(&p, spec.horizon)?;
    rep.int("horizon", spec.horizon);
    rep.int("tree nodes", tree.len());
    rep.int("zero-probability branches", tree.zero_prob_branches());
    rep.num("optimal tree value", tree.optimal_value(&p));
    let b = verify_belief_equivalence(&p, belief_linear(&pi), spec.horizon, n, rep.seed)?;
    rep.num("policy tree value", b.tree_value);
    rep.num("mc mean", b.mc.mean);
    rep.num("mc std error", b.mc.std_error);
    rep.int("mc trajectories", b.mc.n);
    let tol = b.mc.tolerance(rep.tolerances.mc_sigmas, b.truncation);
    rep.verdict("belief tree agrees with filtering", Some(tol), Some(b.gap), b.gap <= tol);
    Ok(())
}

pub fn ope(doc: &Document, rep: &mut Report) -> Result<()> {
    let spec = doc.section("ope", &doc.ope)?;
    let mdp = doc.mdp(&spec.mdp)?;
    let init = Dist::new(mdp.states(), spec.init.clone())?;
    let (pi, mu) = (doc.policy(&spec.target)?, doc.policy(&spec.behavior)?);
    let g = mdp.gamma();
    let com = change_of_measure(&mdp, &init, &pi, &mu, spec.horizon, |t| t.discounted_return(g))?;
    rep.int("horizon", spec.horizon);
    rep.int("behavior prefixes", com.prefixes);
    rep.num("weighted behavior return", com.weighted);
    rep.num("target return", com.target);
    rep.nums("mean weight by step", &com.martingale);
    rep.verdict("change of measure and unit mean weight", None, None, com.pass);
    if let Some(s) = &spec.second {
        let m2 = doc.mdp(&s.mdp)?;
        let init2 = Dist::new(m2.states(), s.init.clone())?;
        let (pi2, mu2) = (doc.policy(&s.target)?, doc.policy(&s.behavior)?);
        let f = factorized_weights(
            ModuleSpec {
                mdp: &mdp,
                init: &init,
                target: &pi,
                behavior: &mu,
            },
            ModuleSpec {
                mdp: &m2,
                init: &init2,
                target: &pi2,
                behavior: &mu2,
            },
            spec.horizon,
        )?;
        rep.int("product prefixes", f.prefixes);
        rep.nums("module second moments", &f.module_second_moments);
        rep.num("product second moment", f.global_second_moment);
        rep.num("product mean weight", f.global_mean_weight);
        rep.num("max factor error", f.max_factor_error);
        rep.num("log additivity error", f.log_additivity_error);
        rep.verdict("weights factorize over the product", None, None, f.pass);
    }
    Ok(())
}

pub fn track(doc: &Document, rep: &mut Report) -> Result<()> {
    let spec = doc.section("track", &doc.track)?;
    let ops: Vec<Transformer> = match (&spec.transformers, &spec.drift) {
        (Some(names), None) => names.iter().map(|n| doc.transformer(n)).collect::<Result<_>>()?,
        (None, Some(d)) => drifting_sequence(&mut rng(rep.seed), d.states, d.gamma, d.steps, d.reward_step, d.mix_step)?,
        _ => bail!("[track] needs exactly one of `transformers` or `drift`"),
    };
    rep.int("operators", ops.len());
    let modes: &[TrackingMode] = match spec.mode {
        TrackModeDecl::Exact => &[TrackingMode::Exact],
        TrackModeDecl::OneStep => &[TrackingMode::OneStep],
        TrackModeDecl::Both => &[TrackingMode::Exact, TrackingMode::OneStep],
    };
    for &mode in modes {
        let r = track_fixed_points(&ops, mode, None)?;
        let tag = match mode {
            TrackingMode::Exact => "fixed-point drift",
            TrackingMode::OneStep => "iterate tracking",
        };
        if mode == TrackingMode::Exact {
            rep.num("radius", r.radius);
            rep.nums("operator drift", &r.etas);
        }
        for s in &r.steps {
            rep.bounded(format!("{tag} t={}", s.t), s.bound, s.measured);
        }
        if let Some((measured, bound)) = r.cumulative {
            rep.bounded("cumulative drift", bound, measured);
        }
    }
    Ok(())
}
