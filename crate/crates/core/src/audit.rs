//! Seeded generators of certified contexts with perturbed fillers, shared by
//! the randomized congruence audits.

use rand::Rng;
use rayon::prelude::*;

use crate::affine::AffineOperator;
use crate::bellman::Transformer;
use crate::circuit::{congruence_bound, duplicate, identity_context, projection, CircuitExpr, CongruenceReport, HoleSpec};
use crate::error::Result;
use crate::random::{random_kernel, random_values, stream_rng};
use crate::space::FiniteSpace;
use crate::value::ValueFn;

/// Context families drawn by [`random_context_draw`].
pub const FAMILIES: [&str; 6] = ["identity", "outer", "inner", "sandwich", "parallel", "nested-trace"];

#[derive(Debug, Clone)]
pub struct ContextDraw {
    pub family: &'static str,
    pub context: CircuitExpr,
    pub filler: AffineOperator,
    pub perturbed: AffineOperator,
}

/// Random transformer `B(out) -> B(in)` with rewards in `[-0.8, 0.8]` and
/// balls from the declared bound 1.
pub fn random_transformer<R: Rng + ?Sized>(
    rng: &mut R,
    in_space: &FiniteSpace,
    out_space: &FiniteSpace,
    gamma: f64,
) -> Result<Transformer> {
    let reward = random_values(rng, in_space.size(), 0.8);
    let trans = random_kernel(rng, in_space, out_space, true);
    Transformer::new(ValueFn::new(in_space, reward)?, gamma, trans)?.with_reward_bound(1.0)
}

/// Moves each reward by at most `eps_r` and mixes each row toward a random
/// row at rate `mix`; rewards stay within the declared bound 1.
pub fn perturb_transformer<R: Rng + ?Sized>(rng: &mut R, t: &Transformer, eps_r: f64, mix: f64) -> Result<Transformer> {
    let reward = t
        .reward()
        .values()
        .iter()
        .map(|r| (r + rng.gen_range(-eps_r..=eps_r)).clamp(-1.0, 1.0))
        .collect();
    let fresh = random_kernel(rng, t.in_space(), t.out_space(), true);
    let trans = t.trans().mix(1.0 - mix, &fresh)?;
    Transformer::new(ValueFn::new(t.in_space(), reward)?, t.gamma(), trans)?.with_balls(t.ball_in(), t.ball_out())
}

fn space<R: Rng + ?Sized>(rng: &mut R, name: &str) -> Result<FiniteSpace> {
    FiniteSpace::indexed(name, &name.to_lowercase(), rng.gen_range(2..=4))
}

/// Draws a closed context around a single hole together with a filler and
/// its perturbation (reward shift up to `eps_r`, row mixing up to `mix`).
pub fn random_context_draw<R: Rng + ?Sized>(rng: &mut R, gamma: f64, eps_r: f64, mix: f64) -> Result<ContextDraw> {
    let family = FAMILIES[rng.gen_range(0..FAMILIES.len())];
    let x = space(rng, "X")?;
    let y = space(rng, "Y")?;
    let v_max = 1.0 / (1.0 - gamma);
    let (context, hole_t) = match family {
        "identity" => {
            let t = random_transformer(rng, &x, &x, gamma)?;
            (identity_context(HoleSpec::for_transformer(&t)), t)
        }
        "outer" => {
            let a = random_transformer(rng, &x, &y, gamma)?;
            let t = random_transformer(rng, &y, &x, gamma)?;
            let c = CircuitExpr::series(CircuitExpr::transformer(&a), CircuitExpr::hole(HoleSpec::for_transformer(&t)));
            (c, t)
        }
        "inner" => {
            let t = random_transformer(rng, &x, &y, gamma)?;
            let b = random_transformer(rng, &y, &x, gamma)?;
            let c = CircuitExpr::series(CircuitExpr::hole(HoleSpec::for_transformer(&t)), CircuitExpr::transformer(&b));
            (c, t)
        }
        "sandwich" => {
            let z = space(rng, "Z")?;
            let a = random_transformer(rng, &x, &y, gamma)?;
            let t = random_transformer(rng, &y, &z, gamma)?;
            let b = random_transformer(rng, &z, &x, gamma)?;
            let c = CircuitExpr::series(
                CircuitExpr::transformer(&a),
                CircuitExpr::series(CircuitExpr::hole(HoleSpec::for_transformer(&t)), CircuitExpr::transformer(&b)),
            );
            (c, t)
        }
        "parallel" => {
            // The hole's argument is the whole product value, bounded by the summed radii.
            let t = random_transformer(rng, &x, &x, gamma)?.with_balls(1.0 + gamma * 2.0 * v_max, 2.0 * v_max)?;
            let b = random_transformer(rng, &y, &y, gamma)?;
            let c = CircuitExpr::parallel(CircuitExpr::hole(HoleSpec::for_transformer(&t)), CircuitExpr::transformer(&b));
            (c, t)
        }
        _ => {
            // Tr(dup . a . [.] . proj): the feedback passes through the hole and `a`.
            let a = random_transformer(rng, &x, &x, gamma)?;
            let t = random_transformer(rng, &x, &x, gamma)?;
            let body = CircuitExpr::series(
                CircuitExpr::leaf(duplicate(&x, v_max)),
                CircuitExpr::series(
                    CircuitExpr::transformer(&a),
                    CircuitExpr::series(
                        CircuitExpr::hole(HoleSpec::for_transformer(&t)),
                        CircuitExpr::leaf(projection(&x, &x, true, v_max)),
                    ),
                ),
            );
            (CircuitExpr::trace(body, v_max), t)
        }
    };
    let perturbed = perturb_transformer(rng, &hole_t, eps_r, mix)?;
    Ok(ContextDraw {
        family,
        context,
        filler: hole_t.to_affine(),
        perturbed: perturbed.to_affine(),
    })
}

/// Discounts cycled through by [`run_congruence_audit`].
pub const AUDIT_GAMMAS: [f64; 3] = [0.5, 0.7, 0.9];

#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub family: &'static str,
    pub gamma: f64,
    pub report: CongruenceReport,
}

#[derive(Debug, Clone)]
pub struct AuditSummary {
    pub entries: Vec<AuditEntry>,
    pub violations: usize,
    pub min_slack: f64,
    pub mean_slack: f64,
    pub max_slack: f64,
}

/// Draws `draws` certified contexts (draw `i` from stream `i` of `seed`, with
/// discount `AUDIT_GAMMAS[i % 3]`) and audits each congruence bound. Results
/// are independent of the thread count.
pub fn run_congruence_audit(seed: u64, draws: usize, eps_r: f64, mix: f64) -> Result<AuditSummary> {
    let entries = (0..draws)
        .into_par_iter()
        .map(|i| {
            let gamma = AUDIT_GAMMAS[i % AUDIT_GAMMAS.len()];
            let d = random_context_draw(&mut stream_rng(seed, i as u64), gamma, eps_r, mix)?;
            let report = congruence_bound(&d.context, &d.filler, &d.perturbed)?;
            Ok(AuditEntry {
                family: d.family,
                gamma,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let slacks: Vec<f64> = entries.iter().map(|e| e.report.slack()).collect();
    let n = slacks.len().max(1) as f64;
    Ok(AuditSummary {
        violations: entries.iter().filter(|e| !e.report.pass).count(),
        min_slack: slacks.iter().cloned().fold(f64::INFINITY, f64::min),
        mean_slack: slacks.iter().sum::<f64>() / n,
        max_slack: slacks.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        entries,
    })
}
