//! Circuit expressions over affine operators: series, parallel, direct sum,
//! guarded trace and a single hole.
//!
//! Operators are typed `B(out) -> B(in)`: values flow backward from the
//! continuation (argument) space to the result space. A trace body maps
//! `B(X + Z) -> B(Y + Z)` and the traced operator is `B(X) -> B(Y)`.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::affine::AffineOperator;
use crate::bellman::{solve_affine_linear, Transformer};
use crate::error::{Error, Result};
use crate::linalg::{sup_dist, sup_norm, Matrix};
use crate::space::FiniteSpace;
use crate::trace::GuardedTrace;

/// Slack on certified inequalities.
pub const CERT_TOL: f64 = 1e-9;

/// Typed slot for a single component.
#[derive(Debug, Clone, PartialEq)]
pub struct HoleSpec {
    pub in_space: FiniteSpace,
    pub out_space: FiniteSpace,
    pub ball_in: f64,
    pub ball_out: f64,
    /// Declared Lipschitz constant every filler must respect.
    pub gamma: f64,
}

impl HoleSpec {
    /// Self-map hole on `space` with both balls at `v_max`.
    pub fn closed(space: &FiniteSpace, v_max: f64, gamma: f64) -> Self {
        Self {
            in_space: space.clone(),
            out_space: space.clone(),
            ball_in: v_max,
            ball_out: v_max,
            gamma,
        }
    }

    /// The hole a transformer fits into exactly.
    pub fn for_transformer(t: &Transformer) -> Self {
        Self {
            in_space: t.in_space().clone(),
            out_space: t.out_space().clone(),
            ball_in: t.ball_in(),
            ball_out: t.ball_out(),
            gamma: t.gamma(),
        }
    }
}

/// Feedback constants of a trace node: `alpha = ||M_ZZ||`, `eta = ||M_ZX||`,
/// `beta = ||M_YZ||`, `a_x = ||M_YX||` for the body blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConstants {
    pub alpha: f64,
    pub eta: f64,
    pub beta: f64,
    pub a_x: f64,
}

impl TraceConstants {
    /// Gain factor `1 + beta / (1 - alpha)` of a discrepancy inside the body.
    pub fn amplification(&self) -> f64 {
        1.0 + self.beta / (1.0 - self.alpha)
    }

    /// Lipschitz bound `a_x + beta eta / (1 - alpha)` of the traced map.
    pub fn external_modulus(&self) -> f64 {
        self.a_x + self.beta * self.eta / (1.0 - self.alpha)
    }

    pub fn max(&self, other: &TraceConstants) -> TraceConstants {
        TraceConstants {
            alpha: self.alpha.max(other.alpha),
            eta: self.eta.max(other.eta),
            beta: self.beta.max(other.beta),
            a_x: self.a_x.max(other.a_x),
        }
    }

    fn dominates(&self, exact: &TraceConstants) -> bool {
        let ok = |d: f64, e: f64| d + 1e-12 >= e;
        ok(self.alpha, exact.alpha) && ok(self.eta, exact.eta) && ok(self.beta, exact.beta) && ok(self.a_x, exact.a_x)
    }

    /// Exact constants of an affine trace body.
    pub fn of_body(body: &AffineOperator) -> Result<Self> {
        let b = TraceBlocks::split(body, "body")?;
        Ok(b.constants())
    }
}

struct TraceBlocks {
    nx: usize,
    ny: usize,
    b_y: Vec<f64>,
    b_z: Vec<f64>,
    m_yx: Matrix,
    m_yz: Matrix,
    m_zx: Matrix,
    m_zz: Matrix,
    x: FiniteSpace,
    y: FiniteSpace,
}

impl TraceBlocks {
    fn split(body: &AffineOperator, path: &str) -> Result<Self> {
        let (x, y, z) = trace_spaces(body.in_space(), body.out_space(), path)?;
        let (nx, ny, nz) = (x.size(), y.size(), z.size());
        let m = body.lin();
        Ok(Self {
            nx,
            ny,
            b_y: body.offset()[..ny].to_vec(),
            b_z: body.offset()[ny..].to_vec(),
            m_yx: m.block(0, ny, 0, nx),
            m_yz: m.block(0, ny, nx, nx + nz),
            m_zx: m.block(ny, ny + nz, 0, nx),
            m_zz: m.block(ny, ny + nz, nx, nx + nz),
            x,
            y,
        })
    }

    fn constants(&self) -> TraceConstants {
        TraceConstants {
            alpha: self.m_zz.inf_norm(),
            eta: self.m_zx.inf_norm(),
            beta: self.m_yz.inf_norm(),
            a_x: self.m_yx.inf_norm(),
        }
    }
}

/// Splits trace body spaces `Y + Z` (result) and `X + Z` (argument).
fn trace_spaces(result: &FiniteSpace, arg: &FiniteSpace, path: &str) -> Result<(FiniteSpace, FiniteSpace, FiniteSpace)> {
    let type_err = |detail: String| Error::TypeError {
        path: path.to_string(),
        detail,
    };
    let (x, z_arg) = arg
        .summands()
        .ok_or_else(|| type_err(format!("trace body argument {arg} is not a sum X + Z")))?;
    let (y, z_res) = result
        .summands()
        .ok_or_else(|| type_err(format!("trace body result {result} is not a sum Y + Z")))?;
    if z_arg != z_res {
        return Err(type_err(format!("feedback spaces differ: {z_arg} vs {z_res}")));
    }
    Ok((x.clone(), y.clone(), z_arg.clone()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum CircuitExpr {
    Leaf(AffineOperator),
    /// `first . second`: `second` acts one step deeper (later in time).
    Series {
        first: Box<CircuitExpr>,
        second: Box<CircuitExpr>,
    },
    /// Bellman tensor on product state spaces with additive rewards.
    Parallel {
        left: Box<CircuitExpr>,
        right: Box<CircuitExpr>,
    },
    /// Block-diagonal direct sum `B(X1) x B(X2) = B(X1 + X2)`.
    Sum {
        left: Box<CircuitExpr>,
        right: Box<CircuitExpr>,
    },
    Trace {
        body: Box<CircuitExpr>,
        feedback_radius: f64,
        declared: Option<TraceConstants>,
    },
    Hole(HoleSpec),
}

fn child(path: &str, name: &str) -> String {
    format!("{path}.{name}")
}

impl CircuitExpr {
    pub fn leaf(op: AffineOperator) -> Self {
        CircuitExpr::Leaf(op)
    }

    pub fn transformer(t: &Transformer) -> Self {
        CircuitExpr::Leaf(t.to_affine())
    }

    pub fn series(first: CircuitExpr, second: CircuitExpr) -> Self {
        CircuitExpr::Series {
            first: Box::new(first),
            second: Box::new(second),
        }
    }

    pub fn parallel(left: CircuitExpr, right: CircuitExpr) -> Self {
        CircuitExpr::Parallel {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn sum(left: CircuitExpr, right: CircuitExpr) -> Self {
        CircuitExpr::Sum {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn trace(body: CircuitExpr, feedback_radius: f64) -> Self {
        CircuitExpr::Trace {
            body: Box::new(body),
            feedback_radius,
            declared: None,
        }
    }

    pub fn trace_with(body: CircuitExpr, feedback_radius: f64, constants: TraceConstants) -> Self {
        CircuitExpr::Trace {
            body: Box::new(body),
            feedback_radius,
            declared: Some(constants),
        }
    }

    pub fn hole(spec: HoleSpec) -> Self {
        CircuitExpr::Hole(spec)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CircuitExpr::Leaf(_) => "leaf",
            CircuitExpr::Series { .. } => "series",
            CircuitExpr::Parallel { .. } => "parallel",
            CircuitExpr::Sum { .. } => "sum",
            CircuitExpr::Trace { .. } => "trace",
            CircuitExpr::Hole(_) => "hole",
        }
    }

    pub fn hole_count(&self) -> usize {
        match self {
            CircuitExpr::Leaf(_) => 0,
            CircuitExpr::Hole(_) => 1,
            CircuitExpr::Series { first: a, second: b }
            | CircuitExpr::Parallel { left: a, right: b }
            | CircuitExpr::Sum { left: a, right: b } => a.hole_count() + b.hole_count(),
            CircuitExpr::Trace { body, .. } => body.hole_count(),
        }
    }

    pub fn has_hole(&self) -> bool {
        self.hole_count() > 0
    }

    pub fn hole_spec(&self) -> Option<&HoleSpec> {
        match self {
            CircuitExpr::Leaf(_) => None,
            CircuitExpr::Hole(h) => Some(h),
            CircuitExpr::Series { first: a, second: b }
            | CircuitExpr::Parallel { left: a, right: b }
            | CircuitExpr::Sum { left: a, right: b } => a.hole_spec().or_else(|| b.hole_spec()),
            CircuitExpr::Trace { body, .. } => body.hole_spec(),
        }
    }

    /// `(result space, argument space)` of the node, checking every wire.
    pub fn spaces(&self) -> Result<(FiniteSpace, FiniteSpace)> {
        self.spaces_at("$")
    }

    fn spaces_at(&self, path: &str) -> Result<(FiniteSpace, FiniteSpace)> {
        match self {
            CircuitExpr::Leaf(op) => Ok((op.in_space().clone(), op.out_space().clone())),
            CircuitExpr::Hole(h) => Ok((h.in_space.clone(), h.out_space.clone())),
            CircuitExpr::Series { first, second } => {
                let (f_in, f_out) = first.spaces_at(&child(path, "first"))?;
                let (s_in, s_out) = second.spaces_at(&child(path, "second"))?;
                if f_out != s_in {
                    return Err(Error::TypeError {
                        path: path.to_string(),
                        detail: format!("first step consumes {f_out} but second step produces {s_in}"),
                    });
                }
                Ok((f_in, s_out))
            }
            CircuitExpr::Parallel { left, right } => {
                let (l_in, l_out) = left.spaces_at(&child(path, "left"))?;
                let (r_in, r_out) = right.spaces_at(&child(path, "right"))?;
                Ok((FiniteSpace::product(&l_in, &r_in), FiniteSpace::product(&l_out, &r_out)))
            }
            CircuitExpr::Sum { left, right } => {
                let (l_in, l_out) = left.spaces_at(&child(path, "left"))?;
                let (r_in, r_out) = right.spaces_at(&child(path, "right"))?;
                Ok((FiniteSpace::sum(&l_in, &r_in), FiniteSpace::sum(&l_out, &r_out)))
            }
            CircuitExpr::Trace { body, feedback_radius, .. } => {
                if !(*feedback_radius >= 0.0) {
                    return Err(Error::TypeError {
                        path: path.to_string(),
                        detail: format!("feedback radius {feedback_radius}"),
                    });
                }
                let (res, arg) = body.spaces_at(&child(path, "body"))?;
                let (x, y, _) = trace_spaces(&res, &arg, path)?;
                Ok((y, x))
            }
        }
    }

    /// Checks wiring and linearity (at most one hole).
    pub fn check(&self) -> Result<()> {
        self.spaces()?;
        if self.hole_count() > 1 {
            return Err(Error::TypeError {
                path: "$".into(),
                detail: format!("context uses {} holes; at most one is allowed", self.hole_count()),
            });
        }
        Ok(())
    }

    /// Compiles a hole-free circuit to a single affine operator.
    pub fn compile(&self) -> Result<AffineOperator> {
        self.check()?;
        self.compile_at("$")
    }

    fn compile_at(&self, path: &str) -> Result<AffineOperator> {
        match self {
            CircuitExpr::Leaf(op) => Ok(op.clone()),
            CircuitExpr::Hole(_) => Err(Error::TypeError {
                path: path.to_string(),
                detail: "cannot compile an unfilled hole".into(),
            }),
            CircuitExpr::Series { first, second } => {
                let f = first.compile_at(&child(path, "first"))?;
                let s = second.compile_at(&child(path, "second"))?;
                f.compose(&s)
            }
            CircuitExpr::Parallel { left, right } => {
                let l = left.compile_at(&child(path, "left"))?;
                let r = right.compile_at(&child(path, "right"))?;
                tensor_operators(&l, &r, path)
            }
            CircuitExpr::Sum { left, right } => {
                let l = left.compile_at(&child(path, "left"))?;
                let r = right.compile_at(&child(path, "right"))?;
                direct_sum(&l, &r)
            }
            CircuitExpr::Trace { body, declared, .. } => {
                let b = body.compile_at(&child(path, "body"))?;
                compile_trace(&b, declared.as_ref(), path)
            }
        }
    }

    /// Evaluates a hole-free circuit on `v`, solving each trace by guarded
    /// iteration rather than by elimination.
    pub fn evaluate(&self, v: &[f64], tol: f64) -> Result<Vec<f64>> {
        self.check()?;
        self.evaluate_at(v, tol, "$")
    }

    fn evaluate_at(&self, v: &[f64], tol: f64, path: &str) -> Result<Vec<f64>> {
        match self {
            CircuitExpr::Leaf(op) => {
                if v.len() != op.out_space().size() {
                    return Err(Error::Shape(format!("argument of length {} at {path}", v.len())));
                }
                Ok(op.apply_raw(v))
            }
            CircuitExpr::Hole(_) => Err(Error::TypeError {
                path: path.to_string(),
                detail: "cannot evaluate an unfilled hole".into(),
            }),
            CircuitExpr::Series { first, second } => {
                let mid = second.evaluate_at(v, tol, &child(path, "second"))?;
                first.evaluate_at(&mid, tol, &child(path, "first"))
            }
            CircuitExpr::Parallel { .. } => Ok(self.compile_at(path)?.apply_raw(v)),
            CircuitExpr::Sum { left, right } => {
                let (_, l_out) = left.spaces_at(path)?;
                let (a, b) = v.split_at(l_out.size());
                let mut out = left.evaluate_at(a, tol, &child(path, "left"))?;
                out.extend(right.evaluate_at(b, tol, &child(path, "right"))?);
                Ok(out)
            }
            CircuitExpr::Trace {
                body,
                feedback_radius,
                declared,
            } => {
                let body_path = child(path, "body");
                let b = body.compile_at(&body_path)?;
                let blocks = TraceBlocks::split(&b, path)?;
                let exact = blocks.constants();
                let alpha = declared.map_or(exact.alpha, |d| d.alpha);
                let ny = blocks.ny;
                let failure: RefCell<Option<Error>> = RefCell::new(None);
                let run = |x: &[f64], z: &[f64]| -> Vec<f64> {
                    let mut arg = x.to_vec();
                    arg.extend_from_slice(z);
                    match body.evaluate_at(&arg, tol, &body_path) {
                        Ok(out) => out,
                        Err(e) => {
                            failure.borrow_mut().get_or_insert(e);
                            vec![f64::NAN; b.in_space().size()]
                        }
                    }
                };
                let f_out = |x: &[f64], z: &[f64]| run(x, z)[..ny].to_vec();
                let f_fb = |x: &[f64], z: &[f64]| run(x, z)[ny..].to_vec();
                let nz = b.out_space().size() - blocks.nx;
                let trace = GuardedTrace::new(f_out, f_fb, blocks.nx, nz, alpha, tol).map_err(|e| at_path(e, path))?;
                let radius = if feedback_radius.is_finite() { feedback_radius.max(1.0) } else { 1.0 };
                trace
                    .verify_guard(sup_norm(v).max(1.0), radius, 64, 0x5eed)
                    .map_err(|e| at_path(e, path))?;
                let result = trace.eval(v);
                if let Some(e) = failure.into_inner() {
                    return Err(e);
                }
                Ok(result?.output)
            }
        }
    }
}

fn at_path(e: Error, path: &str) -> Error {
    match e {
        Error::UnguardedTrace { detail, .. } => Error::UnguardedTrace {
            path: path.to_string(),
            detail,
        },
        other => other,
    }
}

/// Bellman tensor of two operators in discounted-stochastic form sharing a discount.
fn tensor_operators(l: &AffineOperator, r: &AffineOperator, path: &str) -> Result<AffineOperator> {
    let type_err = |detail: String| Error::TypeError {
        path: path.to_string(),
        detail,
    };
    let (g1, p1) = l
        .bellman_form()
        .ok_or_else(|| type_err("left factor is not a discounted stochastic operator".into()))?;
    let (g2, p2) = r
        .bellman_form()
        .ok_or_else(|| type_err("right factor is not a discounted stochastic operator".into()))?;
    if (g1 - g2).abs() > 1e-12 {
        return Err(type_err(format!("parallel factors discount differently ({g1} vs {g2})")));
    }
    let n2 = r.in_space().size();
    let mut offset = Vec::with_capacity(l.in_space().size() * n2);
    for a in l.offset() {
        for b in r.offset() {
            offset.push(a + b);
        }
    }
    let lin = p1.matrix().kron(p2.matrix()).scale(g1);
    AffineOperator::new(
        &FiniteSpace::product(l.in_space(), r.in_space()),
        &FiniteSpace::product(l.out_space(), r.out_space()),
        offset,
        lin,
        l.ball_in() + r.ball_in(),
        l.ball_out() + r.ball_out(),
    )
}

fn direct_sum(l: &AffineOperator, r: &AffineOperator) -> Result<AffineOperator> {
    let (n1, m1) = (l.in_space().size(), l.out_space().size());
    let (n2, m2) = (r.in_space().size(), r.out_space().size());
    let lin = Matrix::from_blocks(l.lin(), &Matrix::zeros(n1, m2), &Matrix::zeros(n2, m1), r.lin());
    let mut offset = l.offset().to_vec();
    offset.extend_from_slice(r.offset());
    AffineOperator::new(
        &FiniteSpace::sum(l.in_space(), r.in_space()),
        &FiniteSpace::sum(l.out_space(), r.out_space()),
        offset,
        lin,
        l.ball_in().max(r.ball_in()),
        l.ball_out().max(r.ball_out()),
    )
}

/// Eliminates the feedback block: `z* = (I - M_ZZ)^{-1} (b_Z + M_ZX x)`.
fn compile_trace(body: &AffineOperator, declared: Option<&TraceConstants>, path: &str) -> Result<AffineOperator> {
    let blocks = TraceBlocks::split(body, path)?;
    let exact = blocks.constants();
    if exact.alpha >= 1.0 {
        return Err(Error::UnguardedTrace {
            path: path.to_string(),
            detail: format!("feedback block has modulus {} >= 1", exact.alpha),
        });
    }
    if let Some(d) = declared {
        if d.alpha + 1e-12 < exact.alpha || d.alpha >= 1.0 {
            return Err(Error::UnguardedTrace {
                path: path.to_string(),
                detail: format!("declared feedback modulus {} but the body has {}", d.alpha, exact.alpha),
            });
        }
    }
    let nz = blocks.m_zz.rows();
    let nx = blocks.nx;
    let system = Matrix::identity(nz).sub(&blocks.m_zz);
    let mut rhs = Matrix::zeros(nz, 1 + nx);
    for i in 0..nz {
        rhs.set(i, 0, blocks.b_z[i]);
        rhs.row_mut(i)[1..].copy_from_slice(blocks.m_zx.row(i));
    }
    let w = system.solve(&rhs)?;
    let yz_w = blocks.m_yz.matmul(&w)?;
    let offset: Vec<f64> = (0..blocks.ny).map(|i| blocks.b_y[i] + yz_w.get(i, 0)).collect();
    let lin = blocks.m_yx.add(&yz_w.block(0, blocks.ny, 1, 1 + nx));
    AffineOperator::new(&blocks.y, &blocks.x, offset, lin, body.ball_in(), body.ball_out())
}

/// Replaces the hole by `filler`, checking type, Lipschitz constant and balls.
pub fn plug(c: &CircuitExpr, filler: &AffineOperator) -> Result<CircuitExpr> {
    c.check()?;
    if !c.has_hole() {
        return Err(Error::TypeError {
            path: "$".into(),
            detail: "context has no hole".into(),
        });
    }
    plug_at(c, filler, "$")
}

fn plug_at(c: &CircuitExpr, filler: &AffineOperator, path: &str) -> Result<CircuitExpr> {
    let rec = |e: &CircuitExpr, name: &str| -> Result<Box<CircuitExpr>> {
        Ok(Box::new(if e.has_hole() {
            plug_at(e, filler, &child(path, name))?
        } else {
            e.clone()
        }))
    };
    Ok(match c {
        CircuitExpr::Leaf(op) => CircuitExpr::Leaf(op.clone()),
        CircuitExpr::Hole(h) => {
            check_filler(h, filler, path)?;
            CircuitExpr::Leaf(filler.clone().with_balls(h.ball_in, h.ball_out)?)
        }
        CircuitExpr::Series { first, second } => CircuitExpr::Series {
            first: rec(first, "first")?,
            second: rec(second, "second")?,
        },
        CircuitExpr::Parallel { left, right } => CircuitExpr::Parallel {
            left: rec(left, "left")?,
            right: rec(right, "right")?,
        },
        CircuitExpr::Sum { left, right } => CircuitExpr::Sum {
            left: rec(left, "left")?,
            right: rec(right, "right")?,
        },
        CircuitExpr::Trace {
            body,
            feedback_radius,
            declared,
        } => CircuitExpr::Trace {
            body: rec(body, "body")?,
            feedback_radius: *feedback_radius,
            declared: *declared,
        },
    })
}

fn check_filler(h: &HoleSpec, t: &AffineOperator, path: &str) -> Result<()> {
    let type_err = |detail: String| Error::TypeError {
        path: path.to_string(),
        detail,
    };
    if t.in_space() != &h.in_space || t.out_space() != &h.out_space {
        return Err(type_err(format!(
            "hole expects {} <- {}, filler is {} <- {}",
            h.in_space,
            h.out_space,
            t.in_space(),
            t.out_space()
        )));
    }
    if t.lipschitz() > h.gamma + 1e-12 {
        return Err(type_err(format!(
            "filler Lipschitz constant {} exceeds the hole's {}",
            t.lipschitz(),
            h.gamma
        )));
    }
    let reach = sup_norm(t.offset()) + h.gamma * h.ball_out;
    if reach > h.ball_in + CERT_TOL {
        return Err(type_err(format!(
            "filler maps the {}-ball to radius {reach}, beyond the hole's {}",
            h.ball_out, h.ball_in
        )));
    }
    Ok(())
}

/// Per-node certificate record.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCert {
    pub path: String,
    pub kind: &'static str,
    /// Certified Lipschitz constant (contraction modulus) of the node.
    pub lipschitz: f64,
    /// Context gain, for nodes containing the hole.
    pub gain: Option<f64>,
    pub trace: Option<TraceConstants>,
    /// Bound on the argument fed to the node.
    pub arg_bound: f64,
    /// Bound on the node's result.
    pub result_bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// Context gain `L(C)`; `None` for hole-free circuits.
    pub gain: Option<f64>,
    /// Contraction modulus `kappa(C)`.
    pub kappa: f64,
    pub closed: bool,
    /// Bound on the argument reaching the hole, if any.
    pub hole_arg_bound: Option<f64>,
    /// Sup-norm bound on the closed-loop fixed point (closed circuits with kappa < 1).
    pub fixed_point_bound: Option<f64>,
    /// Nodes in pre-order.
    pub nodes: Vec<NodeCert>,
}

impl Certificate {
    pub fn node(&self, path: &str) -> Option<&NodeCert> {
        self.nodes.iter().find(|n| n.path == path)
    }

    /// `L / (1 - kappa)`, the congruence factor.
    pub fn congruence_factor(&self) -> Option<f64> {
        self.gain.map(|l| l / (1.0 - self.kappa))
    }
}

/// Certificate of a circuit; traces around the hole need declared constants.
pub fn certify(c: &CircuitExpr) -> Result<Certificate> {
    certify_with(c, &[])
}

/// Certificate where constants of traces around the hole are derived from the
/// given fillers (pairwise maximum) when not declared.
pub fn certify_with(c: &CircuitExpr, fillers: &[&AffineOperator]) -> Result<Certificate> {
    c.check()?;
    let plugged = fillers.iter().map(|f| plug(c, f)).collect::<Result<Vec<_>>>()?;
    let plugged_refs: Vec<&CircuitExpr> = plugged.iter().collect();
    let mut nodes = Vec::new();
    let stats = constants_at(c, &plugged_refs, "$", &mut nodes)?;
    let (res, arg) = c.spaces()?;
    let closed = res == arg;
    let lip: HashMap<String, f64> = nodes.iter().map(|n| (n.path.clone(), n.lipschitz)).collect();
    let mut records = HashMap::new();
    let mut fixed_point_bound = None;
    if closed && stats.lipschitz < 1.0 {
        let fp = bound_fixpoint(arg.size(), "$", |rho| propagate(c, "$", rho, &lip, false, &mut HashMap::new()))?;
        fixed_point_bound = Some(fp.iter().copied().fold(0.0, f64::max));
        propagate(c, "$", &fp, &lip, true, &mut records)?;
    } else {
        let start = vec![arg_ball(c); arg.size()];
        propagate(c, "$", &start, &lip, true, &mut records)?;
    }
    let mut hole_arg_bound = None;
    for n in nodes.iter_mut() {
        if let Some(&(a, r)) = records.get(&n.path) {
            n.arg_bound = a;
            n.result_bound = r;
            if n.kind == "hole" {
                hole_arg_bound = Some(a);
            }
        }
    }
    Ok(Certificate {
        gain: stats.gain,
        kappa: stats.lipschitz,
        closed,
        hole_arg_bound,
        fixed_point_bound,
        nodes,
    })
}

struct NodeStats {
    lipschitz: f64,
    gain: Option<f64>,
}

fn children_of<'a>(plugged: &[&'a CircuitExpr], pick: impl Fn(&'a CircuitExpr) -> &'a CircuitExpr) -> Vec<&'a CircuitExpr> {
    plugged.iter().map(|p| pick(p)).collect()
}

fn constants_at(c: &CircuitExpr, plugged: &[&CircuitExpr], path: &str, out: &mut Vec<NodeCert>) -> Result<NodeStats> {
    let slot = out.len();
    out.push(NodeCert {
        path: path.to_string(),
        kind: c.kind(),
        lipschitz: 0.0,
        gain: None,
        trace: None,
        arg_bound: 0.0,
        result_bound: 0.0,
    });
    let mut trace_consts = None;
    let stats = match c {
        CircuitExpr::Leaf(op) => NodeStats {
            lipschitz: op.lipschitz(),
            gain: None,
        },
        CircuitExpr::Hole(h) => NodeStats {
            lipschitz: h.gamma,
            gain: Some(1.0),
        },
        CircuitExpr::Series { first, second } => {
            let pf = children_of(plugged, |p| match p {
                CircuitExpr::Series { first, .. } => first,
                _ => unreachable!("plugged tree mirrors the context"),
            });
            let ps = children_of(plugged, |p| match p {
                CircuitExpr::Series { second, .. } => second,
                _ => unreachable!("plugged tree mirrors the context"),
            });
            let f = constants_at(first, &pf, &child(path, "first"), out)?;
            let s = constants_at(second, &ps, &child(path, "second"), out)?;
            let gain = match (f.gain, s.gain) {
                (Some(lf), None) => Some(lf),
                (None, Some(ls)) => Some(f.lipschitz * ls),
                _ => None,
            };
            NodeStats {
                lipschitz: f.lipschitz * s.lipschitz,
                gain,
            }
        }
        CircuitExpr::Parallel { left, right } | CircuitExpr::Sum { left, right } => {
            let pl = children_of(plugged, |p| match p {
                CircuitExpr::Parallel { left, .. } | CircuitExpr::Sum { left, .. } => left,
                _ => unreachable!("plugged tree mirrors the context"),
            });
            let pr = children_of(plugged, |p| match p {
                CircuitExpr::Parallel { right, .. } | CircuitExpr::Sum { right, .. } => right,
                _ => unreachable!("plugged tree mirrors the context"),
            });
            let l = constants_at(left, &pl, &child(path, "left"), out)?;
            let r = constants_at(right, &pr, &child(path, "right"), out)?;
            NodeStats {
                lipschitz: l.lipschitz.max(r.lipschitz),
                gain: l.gain.or(r.gain),
            }
        }
        CircuitExpr::Trace { body, declared, .. } => {
            let pb = children_of(plugged, |p| match p {
                CircuitExpr::Trace { body, .. } => body,
                _ => unreachable!("plugged tree mirrors the context"),
            });
            let b = constants_at(body, &pb, &child(path, "body"), out)?;
            let consts = if body.has_hole() {
                match declared {
                    Some(d) => *d,
                    None if !pb.is_empty() => {
                        let mut acc: Option<TraceConstants> = None;
                        for p in &pb {
                            let k = TraceConstants::of_body(&p.compile_at(&child(path, "body"))?)?;
                            acc = Some(acc.map_or(k, |a| a.max(&k)));
                        }
                        acc.expect("at least one filler")
                    }
                    None => {
                        return Err(Error::UncertifiableTrace {
                            path: path.to_string(),
                            detail: "trace around the hole needs declared constants or fillers".into(),
                        })
                    }
                }
            } else {
                let exact = TraceConstants::of_body(&body.compile_at(&child(path, "body"))?)?;
                match declared {
                    Some(d) if !d.dominates(&exact) => {
                        return Err(Error::UncertifiableTrace {
                            path: path.to_string(),
                            detail: format!("declared constants {d:?} understate the body's {exact:?}"),
                        })
                    }
                    Some(d) => *d,
                    None => exact,
                }
            };
            if consts.alpha >= 1.0 {
                return Err(Error::UnguardedTrace {
                    path: path.to_string(),
                    detail: format!("feedback modulus {} >= 1", consts.alpha),
                });
            }
            let ext = consts.external_modulus();
            if ext >= 1.0 {
                return Err(Error::UncertifiableTrace {
                    path: path.to_string(),
                    detail: format!("external modulus {ext} >= 1"),
                });
            }
            trace_consts = Some(consts);
            NodeStats {
                lipschitz: ext,
                gain: b.gain.map(|l| consts.amplification() * l),
            }
        }
    };
    let rec = &mut out[slot];
    rec.lipschitz = stats.lipschitz;
    rec.gain = stats.gain;
    rec.trace = trace_consts;
    Ok(stats)
}

/// Structural radius of the argument ball of an open circuit.
pub fn arg_ball(c: &CircuitExpr) -> f64 {
    match c {
        CircuitExpr::Leaf(op) => op.ball_out(),
        CircuitExpr::Hole(h) => h.ball_out,
        CircuitExpr::Series { second, .. } => arg_ball(second),
        CircuitExpr::Parallel { left, right } | CircuitExpr::Sum { left, right } => arg_ball(left).max(arg_ball(right)),
        CircuitExpr::Trace { body, .. } => arg_ball(body),
    }
}

/// Least fixed point of a monotone bound map, from zero, inflated by the
/// a-posteriori tail estimate.
fn bound_fixpoint(n: usize, path: &str, mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let mut rho = vec![0.0; n];
    let mut prev_incr = f64::INFINITY;
    let mut ratio = 0.0_f64;
    for _ in 0..1_000_000 {
        let next = f(&rho)?;
        let incr = sup_dist(&next, &rho);
        let scale = 1.0 + sup_norm(&next);
        if prev_incr.is_finite() && prev_incr > 0.0 {
            ratio = ratio.max(incr / prev_incr);
        }
        rho = next;
        if incr <= 1e-14 * scale {
            let q = ratio.min(0.999_999);
            let slack = incr * q / (1.0 - q);
            return Ok(rho.iter().map(|r| r + slack).collect());
        }
        if !incr.is_finite() || scale > 1e15 {
            break;
        }
        prev_incr = incr;
    }
    Err(Error::UncertifiableTrace {
        path: path.to_string(),
        detail: "no bounded invariant ball: bound iteration diverges".into(),
    })
}

/// Elementwise bound on the node's result given `|arg| <= rho`; with `checks`
/// set, records bounds and verifies hole and feedback balls.
fn propagate(
    c: &CircuitExpr,
    path: &str,
    rho: &[f64],
    lip: &HashMap<String, f64>,
    checks: bool,
    records: &mut HashMap<String, (f64, f64)>,
) -> Result<Vec<f64>> {
    let max_rho = rho.iter().copied().fold(0.0, f64::max);
    let out = match c {
        CircuitExpr::Leaf(op) => {
            let m = op.lin();
            (0..m.rows())
                .map(|i| op.offset()[i].abs() + m.row(i).iter().zip(rho).map(|(a, r)| a.abs() * r).sum::<f64>())
                .collect()
        }
        CircuitExpr::Hole(h) => {
            if checks && max_rho > h.ball_out + CERT_TOL {
                return Err(Error::EdgeBallViolation {
                    path: path.to_string(),
                    bound: max_rho,
                    radius: h.ball_out,
                });
            }
            let base = (h.ball_in - h.gamma * h.ball_out).max(0.0);
            vec![base + h.gamma * max_rho; h.in_space.size()]
        }
        CircuitExpr::Series { first, second } => {
            let mid = propagate(second, &child(path, "second"), rho, lip, checks, records)?;
            propagate(first, &child(path, "first"), &mid, lip, checks, records)?
        }
        CircuitExpr::Parallel { left, right } => {
            let (l_in, l_out) = left.spaces()?;
            let (r_in, r_out) = right.spaces()?;
            let l0 = propagate(left, &child(path, "left"), &vec![0.0; l_out.size()], lip, false, records)?;
            let r0 = propagate(right, &child(path, "right"), &vec![0.0; r_out.size()], lip, false, records)?;
            // Factors see the full product value; hole checks use its sup norm.
            propagate(left, &child(path, "left"), &vec![max_rho; l_out.size()], lip, checks, records)?;
            propagate(right, &child(path, "right"), &vec![max_rho; r_out.size()], lip, checks, records)?;
            let g = lip.get(path).copied().unwrap_or(1.0);
            let base = l0.iter().copied().fold(0.0, f64::max) + r0.iter().copied().fold(0.0, f64::max);
            vec![base + g * max_rho; l_in.size() * r_in.size()]
        }
        CircuitExpr::Sum { left, right } => {
            let (_, l_out) = left.spaces()?;
            let (a, b) = rho.split_at(l_out.size());
            let mut out = propagate(left, &child(path, "left"), a, lip, checks, records)?;
            out.extend(propagate(right, &child(path, "right"), b, lip, checks, records)?);
            out
        }
        CircuitExpr::Trace {
            body, feedback_radius, ..
        } => {
            let body_path = child(path, "body");
            let (res, arg) = body.spaces()?;
            let (x, y, z) = trace_spaces(&res, &arg, path)?;
            let rho_x = rho.to_vec();
            let ny = y.size();
            debug_assert_eq!(rho_x.len(), x.size());
            let rho_z = bound_fixpoint(z.size(), path, |rz| {
                let mut a = rho_x.clone();
                a.extend_from_slice(rz);
                Ok(propagate(body, &body_path, &a, lip, false, &mut HashMap::new())?[ny..].to_vec())
            })?;
            let zmax = rho_z.iter().copied().fold(0.0, f64::max);
            if checks && zmax > feedback_radius + CERT_TOL {
                return Err(Error::EdgeBallViolation {
                    path: path.to_string(),
                    bound: zmax,
                    radius: *feedback_radius,
                });
            }
            let mut a = rho_x;
            a.extend_from_slice(&rho_z);
            propagate(body, &body_path, &a, lip, checks, records)?[..ny].to_vec()
        }
    };
    if checks {
        let res_max = out.iter().copied().fold(0.0, f64::max);
        records.insert(path.to_string(), (max_rho, res_max));
    }
    Ok(out)
}

/// Congruence audit for one closed context and two fillers.
#[derive(Debug, Clone, PartialEq)]
pub struct CongruenceReport {
    pub gain: f64,
    pub kappa: f64,
    /// Exact filler distance on the hole's argument ball.
    pub eps: f64,
    pub bound: f64,
    pub measured: f64,
    pub pass: bool,
}

impl CongruenceReport {
    pub fn slack(&self) -> f64 {
        self.bound - self.measured
    }
}

/// Certified `L / (1 - kappa) * eps` against the measured gap between the two
/// closed-loop fixed points.
pub fn congruence_bound(c: &CircuitExpr, t1: &AffineOperator, t2: &AffineOperator) -> Result<CongruenceReport> {
    let hole = c
        .hole_spec()
        .cloned()
        .ok_or_else(|| Error::TypeError {
            path: "$".into(),
            detail: "context has no hole".into(),
        })?;
    let cert = certify_with(c, &[t1, t2])?;
    if !cert.closed {
        return Err(Error::TypeError {
            path: "$".into(),
            detail: "congruence needs a closed context".into(),
        });
    }
    if cert.kappa >= 1.0 {
        return Err(Error::NonContraction { modulus: cert.kappa });
    }
    let gain = cert.gain.expect("context has a hole");
    let eps = t1.distance(t2, hole.ball_out)?;
    let v1 = solve_affine_linear(&plug(c, t1)?.compile()?)?;
    let v2 = solve_affine_linear(&plug(c, t2)?.compile()?)?;
    let measured = sup_dist(v1.values(), v2.values());
    let bound = gain / (1.0 - cert.kappa) * eps;
    Ok(CongruenceReport {
        gain,
        kappa: cert.kappa,
        eps,
        bound,
        measured,
        pass: measured <= bound + CERT_TOL,
    })
}

/// For open contexts: certified `L * eps` against the exact distance of the
/// two compiled operators on the context's argument ball.
pub fn operator_congruence(c: &CircuitExpr, t1: &AffineOperator, t2: &AffineOperator) -> Result<CongruenceReport> {
    let hole = c.hole_spec().cloned().ok_or_else(|| Error::TypeError {
        path: "$".into(),
        detail: "context has no hole".into(),
    })?;
    let cert = certify_with(c, &[t1, t2])?;
    let gain = cert.gain.expect("context has a hole");
    let eps = t1.distance(t2, hole.ball_out)?;
    let radius = arg_ball(c);
    let measured = plug(c, t1)?.compile()?.distance(&plug(c, t2)?.compile()?, radius)?;
    let bound = gain * eps;
    Ok(CongruenceReport {
        gain,
        kappa: cert.kappa,
        eps,
        bound,
        measured,
        pass: measured <= bound + CERT_TOL,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityReport {
    pub distance: f64,
    pub bound: f64,
    pub measured: f64,
    pub pass: bool,
}

/// `||V1* - V2*|| <= d(T1, T2) / (1 - kappa)` for two closed kappa-contractions,
/// with the distance taken on the shared ball.
pub fn fixed_point_stability(t1: &AffineOperator, t2: &AffineOperator, kappa: f64) -> Result<StabilityReport> {
    for t in [t1, t2] {
        if t.lipschitz() > kappa + 1e-12 || kappa >= 1.0 {
            return Err(Error::NonContraction {
                modulus: t.lipschitz().max(kappa),
            });
        }
    }
    let v1 = solve_affine_linear(t1)?;
    let v2 = solve_affine_linear(t2)?;
    let radius = t1.ball_out().max(t2.ball_out());
    let norm = v1.sup_norm().max(v2.sup_norm());
    if norm > radius + CERT_TOL {
        return Err(Error::BallViolation { norm, radius });
    }
    let distance = t1.distance(t2, radius)?;
    let measured = sup_dist(v1.values(), v2.values());
    let bound = distance / (1.0 - kappa);
    Ok(StabilityReport {
        distance,
        bound,
        measured,
        pass: measured <= bound + CERT_TOL,
    })
}

/// `B(S) -> B(S + S)`, `v |-> (v, v)`.
pub fn duplicate(space: &FiniteSpace, ball: f64) -> AffineOperator {
    let n = space.size();
    let lin = Matrix::from_blocks(&Matrix::identity(n), &Matrix::zeros(n, 0), &Matrix::identity(n), &Matrix::zeros(n, 0));
    AffineOperator::linear(&FiniteSpace::sum(space, space), space, lin, ball).expect("shapes agree")
}

/// `B(A + B) -> B(B)`, projection on the second summand (`second = true`) or the first.
pub fn projection(a: &FiniteSpace, b: &FiniteSpace, second: bool, ball: f64) -> AffineOperator {
    let (na, nb) = (a.size(), b.size());
    let (rows, lin) = if second {
        (b, Matrix::from_blocks(&Matrix::zeros(nb, na), &Matrix::identity(nb), &Matrix::zeros(0, na), &Matrix::zeros(0, nb)))
    } else {
        (a, Matrix::from_blocks(&Matrix::identity(na), &Matrix::zeros(na, nb), &Matrix::zeros(0, na), &Matrix::zeros(0, nb)))
    };
    AffineOperator::linear(rows, &FiniteSpace::sum(a, b), lin, ball).expect("shapes agree")
}

/// The context that closes the hole on itself: `Tr^Z(dup . [.] . proj_Z)`,
/// whose value is the fixed point of the filler.
pub fn identity_context(hole: HoleSpec) -> CircuitExpr {
    let s = hole.in_space.clone();
    let body = CircuitExpr::series(
        CircuitExpr::leaf(duplicate(&s, hole.ball_in)),
        CircuitExpr::series(CircuitExpr::hole(hole.clone()), CircuitExpr::leaf(projection(&s, &s, true, hole.ball_out))),
    );
    CircuitExpr::trace(body, hole.ball_out)
}
