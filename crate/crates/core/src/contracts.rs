//! Contracts valued in the quantale `([0, inf], +, 0, sup)` with discount
//! `q |-> gamma q`: additive contract transformers, Kleene least fixed
//! points, pre-fixed-point certificates and lifting through wiring.

use std::cmp::Ordering;
use std::fmt;

use crate::error::{Error, Result};
use crate::kernel::{tensor_kernels, Kernel};
use crate::space::FiniteSpace;

/// Slack on finite entries in obligation checks.
pub const OBLIGATION_TOL: f64 = 1e-12;

/// An element of `[0, inf]` with absorbing infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ext {
    Fin(f64),
    Inf,
}

impl Ext {
    pub fn new(v: f64) -> Result<Self> {
        if v.is_nan() || v < 0.0 {
            Err(Error::InvalidValue(format!("contract value {v} is not in [0, inf]")))
        } else if v.is_infinite() {
            Ok(Ext::Inf)
        } else {
            Ok(Ext::Fin(v))
        }
    }

    pub fn is_inf(self) -> bool {
        matches!(self, Ext::Inf)
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            Ext::Fin(v) => Some(v),
            Ext::Inf => None,
        }
    }

    pub fn add(self, other: Ext) -> Ext {
        match (self, other) {
            (Ext::Fin(a), Ext::Fin(b)) => Ext::Fin(a + b),
            _ => Ext::Inf,
        }
    }

    /// `c * self` for a finite `c > 0`; `c * inf = inf`.
    pub fn scale(self, c: f64) -> Ext {
        match self {
            Ext::Fin(a) => Ext::Fin(c * a),
            Ext::Inf => Ext::Inf,
        }
    }

    /// `self <= other + OBLIGATION_TOL` on finite entries.
    pub fn le_tol(self, other: Ext) -> bool {
        match (self, other) {
            (_, Ext::Inf) => true,
            (Ext::Inf, Ext::Fin(_)) => false,
            (Ext::Fin(a), Ext::Fin(b)) => a <= b + OBLIGATION_TOL,
        }
    }

    pub fn max(self, other: Ext) -> Ext {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl PartialOrd for Ext {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Ext::Inf, Ext::Inf) => Some(Ordering::Equal),
            (Ext::Inf, Ext::Fin(_)) => Some(Ordering::Greater),
            (Ext::Fin(_), Ext::Inf) => Some(Ordering::Less),
            (Ext::Fin(a), Ext::Fin(b)) => a.partial_cmp(b),
        }
    }
}

impl fmt::Display for Ext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ext::Fin(v) => write!(f, "{v}"),
            Ext::Inf => write!(f, "inf"),
        }
    }
}

/// Pointwise contract `S -> [0, inf]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractFn {
    space: FiniteSpace,
    values: Vec<Ext>,
}

impl ContractFn {
    pub fn new(space: &FiniteSpace, values: Vec<Ext>) -> Result<Self> {
        if values.len() != space.size() {
            return Err(Error::InvalidValue(format!("{} contract entries for {space}", values.len())));
        }
        if values.iter().any(|v| matches!(v, Ext::Fin(x) if x.is_nan() || *x < 0.0)) {
            return Err(Error::InvalidValue("contract entries must lie in [0, inf]".into()));
        }
        Ok(Self {
            space: space.clone(),
            values,
        })
    }

    /// From floats, mapping `f64::INFINITY` to `inf`.
    pub fn from_f64(space: &FiniteSpace, values: &[f64]) -> Result<Self> {
        Self::new(space, values.iter().map(|&v| Ext::new(v)).collect::<Result<_>>()?)
    }

    pub fn bottom(space: &FiniteSpace) -> Self {
        Self::constant(space, Ext::Fin(0.0))
    }

    pub fn constant(space: &FiniteSpace, v: Ext) -> Self {
        Self {
            space: space.clone(),
            values: vec![v; space.size()],
        }
    }

    pub fn space(&self) -> &FiniteSpace {
        &self.space
    }
    pub fn values(&self) -> &[Ext] {
        &self.values
    }
    pub fn get(&self, i: usize) -> Ext {
        self.values[i]
    }

    /// Finite view; `None` if any entry is infinite.
    pub fn to_finite(&self) -> Option<Vec<f64>> {
        self.values.iter().map(|v| v.finite()).collect()
    }

    /// First state where `self > other` (beyond slack), if any.
    pub fn first_violation(&self, other: &ContractFn) -> Option<usize> {
        self.values.iter().zip(&other.values).position(|(a, b)| !a.le_tol(*b))
    }

    pub fn le(&self, other: &ContractFn) -> bool {
        self.first_violation(other).is_none()
    }

    /// Separable product contract `(x1, x2) |-> c1(x1) + c2(x2)`.
    pub fn tensor(c1: &ContractFn, c2: &ContractFn) -> ContractFn {
        let space = FiniteSpace::product(&c1.space, &c2.space);
        let values = c1
            .values
            .iter()
            .flat_map(|a| c2.values.iter().map(move |b| a.add(*b)))
            .collect();
        ContractFn { space, values }
    }

    pub fn render(&self) -> Vec<String> {
        self.values.iter().map(|v| v.to_string()).collect()
    }
}

/// `(T C)(x) = c(x) + gamma sum_y K(y|x) C(y)`, typed `V(Y) -> V(X)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContractTransformer {
    cost: ContractFn,
    gamma: f64,
    trans: Kernel,
}

impl ContractTransformer {
    pub fn new(cost: ContractFn, gamma: f64, trans: Kernel) -> Result<Self> {
        crate::component::check_discount(gamma)?;
        trans.from_space().ensure_eq(cost.space())?;
        Ok(Self { cost, gamma, trans })
    }

    pub fn in_space(&self) -> &FiniteSpace {
        self.trans.from_space()
    }
    pub fn out_space(&self) -> &FiniteSpace {
        self.trans.to_space()
    }
    pub fn cost(&self) -> &ContractFn {
        &self.cost
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn trans(&self) -> &Kernel {
        &self.trans
    }
    pub fn is_closed(&self) -> bool {
        self.in_space() == self.out_space()
    }

    /// Largest finite cost entry.
    fn max_finite_cost(&self) -> f64 {
        self.cost.values.iter().filter_map(|v| v.finite()).fold(0.0, f64::max)
    }

    /// Series composition `T1 . T2`: cost `c1 + gamma P1 c2`, discount
    /// `gamma^2`, kernel `P1 P2`. Both must share the discount.
    pub fn series(t1: &ContractTransformer, t2: &ContractTransformer) -> Result<ContractTransformer> {
        if t1.gamma != t2.gamma {
            return Err(Error::InvalidComponent("series contracts need a common discount".into()));
        }
        let cost = apply_contract(t1, &t2.cost)?;
        let trans = crate::kernel::compose_kernels(&t1.trans, &t2.trans)?;
        ContractTransformer::new(cost, t1.gamma * t2.gamma, trans)
    }

    /// Tensor transformer with additive costs on the product space.
    pub fn tensor(t1: &ContractTransformer, t2: &ContractTransformer) -> Result<ContractTransformer> {
        if t1.gamma != t2.gamma {
            return Err(Error::InvalidComponent("parallel contracts need a common discount".into()));
        }
        ContractTransformer::new(
            ContractFn::tensor(&t1.cost, &t2.cost),
            t1.gamma,
            tensor_kernels(&t1.trans, &t2.trans),
        )
    }
}

/// Applies the transformer with infinity-absorbing arithmetic. Terms with
/// zero probability are ignored.
pub fn apply_contract(t: &ContractTransformer, c: &ContractFn) -> Result<ContractFn> {
    t.out_space().ensure_eq(c.space())?;
    let values = (0..t.in_space().size())
        .map(|x| {
            let mut acc = Ext::Fin(0.0);
            for (y, &p) in t.trans.row(x).iter().enumerate() {
                if p > 0.0 {
                    acc = acc.add(c.values[y].scale(p));
                }
            }
            t.cost.values[x].add(acc.scale(t.gamma))
        })
        .collect();
    Ok(ContractFn {
        space: t.in_space().clone(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KleeneRun {
    pub lfp: ContractFn,
    pub iterations: usize,
}

/// `lfp(T) = sup_n T^n(bot)`. The chain is checked to increase at every
/// step; entries above `10 max_cost / (1 - gamma)` are declared infinite.
/// Stops when the increment on finite entries is at most `tol (1 - gamma)`.
pub fn kleene_lfp(t: &ContractTransformer, tol: f64, max_iter: usize) -> Result<KleeneRun> {
    if !t.is_closed() {
        return Err(Error::TypeMismatch("least fixed point of an open contract transformer".into()));
    }
    let ceiling = 10.0 * t.max_finite_cost() / (1.0 - t.gamma);
    kleene_chain(
        |c| apply_contract(t, c),
        ContractFn::bottom(t.in_space()),
        t.gamma,
        ceiling,
        tol,
        max_iter,
    )
}

/// Kleene iteration of a monotone map from `start` with divergence ceiling.
fn kleene_chain(
    mut f: impl FnMut(&ContractFn) -> Result<ContractFn>,
    start: ContractFn,
    gamma: f64,
    ceiling: f64,
    tol: f64,
    max_iter: usize,
) -> Result<KleeneRun> {
    let mut c = start;
    for k in 1..=max_iter {
        let mut next = f(&c)?;
        let mut incr = 0.0_f64;
        for (i, (old, new)) in c.values.iter().zip(next.values.iter_mut()).enumerate() {
            if !old.le_tol(*new) {
                return Err(Error::NonMonotoneChain { state: i });
            }
            if let Ext::Fin(v) = *new {
                if v > ceiling {
                    *new = Ext::Inf;
                } else if let Ext::Fin(o) = *old {
                    incr = incr.max(v - o);
                }
            }
        }
        c = next;
        if incr <= tol * (1.0 - gamma) {
            return Ok(KleeneRun { lfp: c, iterations: k });
        }
    }
    Err(Error::MaxIterExceeded {
        iterations: max_iter,
        partial: c.render(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixedCheck {
    pub holds: bool,
    /// A state with `T(C)(x) > C(x)` when the check fails.
    pub witness: Option<usize>,
    /// `lfp <= C` pointwise (only evaluated when the check holds).
    pub lfp_below: Option<bool>,
}

/// `T(C) <= C` pointwise; when it holds, also confirms `lfp(T) <= C`.
pub fn check_prefixed(t: &ContractTransformer, c: &ContractFn) -> Result<PrefixedCheck> {
    let tc = apply_contract(t, c)?;
    match tc.first_violation(c) {
        Some(x) => Ok(PrefixedCheck {
            holds: false,
            witness: Some(x),
            lfp_below: None,
        }),
        None => {
            let lfp = kleene_lfp(t, 1e-12, 1_000_000)?.lfp;
            Ok(PrefixedCheck {
                holds: true,
                witness: None,
                lfp_below: Some(lfp.le(c)),
            })
        }
    }
}

fn obligation(name: &str, lhs: &ContractFn, rhs: &ContractFn) -> Result<()> {
    match lhs.first_violation(rhs) {
        None => Ok(()),
        Some(x) => Err(Error::ObligationFailed {
            obligation: name.to_string(),
            state: x,
            lhs: lhs.get(x).to_string(),
            rhs: rhs.get(x).to_string(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesVerdict {
    /// `(T1 . T2)(C_Z)`, the composed guarantee.
    pub composed: ContractFn,
    /// `composed <= C_X`.
    pub composed_holds: bool,
    /// Closed-loop least fixed point of the macro operator when `X = Z` and `C_X = C_Z`.
    pub closed_loop_lfp: Option<ContractFn>,
    pub closed_loop_holds: Option<bool>,
}

impl SeriesVerdict {
    pub fn sound(&self) -> bool {
        self.composed_holds && self.closed_loop_holds.unwrap_or(true)
    }
}

/// Assume-guarantee for `T1 : V(Y) -> V(X)` after `T2 : V(Z) -> V(Y)`.
pub fn lift_series(
    t1: &ContractTransformer,
    t2: &ContractTransformer,
    cz: &ContractFn,
    cy: &ContractFn,
    cx: &ContractFn,
) -> Result<SeriesVerdict> {
    obligation("T2(C_Z) <= C_Y", &apply_contract(t2, cz)?, cy)?;
    obligation("T1(C_Y) <= C_X", &apply_contract(t1, cy)?, cx)?;
    let composed = apply_contract(t1, &apply_contract(t2, cz)?)?;
    let composed_holds = composed.le(cx);
    let (mut closed_loop_lfp, mut closed_loop_holds) = (None, None);
    if t1.in_space() == t2.out_space() && cx == cz {
        let macro_op = ContractTransformer::series(t1, t2)?;
        let check = check_prefixed(&macro_op, cx)?;
        let lfp = kleene_lfp(&macro_op, 1e-12, 1_000_000)?.lfp;
        closed_loop_holds = Some(check.holds && lfp.le(cx));
        closed_loop_lfp = Some(lfp);
    }
    Ok(SeriesVerdict {
        composed,
        composed_holds,
        closed_loop_lfp,
        closed_loop_holds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelVerdict {
    pub tensored: ContractFn,
    pub bound: ContractFn,
    pub holds: bool,
}

/// Separable product contracts: each side's `T_i(C_Yi) <= C_Xi` implies
/// `(T1 x T2)(C_Y1 + C_Y2) <= C_X1 + C_X2`.
pub fn lift_parallel(
    t1: &ContractTransformer,
    t2: &ContractTransformer,
    cy1: &ContractFn,
    cx1: &ContractFn,
    cy2: &ContractFn,
    cx2: &ContractFn,
) -> Result<ParallelVerdict> {
    obligation("T1(C_Y1) <= C_X1", &apply_contract(t1, cy1)?, cx1)?;
    obligation("T2(C_Y2) <= C_X2", &apply_contract(t2, cy2)?, cx2)?;
    let tensor = ContractTransformer::tensor(t1, t2)?;
    let tensored = apply_contract(&tensor, &ContractFn::tensor(cy1, cy2))?;
    let bound = ContractFn::tensor(cx1, cx2);
    let holds = tensored.le(&bound);
    Ok(ParallelVerdict { tensored, bound, holds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceVerdict {
    /// `Z* = lfp(z |-> F_Z(C_Y, z))`.
    pub feedback: ContractFn,
    /// `F_X(C_Y, Z*)`.
    pub traced: ContractFn,
    pub iterations: usize,
    /// `Z* <= C_Z` and `traced <= C_X`.
    pub holds: bool,
}

/// Least-fixed-point trace. `f_x : V(Y) x V(Z) -> V(X)` and
/// `f_z : V(Y) x V(Z) -> V(Z)` must be monotone; `gamma_z` is the discount
/// used in the stopping rule and `ceiling` the divergence cut-off.
#[allow(clippy::too_many_arguments)]
pub fn lfp_trace(
    f_x: impl Fn(&ContractFn, &ContractFn) -> Result<ContractFn>,
    f_z: impl Fn(&ContractFn, &ContractFn) -> Result<ContractFn>,
    z_space: &FiniteSpace,
    c_y: &ContractFn,
    c_x: &ContractFn,
    c_z: &ContractFn,
    gamma_z: f64,
    ceiling: f64,
) -> Result<TraceVerdict> {
    obligation("F_Z(C_Y, C_Z) <= C_Z", &f_z(c_y, c_z)?, c_z)?;
    obligation("F_X(C_Y, C_Z) <= C_X", &f_x(c_y, c_z)?, c_x)?;
    let run = kleene_chain(|z| f_z(c_y, z), ContractFn::bottom(z_space), gamma_z, ceiling, 1e-12, 1_000_000)?;
    let traced = f_x(c_y, &run.lfp)?;
    let holds = run.lfp.le(c_z) && traced.le(c_x);
    Ok(TraceVerdict {
        feedback: run.lfp,
        traced,
        iterations: run.iterations,
        holds,
    })
}

/// Splits a contract on `A + B` into its summands.
pub fn split_sum(c: &ContractFn) -> Result<(ContractFn, ContractFn)> {
    let (a, b) = c
        .space()
        .summands()
        .ok_or_else(|| Error::TypeMismatch(format!("{} is not a sum space", c.space())))?;
    let (va, vb) = c.values.split_at(a.size());
    Ok((ContractFn::new(a, va.to_vec())?, ContractFn::new(b, vb.to_vec())?))
}

/// Joins contracts on `A` and `B` into one on `A + B`.
pub fn join_sum(a: &ContractFn, b: &ContractFn) -> ContractFn {
    let mut values = a.values.clone();
    values.extend_from_slice(&b.values);
    ContractFn {
        space: FiniteSpace::sum(&a.space, &b.space),
        values,
    }
}

/// Trace of a contract transformer `V(Y + Z) -> V(X + Z)`: feeds back `Z`.
pub fn lfp_trace_transformer(
    t: &ContractTransformer,
    c_y: &ContractFn,
    c_x: &ContractFn,
    c_z: &ContractFn,
) -> Result<TraceVerdict> {
    let (_, z) = t
        .out_space()
        .summands()
        .ok_or_else(|| Error::TypeMismatch("trace needs a sum argument space".into()))?;
    let z = z.clone();
    let eval = |y: &ContractFn, zc: &ContractFn| apply_contract(t, &join_sum(y, zc)).and_then(|c| split_sum(&c));
    let ceiling = 10.0 * (t.max_finite_cost() + c_y.values.iter().filter_map(|v| v.finite()).fold(0.0, f64::max)) / (1.0 - t.gamma);
    lfp_trace(
        |y, zc| eval(y, zc).map(|p| p.0),
        |y, zc| eval(y, zc).map(|p| p.1),
        &z,
        c_y,
        c_x,
        c_z,
        t.gamma,
        ceiling,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> FiniteSpace {
        FiniteSpace::indexed("S", "s", 2).unwrap()
    }

    fn unit_cost(gamma: f64) -> ContractTransformer {
        let s = two();
        ContractTransformer::new(
            ContractFn::constant(&s, Ext::Fin(1.0)),
            gamma,
            Kernel::new(&s, &s, vec![vec![0.3, 0.7], vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn infinity_absorbs() {
        let t = unit_cost(0.5);
        let c = apply_contract(&t, &ContractFn::constant(&two(), Ext::Inf)).unwrap();
        assert!(c.values().iter().all(|v| v.is_inf()));
        assert_eq!(Ext::Inf.add(Ext::Fin(1.0)), Ext::Inf);
        assert!(Ext::Fin(1e300) < Ext::Inf);
    }

    #[test]
    fn unit_cost_lfp_is_two() {
        let run = kleene_lfp(&unit_cost(0.5), 1e-12, 10_000).unwrap();
        for v in run.lfp.values() {
            assert!((v.finite().unwrap() - 2.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn prefixed_boundary_and_witness() {
        let t = unit_cost(0.5);
        let s = two();
        let ok = check_prefixed(&t, &ContractFn::constant(&s, Ext::Fin(2.0))).unwrap();
        assert!(ok.holds && ok.lfp_below == Some(true));
        let bad = check_prefixed(&t, &ContractFn::constant(&s, Ext::Fin(1.9))).unwrap();
        assert!(!bad.holds);
        assert_eq!(bad.witness, Some(0));
        assert!((apply_contract(&t, &ContractFn::constant(&s, Ext::Fin(1.9))).unwrap().get(0).finite().unwrap() - 1.95).abs() < 1e-15);
    }

    #[test]
    fn series_constant_instance() {
        let t = unit_cost(0.5);
        let s = two();
        let c3 = ContractFn::constant(&s, Ext::Fin(3.0));
        let v = lift_series(&t, &t, &c3, &ContractFn::constant(&s, Ext::Fin(2.5)), &c3).unwrap();
        assert!(v.sound());
        for x in v.closed_loop_lfp.unwrap().values() {
            assert!((x.finite().unwrap() - 2.0).abs() < 1e-10);
        }
        let err = lift_series(&t, &t, &c3, &ContractFn::constant(&s, Ext::Fin(2.4)), &c3).unwrap_err();
        assert!(matches!(err, Error::ObligationFailed { .. }));
    }

    #[test]
    fn infinite_cost_diverges_to_infinity() {
        let s = two();
        let t = ContractTransformer::new(
            ContractFn::new(&s, vec![Ext::Inf, Ext::Fin(1.0)]).unwrap(),
            0.5,
            Kernel::new(&s, &s, vec![vec![1.0, 0.0], vec![0.5, 0.5]]).unwrap(),
        )
        .unwrap();
        let run = kleene_lfp(&t, 1e-12, 1000).unwrap();
        assert!(run.lfp.get(0).is_inf() && run.lfp.get(1).is_inf());
    }

    #[test]
    fn scalar_feedback_at_boundary() {
        let unit = FiniteSpace::unit();
        let body = ContractTransformer::new(
            ContractFn::constant(&FiniteSpace::sum(&unit, &unit), Ext::Fin(1.0)),
            0.5,
            Kernel::new(
                &FiniteSpace::sum(&unit, &unit),
                &FiniteSpace::sum(&unit, &unit),
                vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            )
            .unwrap(),
        )
        .unwrap();
        let c2 = ContractFn::constant(&unit, Ext::Fin(2.0));
        let v = lfp_trace_transformer(&body, &ContractFn::bottom(&unit), &c2, &c2).unwrap();
        assert!(v.holds);
        assert!((v.feedback.get(0).finite().unwrap() - 2.0).abs() < 1e-10);
    }
}
