//! TOML scenario documents and their resolution into library objects.
//!
//! Every named reference is resolved eagerly and every matrix is checked
//! against the declared spaces before any solver runs. Errors carry the key
//! path of the offending entry.

use std::collections::{BTreeMap, HashSet};

use anyhow::{anyhow, bail, Context, Result};
use bellwire::circuit::{duplicate, projection, TraceConstants};
use bellwire::contracts::{ContractFn, ContractTransformer};
use bellwire::extensions::pomdp::Pomdp;
use bellwire::{CircuitExpr, Dist, FiniteSpace, HoleSpec, Kernel, Mdp, Oddc, Policy, Transformer, ValueFn};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum SpaceDecl {
    Size(usize),
    Labels(Vec<String>),
    Sum { sum: [String; 2] },
    Product { product: [String; 2] },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDecl {
    pub s_in: String,
    pub actions: String,
    pub s_out: String,
    pub rewards: String,
    /// Rows over `s_in x actions`, columns over `s_out x rewards`.
    pub kernel: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub gamma: f64,
    pub r_max: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDecl {
    pub states: String,
    pub actions: String,
    /// Rows over `states x actions`.
    pub trans: Vec<Vec<f64>>,
    /// `reward[s][a]`.
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub r_max: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDecl {
    pub states: String,
    pub actions: String,
    pub rows: Option<Vec<Vec<f64>>>,
    pub choice: Option<Vec<usize>>,
    #[serde(default)]
    pub uniform: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerDecl {
    pub in_space: Option<String>,
    pub out_space: Option<String>,
    pub reward: Option<Vec<f64>>,
    pub gamma: Option<f64>,
    pub trans: Option<Vec<Vec<f64>>>,
    pub component: Option<String>,
    pub mdp: Option<String>,
    pub policy: Option<String>,
    pub r_max: Option<f64>,
    pub ball_in: Option<f64>,
    pub ball_out: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PomdpDecl {
    pub states: String,
    pub actions: String,
    pub observations: String,
    pub trans: Vec<Vec<f64>>,
    /// Rows keyed by `(next state, action)`.
    pub obs: Vec<Vec<f64>>,
    pub reward: Vec<Vec<f64>>,
    pub gamma: f64,
    pub init: Vec<f64>,
    pub r_max: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractTransformerDecl {
    pub in_space: String,
    pub out_space: Option<String>,
    /// Nonnegative costs; `inf` is allowed.
    pub cost: Vec<f64>,
    pub gamma: f64,
    pub trans: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsDecl {
    pub alpha: f64,
    pub eta: f64,
    pub beta: f64,
    pub a_x: f64,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeDecl {
    Leaf {
        transformer: String,
    },
    /// `second_step` acts one step later in time than `first_step`.
    Series {
        first_step: String,
        second_step: String,
    },
    Parallel {
        left: String,
        right: String,
    },
    Sum {
        left: String,
        right: String,
    },
    Trace {
        body: String,
        feedback_radius: f64,
        constants: Option<ConstantsDecl>,
    },
    Hole {
        in_space: String,
        out_space: Option<String>,
        ball_in: f64,
        ball_out: f64,
        gamma: f64,
    },
    /// `B(S) -> B(S + S)`, `v |-> (v, v)`.
    Duplicate {
        space: String,
        ball: f64,
    },
    /// `B(left + right) -> B(kept)`.
    Projection {
        left: String,
        right: String,
        keep: Side,
        ball: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CircuitDecl {
    pub root: String,
    pub nodes: BTreeMap<String, NodeDecl>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveDecl {
    /// Solve this transformer instead of the circuit.
    pub transformer: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyDecl {
    pub fillers: [String; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesLiftDecl {
    pub first: String,
    pub second: String,
    pub c_z: Vec<f64>,
    pub c_y: Vec<f64>,
    pub c_x: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelLiftDecl {
    pub left: String,
    pub right: String,
    pub c_y1: Vec<f64>,
    pub c_x1: Vec<f64>,
    pub c_y2: Vec<f64>,
    pub c_x2: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackLiftDecl {
    pub body: String,
    pub c_y: Vec<f64>,
    pub c_x: Vec<f64>,
    pub c_z: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractDecl {
    /// Closed transformer whose least fixed point is computed.
    pub transformer: Option<String>,
    #[serde(default)]
    pub candidates: Vec<Vec<f64>>,
    #[serde(default)]
    pub series: Vec<SeriesLiftDecl>,
    #[serde(default)]
    pub parallel: Vec<ParallelLiftDecl>,
    #[serde(default)]
    pub feedback: Vec<FeedbackLiftDecl>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbstractionDecl {
    pub concrete: String,
    #[serde(rename = "abstract")]
    pub abstract_mdp: String,
    pub phi: Vec<usize>,
    pub eta: Option<Vec<usize>>,
    /// Policy on the abstract model.
    pub policy: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeliefDecl {
    pub pomdp: String,
    pub horizon: usize,
    /// State policy lifted to beliefs; uniform when absent.
    pub policy: Option<String>,
    pub trajectories: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpeModuleDecl {
    pub mdp: String,
    pub init: Vec<f64>,
    pub target: String,
    pub behavior: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpeDecl {
    pub mdp: String,
    pub init: Vec<f64>,
    pub target: String,
    pub behavior: String,
    pub horizon: usize,
    /// Second module of a product circuit for the factorization checks.
    pub second: Option<OpeModuleDecl>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackModeDecl {
    Exact,
    OneStep,
    #[default]
    Both,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftDecl {
    pub states: usize,
    pub gamma: f64,
    pub steps: usize,
    pub reward_step: f64,
    pub mix_step: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackDecl {
    pub transformers: Option<Vec<String>>,
    /// Seeded random drifting sequence instead of named transformers.
    pub drift: Option<DriftDecl>,
    #[serde(default)]
    pub mode: TrackModeDecl,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    #[serde(default)]
    pub spaces: BTreeMap<String, SpaceDecl>,
    #[serde(default)]
    pub components: BTreeMap<String, ComponentDecl>,
    #[serde(default)]
    pub mdps: BTreeMap<String, MdpDecl>,
    #[serde(default)]
    pub policies: BTreeMap<String, PolicyDecl>,
    #[serde(default)]
    pub transformers: BTreeMap<String, TransformerDecl>,
    #[serde(default)]
    pub pomdps: BTreeMap<String, PomdpDecl>,
    #[serde(default)]
    pub contract_transformers: BTreeMap<String, ContractTransformerDecl>,
    pub circuit: Option<CircuitDecl>,
    pub solve: Option<SolveDecl>,
    pub certify: Option<CertifyDecl>,
    pub contract: Option<ContractDecl>,
    pub abstraction: Option<AbstractionDecl>,
    pub belief: Option<BeliefDecl>,
    pub ope: Option<OpeDecl>,
    pub track: Option<TrackDecl>,
}

impl Document {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn section<'a, T>(&self, name: &str, s: &'a Option<T>) -> Result<&'a T> {
        s.as_ref().ok_or_else(|| anyhow!("document has no [{name}] section"))
    }

    pub fn space(&self, name: &str) -> Result<FiniteSpace> {
        self.space_in(name, &mut HashSet::new())
    }

    fn space_in(&self, name: &str, visiting: &mut HashSet<String>) -> Result<FiniteSpace> {
        let decl = self.spaces.get(name).ok_or_else(|| anyhow!("unknown space `{name}`"))?;
        if !visiting.insert(name.to_string()) {
            bail!("spaces.{name}: space refers to itself");
        }
        let s = match decl {
            SpaceDecl::Size(n) => FiniteSpace::indexed(name, &name.to_lowercase(), *n).with_context(|| format!("spaces.{name}"))?,
            SpaceDecl::Labels(l) => FiniteSpace::new(name, l.iter().cloned()).with_context(|| format!("spaces.{name}"))?,
            SpaceDecl::Sum { sum: [a, b] } => FiniteSpace::sum(&self.space_in(a, visiting)?, &self.space_in(b, visiting)?),
            SpaceDecl::Product { product: [a, b] } => {
                FiniteSpace::product(&self.space_in(a, visiting)?, &self.space_in(b, visiting)?)
            }
        };
        visiting.remove(name);
        Ok(s)
    }

    fn product(&self, a: &str, b: &str) -> Result<FiniteSpace> {
        Ok(FiniteSpace::product(&self.space(a)?, &self.space(b)?))
    }

    pub fn component(&self, name: &str) -> Result<Oddc> {
        let d = self.components.get(name).ok_or_else(|| anyhow!("unknown component `{name}`"))?;
        let at = || format!("components.{name}");
        let (s_in, a, s_out, r) = (self.space(&d.s_in)?, self.space(&d.actions)?, self.space(&d.s_out)?, self.space(&d.rewards)?);
        let from = FiniteSpace::product(&s_in, &a);
        let to = FiniteSpace::product(&s_out, &r);
        let k = kernel(&from, &to, &d.kernel).with_context(|| format!("{}.kernel", at()))?;
        let m = Oddc::new(&s_in, &a, &s_out, &r, k, d.rho.clone(), d.gamma).with_context(at)?;
        match d.r_max {
            Some(b) => m.with_reward_bound(b).with_context(at),
            None => Ok(m),
        }
    }

    pub fn mdp(&self, name: &str) -> Result<Mdp> {
        let d = self.mdps.get(name).ok_or_else(|| anyhow!("unknown MDP `{name}`"))?;
        let at = || format!("mdps.{name}");
        let (s, a) = (self.space(&d.states)?, self.space(&d.actions)?);
        let k = kernel(&self.product(&d.states, &d.actions)?, &s, &d.trans).with_context(|| format!("{}.trans", at()))?;
        let reward = table(&d.reward, s.size(), a.size()).with_context(|| format!("{}.reward", at()))?;
        let m = Mdp::new(&s, &a, k, reward, d.gamma).with_context(at)?;
        match d.r_max {
            Some(b) => m.with_reward_bound(b).with_context(at),
            None => Ok(m),
        }
    }

    pub fn policy(&self, name: &str) -> Result<Policy> {
        let d = self.policies.get(name).ok_or_else(|| anyhow!("unknown policy `{name}`"))?;
        let at = || format!("policies.{name}");
        let (s, a) = (self.space(&d.states)?, self.space(&d.actions)?);
        match (&d.rows, &d.choice, d.uniform) {
            (Some(rows), None, false) => Ok(Policy::new(kernel(&s, &a, rows).with_context(at)?)),
            (None, Some(c), false) => Policy::deterministic(&s, &a, c).with_context(at),
            (None, None, true) => Ok(Policy::uniform(&s, &a)),
            _ => bail!("{}: give exactly one of `rows`, `choice` or `uniform = true`", at()),
        }
    }

    pub fn transformer(&self, name: &str) -> Result<Transformer> {
        let d = self.transformers.get(name).ok_or_else(|| anyhow!("unknown transformer `{name}`"))?;
        let at = || format!("transformers.{name}");
        let t = match (&d.component, &d.mdp, &d.policy) {
            (Some(c), None, Some(p)) => bellwire::make_transformer(&self.component(c)?, &self.policy(p)?).with_context(at)?,
            (None, Some(m), Some(p)) => bellwire::bellman::mdp_transformer(&self.mdp(m)?, &self.policy(p)?).with_context(at)?,
            (None, None, None) => {
                let missing = |f: &str| anyhow!("{}: missing `{f}`", at());
                let s_in = self.space(d.in_space.as_deref().ok_or_else(|| missing("in_space"))?)?;
                let s_out = match &d.out_space {
                    Some(o) => self.space(o)?,
                    None => s_in.clone(),
                };
                let reward = d.reward.clone().ok_or_else(|| missing("reward"))?;
                let k = kernel(&s_in, &s_out, d.trans.as_ref().ok_or_else(|| missing("trans"))?)
                    .with_context(|| format!("{}.trans", at()))?;
                let reward = ValueFn::new(&s_in, reward).with_context(|| format!("{}.reward", at()))?;
                Transformer::new(reward, d.gamma.ok_or_else(|| missing("gamma"))?, k).with_context(at)?
            }
            _ => bail!("{}: give either a table (in_space, reward, gamma, trans) or a component/mdp with a policy", at()),
        };
        let t = match d.r_max {
            Some(b) => t.with_reward_bound(b).with_context(at)?,
            None => t,
        };
        match (d.ball_in, d.ball_out) {
            (None, None) => Ok(t),
            (bi, bo) => {
                let (bi, bo) = (bi.unwrap_or(t.ball_in()), bo.unwrap_or(t.ball_out()));
                t.with_balls(bi, bo).with_context(at)
            }
        }
    }

    /// The component and policy a transformer was declared from, if any.
    pub fn trajectory_source(&self, name: &str) -> Result<Option<(Oddc, Policy)>> {
        let d = self.transformers.get(name).ok_or_else(|| anyhow!("unknown transformer `{name}`"))?;
        Ok(match (&d.component, &d.mdp, &d.policy) {
            (Some(c), None, Some(p)) => Some((self.component(c)?, self.policy(p)?)),
            (None, Some(m), Some(p)) => Some((self.mdp(m)?.to_oddc()?, self.policy(p)?)),
            _ => None,
        })
    }

    pub fn pomdp(&self, name: &str) -> Result<Pomdp> {
        let d = self.pomdps.get(name).ok_or_else(|| anyhow!("unknown POMDP `{name}`"))?;
        let at = || format!("pomdps.{name}");
        let (s, a, o) = (self.space(&d.states)?, self.space(&d.actions)?, self.space(&d.observations)?);
        let sa = FiniteSpace::product(&s, &a);
        let trans = kernel(&sa, &s, &d.trans).with_context(|| format!("{}.trans", at()))?;
        let obs = kernel(&sa, &o, &d.obs).with_context(|| format!("{}.obs", at()))?;
        let reward = table(&d.reward, s.size(), a.size()).with_context(|| format!("{}.reward", at()))?;
        let init = Dist::new(&s, d.init.clone()).with_context(|| format!("{}.init", at()))?;
        let p = Pomdp::new(&s, &a, &o, trans, obs, reward, d.gamma, init).with_context(at)?;
        match d.r_max {
            Some(b) => p.with_reward_bound(b).with_context(at),
            None => Ok(p),
        }
    }

    pub fn contract_transformer(&self, name: &str) -> Result<ContractTransformer> {
        let d = self
            .contract_transformers
            .get(name)
            .ok_or_else(|| anyhow!("unknown contract transformer `{name}`"))?;
        let at = || format!("contract_transformers.{name}");
        let s_in = self.space(&d.in_space)?;
        let s_out = match &d.out_space {
            Some(o) => self.space(o)?,
            None => s_in.clone(),
        };
        let cost = contract_fn(&s_in, &d.cost).with_context(|| format!("{}.cost", at()))?;
        let k = kernel(&s_in, &s_out, &d.trans).with_context(|| format!("{}.trans", at()))?;
        ContractTransformer::new(cost, d.gamma, k).with_context(at)
    }

    /// Builds the circuit AST from the named node table.
    pub fn circuit(&self) -> Result<CircuitExpr> {
        let c = self.section("circuit", &self.circuit)?;
        let mut visiting = HashSet::new();
        self.node(c, &c.root, &mut visiting)
    }

    fn node(&self, c: &CircuitDecl, name: &str, visiting: &mut HashSet<String>) -> Result<CircuitExpr> {
        let d = c.nodes.get(name).ok_or_else(|| anyhow!("circuit.nodes: unknown node `{name}`"))?;
        if !visiting.insert(name.to_string()) {
            bail!("circuit.nodes.{name}: node refers to itself");
        }
        let at = || format!("circuit.nodes.{name}");
        let mut sub = |n: &str| self.node(c, n, visiting);
        let e = match d {
            NodeDecl::Leaf { transformer } => CircuitExpr::transformer(&self.transformer(transformer).with_context(at)?),
            NodeDecl::Series { first_step, second_step } => CircuitExpr::series(sub(first_step)?, sub(second_step)?),
            NodeDecl::Parallel { left, right } => CircuitExpr::parallel(sub(left)?, sub(right)?),
            NodeDecl::Sum { left, right } => CircuitExpr::sum(sub(left)?, sub(right)?),
            NodeDecl::Trace { body, feedback_radius, constants } => {
                let body = sub(body)?;
                match constants {
                    Some(k) => CircuitExpr::trace_with(
                        body,
                        *feedback_radius,
                        TraceConstants {
                            alpha: k.alpha,
                            eta: k.eta,
                            beta: k.beta,
                            a_x: k.a_x,
                        },
                    ),
                    None => CircuitExpr::trace(body, *feedback_radius),
                }
            }
            NodeDecl::Hole {
                in_space,
                out_space,
                ball_in,
                ball_out,
                gamma,
            } => {
                let s_in = self.space(in_space)?;
                let s_out = match out_space {
                    Some(o) => self.space(o)?,
                    None => s_in.clone(),
                };
                CircuitExpr::hole(HoleSpec {
                    in_space: s_in,
                    out_space: s_out,
                    ball_in: *ball_in,
                    ball_out: *ball_out,
                    gamma: *gamma,
                })
            }
            NodeDecl::Duplicate { space, ball } => CircuitExpr::leaf(duplicate(&self.space(space)?, *ball)),
            NodeDecl::Projection { left, right, keep, ball } => CircuitExpr::leaf(projection(
                &self.space(left)?,
                &self.space(right)?,
                *keep == Side::Right,
                *ball,
            )),
        };
        visiting.remove(name);
        Ok(e)
    }
}

fn kernel(from: &FiniteSpace, to: &FiniteSpace, rows: &[Vec<f64>]) -> Result<Kernel> {
    if rows.len() != from.size() {
        bail!("{} rows given, {from} has {} elements", rows.len(), from.size());
    }
    if let Some(i) = rows.iter().position(|r| r.len() != to.size()) {
        bail!("row {i} has {} entries, {to} has {} elements", rows[i].len(), to.size());
    }
    Ok(Kernel::new(from, to, rows.to_vec())?)
}

/// Flattens `t[s][a]` row-major.
fn table(t: &[Vec<f64>], n_s: usize, n_a: usize) -> Result<Vec<f64>> {
    if t.len() != n_s || t.iter().any(|r| r.len() != n_a) {
        bail!("expected a {n_s} x {n_a} table");
    }
    Ok(t.concat())
}

pub fn contract_fn(space: &FiniteSpace, v: &[f64]) -> Result<ContractFn> {
    Ok(ContractFn::from_f64(space, v)?)
}
