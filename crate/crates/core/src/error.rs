use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("space mismatch: expected `{expected}`, found `{found}`")]
    SpaceMismatch { expected: String, found: String },

    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("kernel row {row} is not stochastic: {reason}")]
    NotStochastic { row: usize, reason: String },

    #[error("invalid value function: {0}")]
    InvalidValue(String),

    #[error("invalid component: {0}")]
    InvalidComponent(String),

    #[error("value of norm {norm} exceeds ball radius {radius}")]
    BallViolation { norm: f64, radius: f64 },

    #[error("bound {bound} at {path} exceeds declared radius {radius}")]
    EdgeBallViolation { path: String, bound: f64, radius: f64 },

    #[error("type mismatch: {0}")]
    TypeMismatch(String),

    #[error("operator is not a contraction (modulus {modulus})")]
    NonContraction { modulus: f64 },

    #[error("linear system is singular")]
    SingularSystem,

    #[error("iteration did not converge after {iterations} steps (last residual {residual})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("circuit type error at {path}: {detail}")]
    TypeError { path: String, detail: String },

    #[error("unguarded trace at {path}: {detail}")]
    UnguardedTrace { path: String, detail: String },

    #[error("uncertifiable trace at {path}: {detail}")]
    UncertifiableTrace { path: String, detail: String },

    #[error("abstraction is not exact (eps_r = {eps_r}, eps_P = {eps_p})")]
    NotExact { eps_r: f64, eps_p: f64 },

    #[error("invalid abstraction: {0}")]
    InvalidAbstraction(String),

    #[error("reward bounds differ: {0} vs {1}")]
    RewardBoundMismatch(f64, f64),

    #[error("Kleene iteration exceeded {iterations} steps")]
    MaxIterExceeded {
        iterations: usize,
        /// Last element of the ascending chain, rendered for diagnosis.
        partial: Vec<String>,
    },

    #[error("Kleene chain decreased at state {state}")]
    NonMonotoneChain { state: usize },

    #[error("obligation `{obligation}` failed at state {state}: {lhs} > {rhs}")]
    ObligationFailed {
        obligation: String,
        state: usize,
        lhs: String,
        rhs: String,
    },

    #[error("enumeration budget exceeded: {nodes} nodes > limit {limit}")]
    BudgetExceeded { nodes: usize, limit: usize },

    #[error("target policy not absolutely continuous w.r.t. behavior at step {step} (state {state}, action {action})")]
    AbsoluteContinuityViolation {
        step: usize,
        state: usize,
        action: usize,
    },

    #[error("target policy plays action {action} in state {state} where the behavior policy never does")]
    PolicySupport { state: usize, action: usize },

    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),
}

impl Error {
    pub(crate) fn mismatch(expected: &impl std::fmt::Display, found: &impl std::fmt::Display) -> Self {
        Error::SpaceMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
