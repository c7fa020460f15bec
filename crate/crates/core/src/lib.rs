//! Compositional Bellman semantics for discounted decision processes on
//! finite spaces.
//!
//! Open components compile to typed affine Bellman transformers, which are
//! wired by series, parallel and guarded-feedback combinators and solved as
//! contractive fixed points. Each quantitative bound (context gain, abstraction
//! distortion, contract lifting, tracking, depth-discounted robustness) comes
//! with a certificate and a measured counterpart.

pub mod abstraction;
pub mod affine;
pub mod audit;
pub mod bellman;
pub mod circuit;
pub mod component;
pub mod contracts;
pub mod error;
pub mod extensions;
pub mod kernel;
pub mod linalg;
pub mod random;
pub mod robustness;
pub mod space;
pub mod trace;
pub mod value;

pub use affine::AffineOperator;
pub use circuit::{certify, plug, CircuitExpr, HoleSpec};
pub use bellman::{make_transformer, Transformer};
pub use component::{close_loop, expected_reward, Mdp, Oddc, Policy};
pub use error::{Error, Result};
pub use kernel::{compose_kernels, pair_with_policy, tensor_kernels, tv_distance, Dist, Kernel};
pub use space::FiniteSpace;
pub use value::{sup_norm_diff, ValueFn};
