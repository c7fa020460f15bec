//! Partially observed processes, off-policy weights and drifting operators.

pub mod ope;
pub mod pomdp;
pub mod tracking;

pub use ope::{importance_weights, ModuleSpec, Step, TrajectoryPrefix};
pub use pomdp::{bayes_update, belief_mdp_to_horizon, verify_belief_equivalence, BeliefTree, Pomdp};
pub use tracking::{track_fixed_points, TrackingMode, TrackingReport};
