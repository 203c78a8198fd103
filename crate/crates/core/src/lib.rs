//! Cumulative-damage career MDPs with a latent damage state, a role-viability
//! exit rule and capacity feedback, plus the machinery used to study them:
//! a backward-induction reference solver, PPO/Dyna trainers over a
//! Dirichlet/Normal policy, a minimal analytic two-action MDP, CMA-ES schedule
//! search and the statistics used to compare conditions.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cmaes;
pub mod dp;
pub mod env;
pub mod error;
pub mod experiment;
pub mod policy;
pub mod presets;
pub mod special;
pub mod stats;
pub mod synthetic;
pub mod train;

pub use env::{Action, Env, EnvConfig, EnvState, StepOutcome, Termination};
pub use error::{Error, Result};
pub use presets::{bricklayer_config, nba_config, validate_config, PresetId};
