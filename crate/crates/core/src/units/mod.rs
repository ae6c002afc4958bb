//! Concrete algorithms for each stage kind.

mod datagen;
mod feature;
mod fqi;
mod gpomdp;
mod lspi;
mod prep;
mod qlearning;

pub use datagen::dg_random_uniform;
pub use feature::{
    fe_engineer_environment, fe_forward_mi_select, mi_objective, FeatureTransform, MiObjective,
    RewardShape, Selection, Standardization,
};
pub use fqi::{default_action_grid, fit_fqi, nearest_grid_index, pg_fqi, FqiConfig, FqiOutput};
pub use gpomdp::{
    gpomdp_gradient, mc_objective, pg_gpomdp, Baseline, GpomdpConfig, GradientEstimate,
    LinearGaussianParams,
};
pub use lspi::{pg_lspi, LspiOutput};
pub use prep::{dp_1nn_impute, dp_mean_impute};
pub use qlearning::{epsilon_greedy, pg_q_learning, QLearningOutput};
pub use gpomdp::train_gpomdp;

use crate::envs::Environment;
use crate::error::Result;
use crate::metrics::{evaluate_policy, ReturnEstimate, ReturnKind};
use crate::policy::Policy;
use crate::rng::RngStream;

/// The policy-evaluation unit: a Monte-Carlo return estimate.
pub fn pe_monte_carlo(
    env: &dyn Environment,
    policy: &Policy,
    n_episodes: usize,
    kind: ReturnKind,
    stream: &RngStream,
) -> Result<ReturnEstimate> {
    evaluate_policy(env, policy, n_episodes, kind, stream)
}
