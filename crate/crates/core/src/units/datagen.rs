use crate::dataset::Dataset;
use crate::envs::{environment_copy, Environment};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng::RngStream;
use crate::rollout::run_episode;

/// Collects `n_episodes` rollouts of the uniform random policy.
pub fn dg_random_uniform(
    env: &dyn Environment,
    n_episodes: usize,
    stream: &RngStream,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let policy = Policy::RandomUniform {
        action_space: env.spec().action_space.clone(),
    };
    collect(env, &policy, n_episodes, stream)
}

pub(crate) fn collect(
    env: &dyn Environment,
    policy: &Policy,
    n_episodes: usize,
    stream: &RngStream,
) -> Result<Dataset> {
    let mut env = environment_copy(env, &stream.child(0));
    let mut rng = stream.child(1).rng();
    let episodes = (0..n_episodes)
        .map(|_| run_episode(env.as_mut(), policy, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_trajectories(episodes)
}
