//! Episode rollouts shared by data generation, evaluation and training.

use rand::Rng;

use crate::dataset::Transition;
use crate::envs::Environment;
use crate::error::{Error, Result};
use crate::mdp::Horizon;
use crate::policy::Policy;

/// Step cap for infinite-horizon environments.
pub const INFINITE_HORIZON_STEP_LIMIT: usize = 10_000;

/// Runs one episode until the horizon or an absorbing state.
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    policy: &Policy,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    run_episode_with(env, |obs, t| Ok(policy.act(obs, t, rng)))
}

/// Like [`run_episode`] with an arbitrary action source.
pub fn run_episode_with<F>(env: &mut dyn Environment, mut act: F) -> Result<Vec<Transition>>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>>,
{
    let horizon = env.spec().horizon;
    let mut s = env.reset();
    let mut out = Vec::new();
    for t in 0.. {
        if horizon == Horizon::Infinite && t >= INFINITE_HORIZON_STEP_LIMIT {
            return Err(Error::RunawayEpisode {
                limit: INFINITE_HORIZON_STEP_LIMIT,
            });
        }
        let a = act(&s, t)?;
        let step = env.step(&a)?;
        let last = step.absorbing || horizon.steps().is_some_and(|h| t + 1 >= h);
        out.push(Transition {
            state: s,
            action: a,
            reward: step.reward,
            next_state: step.next_state.clone(),
            absorbing: step.absorbing,
            last,
        });
        if last {
            break;
        }
        s = step.next_state;
    }
    Ok(out)
}
