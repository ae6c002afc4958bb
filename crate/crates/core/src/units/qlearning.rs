//! Tabular ε-greedy Q-learning.

use rand::Rng;

use crate::envs::{environment_copy, Environment};
use crate::error::{Error, Result};
use crate::mdp::Horizon;
use crate::policy::{argmax, Policy};
use crate::regress::state_index;
use crate::rng::RngStream;
use crate::rollout::INFINITE_HORIZON_STEP_LIMIT;

#[derive(Debug, Clone, PartialEq)]
pub struct QLearningOutput {
    pub policy: Policy,
    pub q: Vec<Vec<f64>>,
}

/// Uniform action with probability `epsilon`, otherwise the greedy one.
pub fn epsilon_greedy<R: Rng + ?Sized>(q_row: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q_row.len())
    } else {
        argmax(q_row.iter().copied())
    }
}

pub fn pg_q_learning(
    env: &dyn Environment,
    episodes: usize,
    alpha: f64,
    epsilon: f64,
    stream: &RngStream,
) -> Result<QLearningOutput> {
    let spec = env.spec().clone();
    let (Some(n_states), Some(n_actions)) = (spec.state_space.n_discrete(), spec.action_space.n_discrete())
    else {
        return Err(Error::Unsupported("q-learning needs finite state and action spaces".into()));
    };
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::BadHyperparam {
            name: "alpha".into(),
            reason: format!("{alpha} not in (0, 1]"),
        });
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::BadHyperparam {
            name: "epsilon".into(),
            reason: format!("{epsilon} not in [0, 1]"),
        });
    }
    let mut env = environment_copy(env, &stream.child(0));
    let mut rng = stream.child(1).rng();
    let limit = match spec.horizon {
        Horizon::Finite(h) => h,
        Horizon::Infinite => INFINITE_HORIZON_STEP_LIMIT,
    };
    let index = |x: &[f64]| {
        state_index(x, n_states).ok_or_else(|| Error::InvalidArgument(format!("state {x:?} is not an index")))
    };
    let mut q = vec![vec![0.0; n_actions]; n_states];
    for _ in 0..episodes {
        let mut s = index(&env.reset())?;
        for t in 0.. {
            if t >= limit {
                if spec.horizon == Horizon::Infinite {
                    return Err(Error::RunawayEpisode { limit });
                }
                break;
            }
            let a = epsilon_greedy(&q[s], epsilon, &mut rng);
            let out = env.step(&[a as f64])?;
            let s2 = index(&out.next_state)?;
            let future = if out.absorbing {
                0.0
            } else {
                q[s2].iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            q[s][a] += alpha * (out.reward + spec.gamma * future - q[s][a]);
            if out.absorbing {
                break;
            }
            s = s2;
        }
    }
    Ok(QLearningOutput {
        policy: Policy::Tabular {
            action_space: spec.action_space.clone(),
            q: q.clone(),
        },
        q,
    })
}
