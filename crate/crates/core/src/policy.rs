//! Policies: maps from observations to (distributions over) actions.
//!
//! Every policy projects its output into its action space before returning,
//! so callers never see an out-of-range action.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::mdp::Space;
use crate::regress::{state_index, QModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Policy {
    /// Uniform over the action space.
    RandomUniform { action_space: Space },
    /// Always the same action.
    Constant { action_space: Space, action: Vec<f64> },
    /// Greedy over a state × action value table (discrete spaces).
    Tabular { action_space: Space, q: Vec<Vec<f64>> },
    /// `a = K s + σ ⊙ ξ`, ξ standard normal; deterministic when `stochastic` is false.
    LinearGaussian {
        action_space: Space,
        gain: Vec<Vec<f64>>,
        log_std: Vec<f64>,
        stochastic: bool,
    },
    /// Time-varying linear feedback `a_t = K_t s_t`; the last gain is reused past the end.
    TimeVaryingLinear { action_space: Space, gains: Vec<Vec<Vec<f64>>> },
    /// Greedy over a fitted Q-model evaluated at a fixed grid of actions.
    GridGreedyQ {
        action_space: Space,
        action_grid: Vec<Vec<f64>>,
        q: QModel,
    },
}

pub(crate) fn mat_vec(m: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// Index of the maximum; first occurrence wins ties.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl Policy {
    pub fn action_space(&self) -> &Space {
        match self {
            Policy::RandomUniform { action_space }
            | Policy::Constant { action_space, .. }
            | Policy::Tabular { action_space, .. }
            | Policy::LinearGaussian { action_space, .. }
            | Policy::TimeVaryingLinear { action_space, .. }
            | Policy::GridGreedyQ { action_space, .. } => action_space,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            Policy::RandomUniform { .. } => false,
            Policy::LinearGaussian { stochastic, .. } => !stochastic,
            _ => true,
        }
    }

    /// Chooses an action for observation `obs` at time step `t`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], t: usize, rng: &mut R) -> Vec<f64> {
        let mut a = match self {
            Policy::RandomUniform { action_space } => action_space.sample(rng),
            Policy::Constant { action, .. } => action.clone(),
            Policy::Tabular { q, .. } => {
                let s = state_index(obs, q.len()).unwrap_or(0);
                vec![argmax(q[s].iter().copied()) as f64]
            }
            Policy::LinearGaussian {
                gain,
                log_std,
                stochastic,
                ..
            } => {
                let mut mean = mat_vec(gain, obs);
                if *stochastic {
                    for (m, ls) in mean.iter_mut().zip(log_std) {
                        let xi: f64 = rng.sample(StandardNormal);
                        *m += ls.exp() * xi;
                    }
                }
                mean
            }
            Policy::TimeVaryingLinear { gains, .. } => {
                let k = &gains[t.min(gains.len() - 1)];
                mat_vec(k, obs)
            }
            Policy::GridGreedyQ { action_grid, .. } => {
                action_grid[self.greedy_index(obs).unwrap_or(0)].clone()
            }
        };
        self.action_space().project(&mut a);
        a
    }

    /// Greedy grid index for grid-based policies.
    pub fn greedy_index(&self, obs: &[f64]) -> Option<usize> {
        match self {
            Policy::GridGreedyQ { action_grid, q, .. } => Some(argmax(
                action_grid
                    .iter()
                    .enumerate()
                    .map(|(i, a)| q.predict(obs, i, a)),
            )),
            Policy::Tabular { q, .. } => {
                let s = state_index(obs, q.len()).unwrap_or(0);
                Some(argmax(q[s].iter().copied()))
            }
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policies always serialize")
    }

    pub fn from_json(text: &str) -> crate::Result<Policy> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn lg() -> Policy {
        Policy::LinearGaussian {
            action_space: Space::symmetric_box(3, 3.5).unwrap(),
            gain: vec![vec![-5.0, 0.0], vec![0.0, 0.0], vec![0.0, 20.0]],
            log_std: vec![0.0; 3],
            stochastic: true,
        }
    }

    #[test]
    fn sampled_actions_stay_in_space() {
        let p = lg();
        let mut rng = RngStream::new(4).rng();
        for _ in 0..10_000 {
            let s = [rng.random_range(-3.5..3.5), rng.random_range(-3.5..3.5)];
            let a = p.act(&s, 0, &mut rng);
            assert!(p.action_space().contains(&a).unwrap());
        }
    }

    #[test]
    fn tabular_greedy_breaks_ties_low() {
        let p = Policy::Tabular {
            action_space: Space::discrete(3).unwrap(),
            q: vec![vec![1.0, 1.0, 0.0], vec![0.0, 2.0, 2.0]],
        };
        let mut rng = RngStream::new(0).rng();
        assert_eq!(p.act(&[0.0], 0, &mut rng), vec![0.0]);
        assert_eq!(p.act(&[1.0], 0, &mut rng), vec![1.0]);
    }

    #[test]
    fn json_round_trip() {
        let p = lg();
        assert_eq!(Policy::from_json(&p.to_json()).unwrap(), p);
        assert!(p.to_json().starts_with(r#"{"class":"linear_gaussian""#));
    }
}
