//! State/action spaces and the static description of an MDP.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A state or action space. Discrete values travel as one-element vectors
/// holding an integer-valued real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Space {
    Discrete { n: usize },
    Box { low: Vec<f64>, high: Vec<f64> },
}

impl Space {
    pub fn discrete(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("discrete space needs n >= 1".into()));
        }
        Ok(Space::Discrete { n })
    }

    pub fn boxed(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::DimensionMismatch {
                expected: low.len(),
                got: high.len(),
            });
        }
        if low.is_empty() {
            return Err(Error::InvalidArgument("box space needs dim >= 1".into()));
        }
        if let Some(i) = (0..low.len()).find(|&i| !(low[i] <= high[i])) {
            return Err(Error::InvalidArgument(format!(
                "box bound {i}: low {} > high {}",
                low[i], high[i]
            )));
        }
        Ok(Space::Box { low, high })
    }

    /// Symmetric box `[-bound, bound]^dim`.
    pub fn symmetric_box(dim: usize, bound: f64) -> Result<Self> {
        Self::boxed(vec![-bound; dim], vec![bound; dim])
    }

    pub fn dim(&self) -> usize {
        match self {
            Space::Discrete { .. } => 1,
            Space::Box { low, .. } => low.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Space::Discrete { .. })
    }

    pub fn n_discrete(&self) -> Option<usize> {
        match self {
            Space::Discrete { n } => Some(*n),
            Space::Box { .. } => None,
        }
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(match self {
            Space::Discrete { n } => {
                let v = x[0];
                v.fract() == 0.0 && v >= 0.0 && v < *n as f64
            }
            Space::Box { low, high } => x
                .iter()
                .zip(low.iter().zip(high))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi),
        })
    }

    /// Projects `x` into the space: componentwise clamp for boxes,
    /// round-and-clamp for discrete spaces. NaN maps to the lower bound.
    pub fn project(&self, x: &mut [f64]) {
        match self {
            Space::Discrete { n } => {
                let v = x[0].round();
                x[0] = if v.is_nan() { 0.0 } else { v.clamp(0.0, (*n - 1) as f64) };
            }
            Space::Box { low, high } => {
                for (v, (lo, hi)) in x.iter_mut().zip(low.iter().zip(high)) {
                    *v = if v.is_nan() { *lo } else { v.clamp(*lo, *hi) };
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Space::Discrete { n } => vec![rng.random_range(0..*n) as f64],
            Space::Box { low, high } => low
                .iter()
                .zip(high)
                .map(|(lo, hi)| if lo == hi { *lo } else { rng.random_range(*lo..=*hi) })
                .collect(),
        }
    }
}

/// Episode length bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

impl Horizon {
    pub fn steps(&self) -> Option<usize> {
        match self {
            Horizon::Finite(t) => Some(*t),
            Horizon::Infinite => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpSpec {
    pub state_space: Space,
    pub action_space: Space,
    pub gamma: f64,
    pub horizon: Horizon,
}

impl MdpSpec {
    pub fn new(state_space: Space, action_space: Space, gamma: f64, horizon: Horizon) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
        }
        if horizon == Horizon::Infinite && gamma >= 1.0 {
            return Err(Error::InvalidArgument(
                "infinite horizon requires gamma < 1".into(),
            ));
        }
        if horizon == Horizon::Finite(0) {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        Ok(Self {
            state_space,
            action_space,
            gamma,
            horizon,
        })
    }
}
