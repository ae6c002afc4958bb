//! Control task whose state mixes a few controllable features with
//! independent noise features.
//!
//! Each informative feature `i_k` evolves as
//! `s'_{i_k} = clip(decay·s_{i_k} + gain·a_k + N(0, noise²))` and costs
//! `s_{i_k}²` per step; every other feature is redrawn uniformly on
//! `[-bound, bound]` at each step, independently of everything else.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::mdp::{Horizon, MdpSpec, Space};
use crate::rng::{RngStream, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistractorParams {
    pub n_features: usize,
    pub informative: Vec<usize>,
    pub bound: f64,
    pub decay: f64,
    pub gain: f64,
    pub noise_std: f64,
    pub action_cost: f64,
    pub gamma: f64,
    pub horizon: usize,
}

impl Default for DistractorParams {
    fn default() -> Self {
        Self {
            n_features: 6,
            informative: vec![1, 4],
            bound: 2.0,
            decay: 0.95,
            gain: 0.5,
            noise_std: 0.05,
            action_cost: 0.1,
            gamma: 0.95,
            horizon: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistractorEnv {
    params: DistractorParams,
    spec: MdpSpec,
    state: Vec<f64>,
    rng: StreamRng,
}

impl DistractorEnv {
    pub fn new(params: DistractorParams, stream: &RngStream) -> Result<Self> {
        let mut seen = vec![false; params.n_features];
        for &i in &params.informative {
            if i >= params.n_features || seen[i] {
                return Err(Error::InvalidArgument(format!(
                    "informative index {i} is out of range or repeated"
                )));
            }
            seen[i] = true;
        }
        if params.informative.is_empty() {
            return Err(Error::InvalidArgument("need at least one informative feature".into()));
        }
        let spec = MdpSpec::new(
            Space::symmetric_box(params.n_features, params.bound)?,
            Space::symmetric_box(params.informative.len(), 1.0)?,
            params.gamma,
            Horizon::Finite(params.horizon),
        )?;
        Ok(Self {
            state: vec![0.0; params.n_features],
            spec,
            rng: stream.rng(),
            params,
        })
    }

    pub fn params(&self) -> &DistractorParams {
        &self.params
    }
}

impl Environment for DistractorEnv {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        let b = self.params.bound;
        let rng = &mut self.rng;
        self.state = (0..self.params.n_features)
            .map(|_| rng.random_range(-b..=b))
            .collect();
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let p = &self.params;
        if action.len() != p.informative.len() {
            return Err(Error::DimensionMismatch {
                expected: p.informative.len(),
                got: action.len(),
            });
        }
        let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
        let cost_s: f64 = p.informative.iter().map(|&i| self.state[i].powi(2)).sum();
        let cost_a: f64 = a.iter().map(|x| x * x).sum();
        let reward = -cost_s - p.action_cost * cost_a;
        let b = p.bound;
        let mut next: Vec<f64> = (0..p.n_features)
            .map(|_| self.rng.random_range(-b..=b))
            .collect();
        for (k, &i) in p.informative.iter().enumerate() {
            let z: f64 = self.rng.sample(StandardNormal);
            next[i] = (p.decay * self.state[i] + p.gain * a[k] + p.noise_std * z).clamp(-b, b);
        }
        self.state = next.clone();
        Ok(StepOutcome {
            next_state: next,
            reward,
            absorbing: false,
        })
    }

    fn reseed(&mut self, stream: &RngStream) {
        self.rng = stream.rng();
    }

    fn box_clone(&self) -> Box<dyn Environment> {
        Box::new(self.clone())
    }

    fn name(&self) -> &str {
        "distractor"
    }
}
