//! Environments and their analytic oracles.
//!
//! An [`Environment`] is a single-threaded stateful object. Parallel workers
//! each get their own copy through [`Environment::box_clone`], reseeded on a
//! distinct [`RngStream`] path.

mod distractor;
mod engineered;
mod finite;
mod lqg;

pub use distractor::{DistractorEnv, DistractorParams};
pub use engineered::EngineeredEnv;
pub use finite::{FiniteMdp, FiniteMdpEnv};
pub use lqg::{riccati_policy, LqgEnv, LqgParams, RiccatiSolution};

use crate::error::Result;
use crate::mdp::MdpSpec;
use crate::rng::RngStream;

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub absorbing: bool,
}

pub trait Environment: Send + Sync {
    fn spec(&self) -> &MdpSpec;

    /// Samples an initial state and returns the first observation.
    fn reset(&mut self) -> Vec<f64>;

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome>;

    /// Restarts the internal noise source on `stream`.
    fn reseed(&mut self, stream: &RngStream);

    fn box_clone(&self) -> Box<dyn Environment>;

    fn name(&self) -> &str;
}

impl Clone for Box<dyn Environment> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Independent copy of `env` drawing its noise from `stream`.
pub fn environment_copy(env: &dyn Environment, stream: &RngStream) -> Box<dyn Environment> {
    let mut copy = env.box_clone();
    copy.reseed(stream);
    copy
}

impl std::fmt::Debug for dyn Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Environment({})", self.name())
    }
}
