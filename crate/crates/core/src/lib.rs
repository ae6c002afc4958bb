//! Automated reinforcement-learning pipelines.
//!
//! A pipeline is a fixed-order sequence of stages (data generation, data
//! preparation, feature engineering, policy generation, policy evaluation).
//! Each stage is filled by a unit that is either fixed, tuned by a
//! hyper-parameter search, or chosen automatically among several tunable
//! algorithms. See the guide in `book/` for a walk-through.

pub mod cli;
pub mod dataset;
pub mod envs;
pub mod framework;
pub mod error;
pub mod hyper;
pub mod mdp;
pub mod metrics;
pub mod policy;
pub mod regress;
pub mod rng;
pub mod rollout;
pub mod tuner;
pub mod units;

pub use dataset::{Dataset, Transition};
pub use error::{Error, Result};
pub use hyper::{HpDomain, HpValue, HyperparamAssignment, HyperparamSpace, Scale};
pub use mdp::{Horizon, MdpSpec, Space};
pub use policy::Policy;
pub use rng::RngStream;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/pipelines.md")]
    struct Pipelines;
    #[doc = include_str!("../../../book/src/tuning.md")]
    struct Tuning;
    #[doc = include_str!("../../../book/src/environments.md")]
    struct Environments;
    #[doc = include_str!("../../../book/src/algorithms.md")]
    struct Algorithms;
    #[doc = include_str!("../../../book/src/estimators.md")]
    struct Estimators;
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    struct Reproducibility;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
