//! Fitted Q-iteration over a finite action grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::mdp::{MdpSpec, Space};
use crate::policy::Policy;
use crate::regress::{QModel, RegressorSpec, Sample};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqiConfig {
    pub n_iterations: usize,
    pub regressor: RegressorSpec,
    /// Explicit action grid; defaults to [`default_action_grid`].
    pub action_grid: Option<Vec<Vec<f64>>>,
}

impl Default for FqiConfig {
    fn default() -> Self {
        Self {
            n_iterations: 60,
            regressor: RegressorSpec::ExtraTrees {
                n_estimators: 100,
                min_samples_split: 10,
            },
            action_grid: None,
        }
    }
}

/// Every action of a discrete space; for a box, an evenly spaced grid with
/// at most 8 points per dimension and at most 64 points overall.
pub fn default_action_grid(space: &Space) -> Vec<Vec<f64>> {
    match space {
        Space::Discrete { n } => (0..*n).map(|a| vec![a as f64]).collect(),
        Space::Box { low, high } => {
            let m = low.len() as u32;
            let mut per_dim = 8usize;
            while per_dim > 1 && per_dim.pow(m) > 64 {
                per_dim -= 1;
            }
            let axes: Vec<Vec<f64>> = low
                .iter()
                .zip(high)
                .map(|(lo, hi)| {
                    if per_dim == 1 || lo == hi {
                        vec![0.5 * (lo + hi)]
                    } else {
                        (0..per_dim)
                            .map(|i| lo + (hi - lo) * i as f64 / (per_dim - 1) as f64)
                            .collect()
                    }
                })
                .collect();
            let mut grid = vec![Vec::new()];
            for axis in &axes {
                grid = grid
                    .into_iter()
                    .flat_map(|prefix: Vec<f64>| {
                        axis.iter().map(move |v| {
                            let mut p = prefix.clone();
                            p.push(*v);
                            p
                        })
                    })
                    .collect();
            }
            grid
        }
    }
}

/// Nearest grid point (Euclidean), lowest index on ties.
pub fn nearest_grid_index(grid: &[Vec<f64>], action: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, g) in grid.iter().enumerate() {
        let d: f64 = g.iter().zip(action).map(|(x, y)| (x - y) * (x - y)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqiOutput {
    pub policy: Policy,
    pub q: QModel,
    pub action_grid: Vec<Vec<f64>>,
}

/// Runs FQI and returns the final Q-model along with its greedy policy.
pub fn fit_fqi(d: &Dataset, spec: &MdpSpec, cfg: &FqiConfig, stream: &RngStream) -> Result<FqiOutput> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.n_iterations == 0 {
        return Err(Error::BadHyperparam {
            name: "n_iterations".into(),
            reason: "must be >= 1".into(),
        });
    }
    let grid = cfg
        .action_grid
        .clone()
        .unwrap_or_else(|| default_action_grid(&spec.action_space));
    if grid.is_empty() {
        return Err(Error::InvalidArgument("action grid is empty".into()));
    }
    let n_states = spec.state_space.n_discrete();
    let gamma = spec.gamma;
    let transitions = d.transitions();
    let action_index: Vec<usize> = transitions
        .iter()
        .map(|t| nearest_grid_index(&grid, &t.action))
        .collect();
    let mut q = QModel::Zero;
    for it in 1..=cfg.n_iterations {
        let targets: Vec<f64> = transitions
            .par_iter()
            .map(|t| {
                if t.absorbing || matches!(q, QModel::Zero) {
                    return t.reward;
                }
                let best = grid
                    .iter()
                    .enumerate()
                    .map(|(i, a)| q.predict(&t.next_state, i, a))
                    .fold(f64::NEG_INFINITY, f64::max);
                t.reward + gamma * best
            })
            .collect();
        let samples: Vec<Sample<'_>> = transitions
            .iter()
            .zip(&targets)
            .zip(&action_index)
            .map(|((t, &y), &ai)| Sample {
                state: &t.state,
                action_index: ai,
                action: &t.action,
                target: y,
            })
            .collect();
        q = QModel::fit(&cfg.regressor, &samples, n_states, grid.len(), &stream.child(it as u64))
            .map_err(|e| Error::RegressorFit {
                iteration: it,
                cause: e.to_string(),
            })?;
    }
    let policy = Policy::GridGreedyQ {
        action_space: spec.action_space.clone(),
        action_grid: grid.clone(),
        q: q.clone(),
    };
    Ok(FqiOutput {
        policy,
        q,
        action_grid: grid,
    })
}

pub fn pg_fqi(d: &Dataset, spec: &MdpSpec, cfg: &FqiConfig, stream: &RngStream) -> Result<Policy> {
    Ok(fit_fqi(d, spec, cfg, stream)?.policy)
}
