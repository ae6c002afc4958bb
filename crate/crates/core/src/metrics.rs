//! Performance indexes: Monte-Carlo returns and k-NN information estimates.
//!
//! Neighbour search is exact brute force. Per-point terms are sorted before
//! summation so every estimate is invariant, bit for bit, to the order of
//! its samples.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::envs::{environment_copy, Environment};
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::rng::RngStream;
use crate::rollout::run_episode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnKind {
    #[default]
    Discounted,
    Total,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnEstimate {
    pub mean: f64,
    pub std: f64,
    pub n_episodes: usize,
    pub kind: ReturnKind,
}

impl ReturnEstimate {
    pub fn standard_error(&self) -> f64 {
        self.std / (self.n_episodes as f64).sqrt()
    }

    /// Mean and sample standard deviation of per-episode returns.
    pub fn from_returns(returns: &[f64], kind: ReturnKind) -> Self {
        let n = returns.len();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std,
            n_episodes: n,
            kind,
        }
    }
}

/// Return of one episode's rewards under `kind`.
pub fn episode_return(rewards: impl IntoIterator<Item = f64>, gamma: f64, kind: ReturnKind) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    let mut n = 0usize;
    for r in rewards {
        total += match kind {
            ReturnKind::Discounted => disc * r,
            _ => r,
        };
        disc *= gamma;
        n += 1;
    }
    match kind {
        ReturnKind::Average if n > 0 => total / n as f64,
        _ => total,
    }
}

/// Monte-Carlo estimate of a policy's return over `n_episodes` rollouts on a
/// private copy of `env`. Environment noise comes from `stream/[0]` and
/// policy noise from `stream/[1]`, both consumed episode after episode, so
/// two policies evaluated on one stream on a fixed-horizon environment see
/// the same initial states and disturbances.
pub fn evaluate_policy(
    env: &dyn Environment,
    policy: &Policy,
    n_episodes: usize,
    kind: ReturnKind,
    stream: &RngStream,
) -> Result<ReturnEstimate> {
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let gamma = env.spec().gamma;
    let mut env = environment_copy(env, &stream.child(0));
    let mut policy_rng = stream.child(1).rng();
    let returns = (0..n_episodes)
        .map(|_| {
            let ep = run_episode(env.as_mut(), policy, &mut policy_rng)?;
            Ok(episode_return(ep.iter().map(|t| t.reward), gamma, kind))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ReturnEstimate::from_returns(&returns, kind))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    /// Nats.
    pub value: f64,
    pub k: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    /// `max(raw, 0)`, in nats.
    pub value: f64,
    pub raw: f64,
    pub k: usize,
}

fn flatten(points: &[Vec<f64>], what: &str) -> Result<(Vec<f64>, usize)> {
    let d = points.first().map_or(0, Vec::len);
    if d == 0 {
        return Err(Error::InvalidArgument(format!("{what}: dimension must be >= 1")));
    }
    if let Some(p) = points.iter().find(|p| p.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: p.len(),
        });
    }
    Ok((points.concat(), d))
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Log-volume of the d-dimensional Euclidean unit ball.
fn ln_unit_ball_volume(d: usize) -> f64 {
    0.5 * d as f64 * PI.ln() - ln_gamma(0.5 * d as f64 + 1.0)
}

/// Kozachenko–Leonenko k-NN estimate of differential entropy (Euclidean).
pub fn knn_entropy(points: &[Vec<f64>], k: usize) -> Result<EntropyEstimate> {
    let n = points.len();
    if k == 0 || n <= k {
        return Err(Error::NotEnoughSamples { n, k });
    }
    let (flat, d) = flatten(points, "knn_entropy")?;
    let log_rho: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &flat[i * d..(i + 1) * d];
            let mut dist: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    flat[j * d..(j + 1) * d]
                        .iter()
                        .zip(xi)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .collect();
            let (_, kth, _) = dist.select_nth_unstable_by(k - 1, f64::total_cmp);
            kth.sqrt().max(1e-12).ln()
        })
        .collect();
    let value = d as f64 / n as f64 * sorted_sum(log_rho) + ln_unit_ball_volume(d)
        + digamma(n as f64)
        - digamma(k as f64);
    Ok(EntropyEstimate {
        value,
        k,
        n_samples: n,
    })
}

fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn is_constant(flat: &[f64], d: usize) -> bool {
    let first = &flat[..d];
    flat.chunks(d).all(|c| c == first)
}

/// Kraskov–Stögbauer–Grassberger estimator (algorithm 1) of I(X; Y) with
/// the max-norm on the joint space. Constant marginals give 0.
pub fn knn_mutual_information(x: &[Vec<f64>], y: &[Vec<f64>], k: usize) -> Result<MiEstimate> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if k == 0 || n <= k {
        return Err(Error::NotEnoughSamples { n, k });
    }
    let (fx, dx) = flatten(x, "knn_mutual_information x")?;
    let (fy, dy) = flatten(y, "knn_mutual_information y")?;
    if is_constant(&fx, dx) || is_constant(&fy, dy) {
        return Ok(MiEstimate {
            value: 0.0,
            raw: 0.0,
            k,
        });
    }
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &fx[i * dx..(i + 1) * dx];
            let yi = &fy[i * dy..(i + 1) * dy];
            let mut marg = Vec::with_capacity(n - 1);
            let mut joint = Vec::with_capacity(n - 1);
            for j in (0..n).filter(|&j| j != i) {
                let ex = max_norm(&fx[j * dx..(j + 1) * dx], xi);
                let ey = max_norm(&fy[j * dy..(j + 1) * dy], yi);
                marg.push((ex, ey));
                joint.push(ex.max(ey));
            }
            let (_, eps, _) = joint.select_nth_unstable_by(k - 1, f64::total_cmp);
            let eps = *eps;
            let nx = marg.iter().filter(|(ex, _)| *ex < eps).count();
            let ny = marg.iter().filter(|(_, ey)| *ey < eps).count();
            digamma(nx as f64 + 1.0) + digamma(ny as f64 + 1.0)
        })
        .collect();
    let raw = digamma(k as f64) + digamma(n as f64) - sorted_sum(terms) / n as f64;
    Ok(MiEstimate {
        value: raw.max(0.0),
        raw,
        k,
    })
}
