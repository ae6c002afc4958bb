//! GPOMDP policy gradient for linear-Gaussian policies on box action spaces.
//!
//! The policy is `a = K s + σ ⊙ ξ` with ξ standard normal, parameterized by
//! `θ = [K row-major, log σ]`. Sampled actions are projected into the action
//! space before they reach the environment, while the score uses the
//! unprojected sample.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{environment_copy, Environment};
use crate::error::{Error, Result};
use crate::mdp::Space;
use crate::policy::{mat_vec, Policy};
use crate::rng::RngStream;
use crate::rollout::run_episode_with;

const DIVERGENCE_LIMIT: f64 = 1e6;
const N_BATCHES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    None,
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpomdpConfig {
    pub learning_rate: f64,
    pub n_epochs: usize,
    pub n_episodes_per_fit: usize,
    pub init_std: f64,
    pub baseline: Baseline,
}

impl Default for GpomdpConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            n_epochs: 50,
            n_episodes_per_fit: 10,
            init_std: 1.0,
            baseline: Baseline::Mean,
        }
    }
}

impl GpomdpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str, reason: String| {
            Err(Error::BadHyperparam {
                name: name.into(),
                reason,
            })
        };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", format!("{} is not a finite non-negative rate", self.learning_rate));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", format!("{} is not positive", self.init_std));
        }
        if self.n_episodes_per_fit == 0 {
            return bad("n_episodes_per_fit", "must be >= 1".into());
        }
        Ok(())
    }
}

/// `θ = (K, log σ)`; `gain` is `action_dim × state_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianParams {
    pub gain: Vec<Vec<f64>>,
    pub log_std: Vec<f64>,
}

impl LinearGaussianParams {
    pub fn zeros(state_dim: usize, action_dim: usize, std: f64) -> Self {
        Self {
            gain: vec![vec![0.0; state_dim]; action_dim],
            log_std: vec![std.ln(); action_dim],
        }
    }

    pub fn state_dim(&self) -> usize {
        self.gain.first().map_or(0, Vec::len)
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn n_params(&self) -> usize {
        self.action_dim() * (self.state_dim() + 1)
    }

    pub fn theta(&self) -> Vec<f64> {
        self.gain.iter().flatten().chain(&self.log_std).copied().collect()
    }

    pub fn from_theta(theta: &[f64], state_dim: usize, action_dim: usize) -> Result<Self> {
        if theta.len() != action_dim * (state_dim + 1) {
            return Err(Error::DimensionMismatch {
                expected: action_dim * (state_dim + 1),
                got: theta.len(),
            });
        }
        let (k, ls) = theta.split_at(action_dim * state_dim);
        Ok(Self {
            gain: k.chunks(state_dim.max(1)).take(action_dim).map(<[f64]>::to_vec).collect(),
            log_std: ls.to_vec(),
        })
    }

    pub fn policy(&self, action_space: Space, stochastic: bool) -> Policy {
        Policy::LinearGaussian {
            action_space,
            gain: self.gain.clone(),
            log_std: self.log_std.clone(),
            stochastic,
        }
    }

    fn check(&self, env: &dyn Environment) -> Result<()> {
        let spec = env.spec();
        if spec.action_space.is_discrete() {
            return Err(Error::Unsupported("GPOMDP needs a box action space".into()));
        }
        if self.state_dim() != spec.state_space.dim() || self.gain.iter().any(|r| r.len() != self.state_dim()) {
            return Err(Error::DimensionMismatch {
                expected: spec.state_space.dim(),
                got: self.state_dim(),
            });
        }
        if self.action_dim() != spec.action_space.dim() || self.gain.len() != self.action_dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.action_space.dim(),
                got: self.action_dim(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub grad: Vec<f64>,
    /// Per-component standard error from batch means.
    pub std_error: Vec<f64>,
    pub n_episodes: usize,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

struct Episode {
    rewards: Vec<f64>,
    /// Cumulative score Σ_{k≤t} ∇log π(a_k|s_k), flattened `T × n_params`.
    scores: Vec<f64>,
}

/// One rollout; env noise from `stream/[0]`, policy noise from `stream/[1]`.
fn rollout(env: &dyn Environment, p: &LinearGaussianParams, stream: &RngStream, with_scores: bool) -> Result<Episode> {
    let mut env = environment_copy(env, &stream.child(0));
    let mut rng = stream.child(1).rng();
    let (n, m) = (p.state_dim(), p.action_dim());
    let np = p.n_params();
    let std: Vec<f64> = p.log_std.iter().map(|l| l.exp()).collect();
    let space = env.spec().action_space.clone();
    let mut cum = vec![0.0; np];
    let mut scores = Vec::new();
    let ep = run_episode_with(env.as_mut(), |s, _| {
        let mut a = mat_vec(&p.gain, s);
        for j in 0..m {
            let xi: f64 = rng.sample(StandardNormal);
            a[j] += std[j] * xi;
            if with_scores {
                for k in 0..n {
                    cum[j * n + k] += xi / std[j] * s[k];
                }
                cum[m * n + j] += xi * xi - 1.0;
            }
        }
        if with_scores {
            scores.extend_from_slice(&cum);
        }
        space.project(&mut a);
        Ok(a)
    })?;
    Ok(Episode {
        rewards: ep.iter().map(|t| t.reward).collect(),
        scores,
    })
}

fn episode_stream(stream: &RngStream, i: usize) -> RngStream {
    stream.child(i as u64)
}

/// Mean discounted return of the stochastic policy over `n_episodes`.
/// Episode `i` uses `stream/[i]`, so two calls with the same stream share
/// their random numbers whatever θ is.
pub fn mc_objective(
    env: &dyn Environment,
    params: &LinearGaussianParams,
    n_episodes: usize,
    stream: &RngStream,
) -> Result<f64> {
    params.check(env)?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let gamma = env.spec().gamma;
    let mut returns = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let ep = rollout(env, params, &episode_stream(stream, i), false)?;
            Ok(crate::metrics::episode_return(ep.rewards, gamma, crate::metrics::ReturnKind::Discounted))
        })
        .collect::<Result<Vec<f64>>>()?;
    returns.sort_by(f64::total_cmp);
    Ok(returns.iter().sum::<f64>() / n_episodes as f64)
}

#[derive(Clone, Default)]
struct Accum {
    n: usize,
    /// Σ_n Σ_t γ^t c_{n,t} r_{n,t}
    cr: Vec<f64>,
    /// per t: Σ_n c_{n,t}
    c: Vec<Vec<f64>>,
    /// per t: Σ_n r_{n,t}, count
    r: Vec<f64>,
    count: Vec<usize>,
}

impl Accum {
    fn new(np: usize) -> Self {
        Self {
            cr: vec![0.0; np],
            ..Default::default()
        }
    }

    fn add(&mut self, ep: &Episode, gamma: f64, np: usize) {
        self.n += 1;
        let mut disc = 1.0;
        for (t, r) in ep.rewards.iter().enumerate() {
            if self.c.len() <= t {
                self.c.push(vec![0.0; np]);
                self.r.push(0.0);
                self.count.push(0);
            }
            let c = &ep.scores[t * np..(t + 1) * np];
            for p in 0..np {
                self.cr[p] += disc * c[p] * r;
                self.c[t][p] += c[p];
            }
            self.r[t] += r;
            self.count[t] += 1;
            disc *= gamma;
        }
    }

    fn merge(&mut self, other: &Accum) {
        self.n += other.n;
        for (a, b) in self.cr.iter_mut().zip(&other.cr) {
            *a += b;
        }
        for t in 0..other.c.len() {
            if self.c.len() <= t {
                self.c.push(vec![0.0; other.cr.len()]);
                self.r.push(0.0);
                self.count.push(0);
            }
            for (a, b) in self.c[t].iter_mut().zip(&other.c[t]) {
                *a += b;
            }
            self.r[t] += other.r[t];
            self.count[t] += other.count[t];
        }
    }

    fn gradient(&self, baseline: &[f64], gamma: f64) -> Vec<f64> {
        let mut g: Vec<f64> = self.cr.iter().map(|x| x / self.n as f64).collect();
        let mut disc = 1.0;
        for (t, c) in self.c.iter().enumerate() {
            let b = baseline.get(t).copied().unwrap_or(0.0);
            for (gp, cp) in g.iter_mut().zip(c) {
                *gp -= disc * b * cp / self.n as f64;
            }
            disc *= gamma;
        }
        g
    }
}

/// GPOMDP estimate of ∇J(θ) from `n_episodes` rollouts, episode `i` on
/// `stream/[i]`. The mean baseline is the per-timestep average reward of
/// the same batch.
pub fn gpomdp_gradient(
    env: &dyn Environment,
    params: &LinearGaussianParams,
    n_episodes: usize,
    baseline: Baseline,
    stream: &RngStream,
) -> Result<GradientEstimate> {
    params.check(env)?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let gamma = env.spec().gamma;
    let np = params.n_params();
    let n_batches = N_BATCHES.min(n_episodes);
    let batches = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let lo = b * n_episodes / n_batches;
            let hi = (b + 1) * n_episodes / n_batches;
            let mut acc = Accum::new(np);
            for i in lo..hi {
                let ep = rollout(env, params, &episode_stream(stream, i), true)?;
                acc.add(&ep, gamma, np);
            }
            Ok(acc)
        })
        .collect::<Result<Vec<Accum>>>()?;
    let mut total = Accum::new(np);
    for b in &batches {
        total.merge(b);
    }
    let b: Vec<f64> = match baseline {
        Baseline::None => Vec::new(),
        Baseline::Mean => total
            .r
            .iter()
            .zip(&total.count)
            .map(|(r, c)| r / *c as f64)
            .collect(),
    };
    let grad = total.gradient(&b, gamma);
    let std_error = if n_batches > 1 {
        let per_batch: Vec<Vec<f64>> = batches.iter().map(|a| a.gradient(&b, gamma)).collect();
        (0..np)
            .map(|p| {
                let mean = per_batch.iter().map(|g| g[p]).sum::<f64>() / n_batches as f64;
                let var = per_batch.iter().map(|g| (g[p] - mean).powi(2)).sum::<f64>()
                    / (n_batches - 1) as f64;
                (var / n_batches as f64).sqrt()
            })
            .collect()
    } else {
        vec![f64::NAN; np]
    };
    Ok(GradientEstimate {
        grad,
        std_error,
        n_episodes,
    })
}

/// Gradient ascent from `K = 0`, `σ = init_std`; returns the final parameters.
pub fn train_gpomdp(env: &dyn Environment, cfg: &GpomdpConfig, stream: &RngStream) -> Result<LinearGaussianParams> {
    cfg.validate()?;
    let spec = env.spec();
    let (n, m) = (spec.state_space.dim(), spec.action_space.dim());
    let mut params = LinearGaussianParams::zeros(n, m, cfg.init_std);
    params.check(env)?;
    for epoch in 0..cfg.n_epochs {
        let g = gpomdp_gradient(env, &params, cfg.n_episodes_per_fit, cfg.baseline, &stream.child(epoch as u64))?;
        let mut theta = params.theta();
        for (t, gi) in theta.iter_mut().zip(&g.grad) {
            *t += cfg.learning_rate * gi;
        }
        let magnitude = theta.iter().fold(0.0f64, |acc, x| if x.is_nan() { f64::INFINITY } else { acc.max(x.abs()) });
        if magnitude > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { epoch, magnitude });
        }
        params = LinearGaussianParams::from_theta(&theta, n, m)?;
    }
    Ok(params)
}

/// The policy-generation unit: trains and returns the stochastic policy.
pub fn pg_gpomdp(env: &dyn Environment, cfg: &GpomdpConfig, stream: &RngStream) -> Result<Policy> {
    let params = train_gpomdp(env, cfg, stream)?;
    Ok(params.policy(env.spec().action_space.clone(), true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::LqgEnv;

    fn lqg() -> LqgEnv {
        LqgEnv::standard(&RngStream::new(0))
    }

    #[test]
    fn theta_round_trip() {
        let p = LinearGaussianParams {
            gain: vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            log_std: vec![-1.0, -2.0, -3.0],
        };
        let theta = p.theta();
        assert_eq!(theta, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, -1.0, -2.0, -3.0]);
        assert_eq!(LinearGaussianParams::from_theta(&theta, 2, 3).unwrap(), p);
    }

    #[test]
    fn zero_learning_rate_keeps_theta() {
        let cfg = GpomdpConfig {
            learning_rate: 0.0,
            n_epochs: 5,
            n_episodes_per_fit: 4,
            init_std: 0.7,
            baseline: Baseline::Mean,
        };
        let p = train_gpomdp(&lqg(), &cfg, &RngStream::new(1)).unwrap();
        assert_eq!(p, LinearGaussianParams::zeros(2, 3, 0.7));
    }

    #[test]
    fn huge_step_trips_divergence_guard() {
        let cfg = GpomdpConfig {
            learning_rate: 1e9,
            n_epochs: 5,
            n_episodes_per_fit: 4,
            init_std: 1.0,
            baseline: Baseline::None,
        };
        assert!(matches!(
            train_gpomdp(&lqg(), &cfg, &RngStream::new(1)),
            Err(Error::Divergence { epoch: 0, .. })
        ));
    }

    #[test]
    fn common_random_numbers() {
        let p = LinearGaussianParams::zeros(2, 3, 0.5);
        let s = RngStream::new(4);
        let a = mc_objective(&lqg(), &p, 50, &s).unwrap();
        assert_eq!(a, mc_objective(&lqg(), &p, 50, &s).unwrap());
        let g1 = gpomdp_gradient(&lqg(), &p, 64, Baseline::Mean, &s).unwrap();
        let g2 = gpomdp_gradient(&lqg(), &p, 64, Baseline::Mean, &s).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn gradient_smaller_at_riccati_gain() {
        let env = lqg();
        let sol = env.riccati_solve().unwrap();
        let opt = LinearGaussianParams {
            gain: sol.mean_gain(),
            log_std: vec![0.1f64.ln(); 3],
        };
        let zero = LinearGaussianParams::zeros(2, 3, 0.1);
        let gain_norm = |g: &GradientEstimate| g.grad[..6].iter().map(|x| x * x).sum::<f64>().sqrt();
        let s = RngStream::new(9);
        let g_opt = gpomdp_gradient(&env, &opt, 20_000, Baseline::Mean, &s).unwrap();
        let g_zero = gpomdp_gradient(&env, &zero, 20_000, Baseline::Mean, &s).unwrap();
        assert!(gain_norm(&g_opt) < gain_norm(&g_zero), "{} vs {}", gain_norm(&g_opt), gain_norm(&g_zero));
    }

    #[test]
    fn improves_on_lqg() {
        let env = lqg();
        let cfg = GpomdpConfig {
            learning_rate: 0.01,
            n_epochs: 40,
            n_episodes_per_fit: 20,
            init_std: 0.5,
            baseline: Baseline::Mean,
        };
        let p = train_gpomdp(&env, &cfg, &RngStream::new(2)).unwrap();
        let start = LinearGaussianParams::zeros(2, 3, 0.5);
        let s = RngStream::new(11);
        assert!(mc_objective(&env, &p, 2000, &s).unwrap() > mc_objective(&env, &start, 2000, &s).unwrap());
    }

    #[test]
    fn discrete_actions_rejected() {
        use crate::envs::{FiniteMdp, FiniteMdpEnv};
        use crate::mdp::Horizon;
        let env = FiniteMdpEnv::new(FiniteMdp::chain(2, 0.9, Horizon::Finite(3)), &RngStream::new(0)).unwrap();
        assert!(pg_gpomdp(&env, &GpomdpConfig::default(), &RngStream::new(0)).is_err());
    }
}
