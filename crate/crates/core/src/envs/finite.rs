//! Tabular MDPs with an explicit model, and value iteration over them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::dataset::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::mdp::{Horizon, MdpSpec, Space};
use crate::rng::{RngStream, StreamRng};

/// Explicit finite MDP: `p[s][a][s']`, `r[s][a]`, initial distribution `mu0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteMdp {
    pub p: Vec<Vec<Vec<f64>>>,
    pub r: Vec<Vec<f64>>,
    pub gamma: f64,
    pub horizon: Horizon,
    pub mu0: Vec<f64>,
}

pub type QTable = Vec<Vec<f64>>;

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{what} has a negative entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl FiniteMdp {
    pub fn validate(&self) -> Result<()> {
        let n = self.p.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no states".into()));
        }
        let m = self.p[0].len();
        if m == 0 {
            return Err(Error::InvalidArgument("no actions".into()));
        }
        if self.r.len() != n || self.mu0.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.r.len().min(self.mu0.len()),
            });
        }
        for s in 0..n {
            if self.p[s].len() != m || self.r[s].len() != m {
                return Err(Error::InvalidArgument(format!("state {s} has ragged actions")));
            }
            for a in 0..m {
                if self.p[s][a].len() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: self.p[s][a].len(),
                    });
                }
                check_distribution(&self.p[s][a], &format!("P[{s},{a},.]"))?;
            }
        }
        check_distribution(&self.mu0, "mu0")?;
        self.spec().map(|_| ())
    }

    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn n_actions(&self) -> usize {
        self.p[0].len()
    }

    pub fn spec(&self) -> Result<MdpSpec> {
        MdpSpec::new(
            Space::discrete(self.n_states())?,
            Space::discrete(self.n_actions())?,
            self.gamma,
            self.horizon,
        )
    }

    /// Chain of `n` states; action 0 stays, action 1 moves right (the last
    /// state absorbs moves). Staying in the last state pays 1, everything
    /// else pays 0. Episodes start in state 0.
    pub fn chain(n: usize, gamma: f64, horizon: Horizon) -> Self {
        let mut p = vec![vec![vec![0.0; n]; 2]; n];
        let mut r = vec![vec![0.0; 2]; n];
        for s in 0..n {
            p[s][0][s] = 1.0;
            p[s][1][(s + 1).min(n - 1)] = 1.0;
        }
        r[n - 1][0] = 1.0;
        let mut mu0 = vec![0.0; n];
        mu0[0] = 1.0;
        Self {
            p,
            r,
            gamma,
            horizon,
            mu0,
        }
    }

    /// Random MDP whose probabilities are multiples of `1/resolution`, with
    /// rewards uniform in `[0, 1)` and a uniform initial distribution.
    pub fn random_rational<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        resolution: usize,
        gamma: f64,
        horizon: Horizon,
        rng: &mut R,
    ) -> Self {
        let p = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        let mut counts = vec![0usize; n_states];
                        for _ in 0..resolution {
                            counts[rng.random_range(0..n_states)] += 1;
                        }
                        counts
                            .into_iter()
                            .map(|c| c as f64 / resolution as f64)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let r = (0..n_states)
            .map(|_| (0..n_actions).map(|_| rng.random::<f64>()).collect())
            .collect();
        Self {
            p,
            r,
            gamma,
            horizon,
            mu0: vec![1.0 / n_states as f64; n_states],
        }
    }

    /// A dataset whose empirical model is exactly this MDP: for every
    /// `(s, a, s')`, `P(s'|s,a)·resolution` one-step trajectories. Fails unless
    /// every probability is a multiple of `1/resolution`.
    pub fn model_dataset(&self, resolution: usize) -> Result<Dataset> {
        let mut trajectories = Vec::new();
        for s in 0..self.n_states() {
            for a in 0..self.n_actions() {
                for (s2, &prob) in self.p[s][a].iter().enumerate() {
                    let copies = prob * resolution as f64;
                    if (copies - copies.round()).abs() > 1e-9 {
                        return Err(Error::InvalidArgument(format!(
                            "P[{s},{a},{s2}] = {prob} is not a multiple of 1/{resolution}"
                        )));
                    }
                    for _ in 0..copies.round() as usize {
                        trajectories.push(vec![Transition {
                            state: vec![s as f64],
                            action: vec![a as f64],
                            reward: self.r[s][a],
                            next_state: vec![s2 as f64],
                            absorbing: false,
                            last: true,
                        }]);
                    }
                }
            }
        }
        Dataset::from_trajectories(trajectories)
    }

    /// Samples `s' ~ P(.|s, a)` and returns it with `R(s, a)`.
    pub fn finite_step<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> Result<(usize, f64)> {
        if s >= self.n_states() {
            return Err(Error::IndexOutOfRange {
                index: s,
                size: self.n_states(),
            });
        }
        if a >= self.n_actions() {
            return Err(Error::IndexOutOfRange {
                index: a,
                size: self.n_actions(),
            });
        }
        Ok((sample_index(&self.p[s][a], rng), self.r[s][a]))
    }

    /// `n_iters` Bellman optimality backups from `Q_0 = 0`.
    pub fn value_iteration(&self, n_iters: usize) -> QTable {
        let (n, m) = (self.n_states(), self.n_actions());
        let mut q = vec![vec![0.0; m]; n];
        for _ in 0..n_iters {
            let v: Vec<f64> = q
                .iter()
                .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect();
            q = (0..n)
                .map(|s| {
                    (0..m)
                        .map(|a| {
                            let future: f64 =
                                self.p[s][a].iter().zip(&v).map(|(p, v)| p * v).sum();
                            self.r[s][a] + self.gamma * future
                        })
                        .collect()
                })
                .collect();
        }
        q
    }
}

fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding slack: fall back to the last state with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Interactive wrapper around a [`FiniteMdp`].
#[derive(Debug, Clone)]
pub struct FiniteMdpEnv {
    mdp: FiniteMdp,
    spec: MdpSpec,
    state: usize,
    rng: StreamRng,
}

impl FiniteMdpEnv {
    pub fn new(mdp: FiniteMdp, stream: &RngStream) -> Result<Self> {
        mdp.validate()?;
        Ok(Self {
            spec: mdp.spec()?,
            mdp,
            state: 0,
            rng: stream.rng(),
        })
    }

    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }
}

impl Environment for FiniteMdpEnv {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = sample_index(&self.mdp.mu0, &mut self.rng);
        vec![self.state as f64]
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if action.len() != 1 {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: action.len(),
            });
        }
        let a = action[0];
        if !(a >= 0.0 && a.fract() == 0.0) {
            return Err(Error::InvalidArgument(format!("action {a} is not an index")));
        }
        let (next, reward) = self.mdp.finite_step(self.state, a as usize, &mut self.rng)?;
        self.state = next;
        Ok(StepOutcome {
            next_state: vec![next as f64],
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
        "finite"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STAY: usize = 0;
    const GO: usize = 1;

    #[test]
    fn deterministic_chain_steps() {
        let mdp = FiniteMdp::chain(2, 0.5, Horizon::Finite(5));
        let mut rng = RngStream::new(0).rng();
        assert_eq!(mdp.finite_step(0, GO, &mut rng).unwrap().0, 1);
        assert_eq!(mdp.finite_step(1, STAY, &mut rng).unwrap().1, 1.0);
        assert!(mdp.finite_step(2, STAY, &mut rng).is_err());
        assert!(mdp.finite_step(0, 2, &mut rng).is_err());
    }

    #[test]
    fn empirical_frequencies_match_model() {
        let mdp = FiniteMdp {
            p: vec![vec![vec![0.2, 0.5, 0.3]]; 3],
            r: vec![vec![0.0]; 3],
            gamma: 0.9,
            horizon: Horizon::Finite(10),
            mu0: vec![1.0, 0.0, 0.0],
        };
        mdp.validate().unwrap();
        let mut rng = RngStream::new(3).rng();
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[mdp.finite_step(0, 0, &mut rng).unwrap().0] += 1;
        }
        for (c, p) in counts.iter().zip([0.2, 0.5, 0.3]) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn hand_backups_on_chain() {
        let mdp = FiniteMdp::chain(2, 0.5, Horizon::Finite(10));
        let q1 = mdp.value_iteration(1);
        assert_eq!(q1[1][STAY], 1.0);
        let q2 = mdp.value_iteration(2);
        assert_eq!(q2[1][STAY], 1.5);
        assert_eq!(q2[0][GO], 0.5);
    }

    #[test]
    fn myopic_value_iteration_is_reward() {
        let mut rng = RngStream::new(8).rng();
        let mdp = FiniteMdp::random_rational(4, 3, 8, 0.0, Horizon::Finite(5), &mut rng);
        mdp.validate().unwrap();
        assert_eq!(mdp.value_iteration(7), mdp.r);
    }

    #[test]
    fn value_iteration_monotone_for_nonnegative_rewards() {
        let mut rng = RngStream::new(9).rng();
        let mdp = FiniteMdp::random_rational(5, 2, 8, 0.9, Horizon::Finite(5), &mut rng);
        let mut prev = mdp.value_iteration(0);
        for k in 1..30 {
            let q = mdp.value_iteration(k);
            for (a, b) in q.iter().flatten().zip(prev.iter().flatten()) {
                assert!(a >= b);
            }
            prev = q;
        }
    }

    #[test]
    fn model_dataset_counts() {
        let mdp = FiniteMdp::chain(3, 0.9, Horizon::Finite(4));
        let d = mdp.model_dataset(4).unwrap();
        assert_eq!(d.len(), 3 * 2 * 4);
        let mut bad = mdp.clone();
        bad.p[0][0] = vec![1.0 / 3.0, 2.0 / 3.0, 0.0];
        assert!(bad.model_dataset(4).is_err());
    }

    #[test]
    fn validation_catches_bad_probabilities() {
        let mut mdp = FiniteMdp::chain(2, 0.9, Horizon::Finite(4));
        mdp.p[0][0] = vec![0.5, 0.6];
        assert!(mdp.validate().is_err());
        let mut mdp = FiniteMdp::chain(2, 0.9, Horizon::Finite(4));
        mdp.mu0 = vec![0.5, 0.4];
        assert!(mdp.validate().is_err());
    }

    #[test]
    fn env_copies() {
        let env = FiniteMdpEnv::new(
            FiniteMdp {
                p: vec![vec![vec![0.5, 0.5]; 2]; 2],
                r: vec![vec![0.0; 2]; 2],
                gamma: 0.9,
                horizon: Horizon::Finite(50),
                mu0: vec![0.5, 0.5],
            },
            &RngStream::new(1),
        )
        .unwrap();
        let run = |e: &mut Box<dyn Environment>| -> Vec<f64> {
            let mut v = e.reset();
            for _ in 0..50 {
                v.extend(e.step(&[0.0]).unwrap().next_state);
            }
            v
        };
        let mut a = super::super::environment_copy(&env, &RngStream::new(5));
        let mut b = super::super::environment_copy(&env, &RngStream::new(5));
        let mut c = super::super::environment_copy(&env, &RngStream::new(6));
        let (ra, rb, rc) = (run(&mut a), run(&mut b), run(&mut c));
        assert_eq!(ra, rb);
        assert_ne!(ra, rc);
    }
}
