//! Q-function regressors used by fitted Q-iteration and LSPI.
//!
//! Inputs are a state vector plus an action, which each model sees in its
//! own way: the tabular model by (state index, action index), the k-NN and
//! tree models by the concatenated real vector `[s, a]`, the linear model
//! through a [`Basis`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Regressor family and its hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegressorSpec {
    TabularMean,
    Knn { k: usize },
    ExtraTrees { n_estimators: usize, min_samples_split: usize },
}

/// One regression sample.
#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub state: &'a [f64],
    pub action_index: usize,
    pub action: &'a [f64],
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum QModel {
    Zero,
    Tabular(TabularModel),
    Knn(KnnModel),
    Forest(Forest),
    Linear(LinearQ),
}

impl QModel {
    pub fn predict(&self, state: &[f64], action_index: usize, action: &[f64]) -> f64 {
        match self {
            QModel::Zero => 0.0,
            QModel::Tabular(m) => m.predict(state, action_index),
            QModel::Knn(m) => m.predict(&concat(state, action)),
            QModel::Forest(m) => m.predict(&concat(state, action)),
            QModel::Linear(m) => m.predict(state, action_index),
        }
    }

    /// Fits a fresh model of the given family.
    pub fn fit(
        spec: &RegressorSpec,
        samples: &[Sample<'_>],
        n_states: Option<usize>,
        n_actions: usize,
        stream: &RngStream,
    ) -> Result<QModel> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(match spec {
            RegressorSpec::TabularMean => {
                let n_states = n_states.ok_or_else(|| {
                    Error::Unsupported("tabular regressor needs a discrete state space".into())
                })?;
                QModel::Tabular(TabularModel::fit(samples, n_states, n_actions)?)
            }
            RegressorSpec::Knn { k } => QModel::Knn(KnnModel::fit(samples, *k)?),
            RegressorSpec::ExtraTrees {
                n_estimators,
                min_samples_split,
            } => QModel::Forest(Forest::fit(samples, *n_estimators, *min_samples_split, stream)?),
        })
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

pub(crate) fn state_index(state: &[f64], n_states: usize) -> Option<usize> {
    let v = *state.first()?;
    (v >= 0.0 && v.fract() == 0.0 && v < n_states as f64).then_some(v as usize)
}

/// Cell means over (state index, action index); unvisited cells predict 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularModel {
    pub n_states: usize,
    pub n_actions: usize,
    pub values: Vec<Vec<f64>>,
}

impl TabularModel {
    fn fit(samples: &[Sample<'_>], n_states: usize, n_actions: usize) -> Result<Self> {
        let mut sums = vec![vec![0.0; n_actions]; n_states];
        let mut counts = vec![vec![0usize; n_actions]; n_states];
        for s in samples {
            let i = state_index(s.state, n_states).ok_or_else(|| {
                Error::InvalidArgument(format!("state {:?} is not a valid index", s.state))
            })?;
            if s.action_index >= n_actions {
                return Err(Error::IndexOutOfRange {
                    index: s.action_index,
                    size: n_actions,
                });
            }
            sums[i][s.action_index] += s.target;
            counts[i][s.action_index] += 1;
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(row, c)| {
                row.iter()
                    .zip(c)
                    .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
                    .collect()
            })
            .collect();
        Ok(Self {
            n_states,
            n_actions,
            values,
        })
    }

    pub fn predict(&self, state: &[f64], action_index: usize) -> f64 {
        match state_index(state, self.n_states) {
            Some(i) if action_index < self.n_actions => self.values[i][action_index],
            _ => 0.0,
        }
    }
}

/// Mean target of the k nearest stored inputs (Euclidean, ties by index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl KnnModel {
    fn fit(samples: &[Sample<'_>], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::BadHyperparam {
                name: "k".into(),
                reason: "must be >= 1".into(),
            });
        }
        Ok(Self {
            k: k.min(samples.len()),
            inputs: samples.iter().map(|s| concat(s.state, s.action)).collect(),
            targets: samples.iter().map(|s| s.target).collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut d: Vec<(f64, usize)> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum(), i))
            .collect();
        let k = self.k;
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < d.len() {
            d.select_nth_unstable_by(k - 1, cmp);
        }
        d[..k].iter().map(|&(_, i)| self.targets[i]).sum::<f64>() / k as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// A totally randomized regression tree: each split picks a random
/// non-constant feature and a uniform threshold inside its observed range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    fn fit<R: Rng>(inputs: &[Vec<f64>], targets: &[f64], min_split: usize, rng: &mut R) -> Tree {
        let mut tree = Tree { nodes: Vec::new() };
        let mut idx: Vec<usize> = (0..inputs.len()).collect();
        tree.grow(inputs, targets, &mut idx, min_split.max(2), rng);
        tree
    }

    fn grow<R: Rng>(
        &mut self,
        inputs: &[Vec<f64>],
        targets: &[f64],
        idx: &mut [usize],
        min_split: usize,
        rng: &mut R,
    ) -> usize {
        let me = self.nodes.len();
        let mean = idx.iter().map(|&i| targets[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(TreeNode::Leaf { value: mean });
        if idx.len() < min_split {
            return me;
        }
        let dim = inputs[idx[0]].len();
        let ranges: Vec<(usize, f64, f64)> = (0..dim)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(inputs[i][f]), hi.max(inputs[i][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return me;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let threshold = lo + rng.random::<f64>() * (hi - lo);
        // partition: left holds x < threshold
        let mut split = 0;
        for j in 0..idx.len() {
            if inputs[idx[j]][feature] < threshold {
                idx.swap(split, j);
                split += 1;
            }
        }
        if split == 0 || split == idx.len() {
            return me;
        }
        let (l, r) = idx.split_at_mut(split);
        let left = self.grow(inputs, targets, l, min_split, rng);
        let right = self.grow(inputs, targets, r, min_split, rng);
        self.nodes[me] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        me
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[*feature] < *threshold { *left } else { *right },
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
}

impl Forest {
    fn fit(
        samples: &[Sample<'_>],
        n_estimators: usize,
        min_samples_split: usize,
        stream: &RngStream,
    ) -> Result<Self> {
        if n_estimators == 0 {
            return Err(Error::BadHyperparam {
                name: "n_estimators".into(),
                reason: "must be >= 1".into(),
            });
        }
        let inputs: Vec<Vec<f64>> = samples.iter().map(|s| concat(s.state, s.action)).collect();
        let targets: Vec<f64> = samples.iter().map(|s| s.target).collect();
        let trees = (0..n_estimators)
            .map(|t| {
                let mut rng = stream.child(t as u64).rng();
                Tree::fit(&inputs, &targets, min_samples_split, &mut rng)
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Feature map for linear Q-functions over (state, action index).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Basis {
    /// One indicator per (state, action) cell.
    Tabular { n_states: usize, n_actions: usize },
    /// An affine block `[1, s_0, .., s_{d-1}]` per action index.
    PerActionLinear { state_dim: usize, n_actions: usize },
}

impl Basis {
    pub fn dim(&self) -> usize {
        match self {
            Basis::Tabular {
                n_states,
                n_actions,
            } => n_states * n_actions,
            Basis::PerActionLinear {
                state_dim,
                n_actions,
            } => (state_dim + 1) * n_actions,
        }
    }

    pub fn n_actions(&self) -> usize {
        match self {
            Basis::Tabular { n_actions, .. } | Basis::PerActionLinear { n_actions, .. } => {
                *n_actions
            }
        }
    }

    /// Writes φ(s, a) into `out` (which must have length `dim()`).
    pub fn features_into(&self, state: &[f64], action_index: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        match self {
            Basis::Tabular {
                n_states,
                n_actions,
            } => {
                if let Some(s) = state_index(state, *n_states) {
                    if action_index < *n_actions {
                        out[s * n_actions + action_index] = 1.0;
                    }
                }
            }
            Basis::PerActionLinear {
                state_dim,
                n_actions,
            } => {
                if action_index < *n_actions {
                    let base = action_index * (state_dim + 1);
                    out[base] = 1.0;
                    out[base + 1..base + 1 + state_dim].copy_from_slice(&state[..*state_dim]);
                }
            }
        }
    }

    pub fn features(&self, state: &[f64], action_index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.features_into(state, action_index, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearQ {
    pub basis: Basis,
    pub weights: Vec<f64>,
}

impl LinearQ {
    pub fn predict(&self, state: &[f64], action_index: usize) -> f64 {
        self.basis
            .features(state, action_index)
            .iter()
            .zip(&self.weights)
            .map(|(a, b)| a * b)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples<'a>(xs: &'a [Vec<f64>], a: &'a [f64], ys: &[f64]) -> Vec<Sample<'a>> {
        xs.iter()
            .zip(ys)
            .map(|(x, &y)| Sample {
                state: x,
                action_index: 0,
                action: a,
                target: y,
            })
            .collect()
    }

    #[test]
    fn tabular_means_per_cell() {
        let xs = vec![vec![0.0], vec![0.0], vec![1.0]];
        let a = [0.0];
        let s = samples(&xs, &a, &[1.0, 3.0, 5.0]);
        let m = QModel::fit(&RegressorSpec::TabularMean, &s, Some(2), 1, &RngStream::new(0))
            .unwrap();
        assert_eq!(m.predict(&[0.0], 0, &a), 2.0);
        assert_eq!(m.predict(&[1.0], 0, &a), 5.0);
    }

    #[test]
    fn tabular_requires_discrete_states() {
        let xs = vec![vec![0.5]];
        let a = [0.0];
        let s = samples(&xs, &a, &[1.0]);
        assert!(QModel::fit(&RegressorSpec::TabularMean, &s, None, 1, &RngStream::new(0)).is_err());
        assert!(QModel::fit(&RegressorSpec::TabularMean, &s, Some(2), 1, &RngStream::new(0)).is_err());
    }

    #[test]
    fn knn_averages_nearest() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys: Vec<f64> = (0..10).map(|i| i as f64 * 10.0).collect();
        let a: [f64; 0] = [];
        let s = samples(&xs, &a, &ys);
        let m = QModel::fit(&RegressorSpec::Knn { k: 3 }, &s, None, 1, &RngStream::new(0)).unwrap();
        // neighbours of 4.1 are 4, 5, 3
        assert!((m.predict(&[4.1], 0, &a) - 40.0).abs() < 1e-12);
    }

    #[test]
    fn single_tree_interpolates_training_points_when_fully_grown() {
        let xs: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64 * 0.37]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x[0]).sin()).collect();
        let a: [f64; 0] = [];
        let s = samples(&xs, &a, &ys);
        let spec = RegressorSpec::ExtraTrees {
            n_estimators: 1,
            min_samples_split: 2,
        };
        let m = QModel::fit(&spec, &s, None, 1, &RngStream::new(5)).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((m.predict(x, 0, &a) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forest_is_seed_deterministic_and_smooths() {
        let xs: Vec<Vec<f64>> = (0..200).map(|i| vec![i as f64 / 200.0]).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x[0]).collect();
        let a: [f64; 0] = [];
        let s = samples(&xs, &a, &ys);
        let spec = RegressorSpec::ExtraTrees {
            n_estimators: 20,
            min_samples_split: 10,
        };
        let m1 = QModel::fit(&spec, &s, None, 1, &RngStream::new(9)).unwrap();
        let m2 = QModel::fit(&spec, &s, None, 1, &RngStream::new(9)).unwrap();
        assert_eq!(m1, m2);
        assert!((m1.predict(&[0.5], 0, &a) - 1.0).abs() < 0.1);
    }

    #[test]
    fn basis_layouts() {
        let b = Basis::Tabular {
            n_states: 2,
            n_actions: 3,
        };
        assert_eq!(b.features(&[1.0], 2), vec![0., 0., 0., 0., 0., 1.]);
        let p = Basis::PerActionLinear {
            state_dim: 2,
            n_actions: 2,
        };
        assert_eq!(p.features(&[4.0, 5.0], 1), vec![0., 0., 0., 1., 4., 5.]);
    }
}
