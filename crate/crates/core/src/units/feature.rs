//! Feature engineering: forward mutual-information selection, z-score
//! standardization, and the environment/dataset transform they produce.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::envs::{EngineeredEnv, Environment};
use crate::error::{Error, Result};
use crate::mdp::Space;
use crate::metrics::knn_mutual_information;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Only the identity shaping is provided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardShape {
    #[default]
    Identity,
}

/// Select state features, then optionally standardize them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub selected_state_indices: Vec<usize>,
    pub standardization: Option<Standardization>,
    #[serde(default)]
    pub reward_shape: RewardShape,
}

impl FeatureTransform {
    pub fn new(selected_state_indices: Vec<usize>, state_dim: usize) -> Result<Self> {
        let t = Self {
            selected_state_indices,
            standardization: None,
            reward_shape: RewardShape::Identity,
        };
        t.validate(state_dim)?;
        Ok(t)
    }

    pub fn identity(state_dim: usize) -> Self {
        Self {
            selected_state_indices: (0..state_dim).collect(),
            standardization: None,
            reward_shape: RewardShape::Identity,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        let idx = &self.selected_state_indices;
        if idx.is_empty() {
            return Err(Error::InvalidArgument("feature selection is empty".into()));
        }
        for (k, &i) in idx.iter().enumerate() {
            if i >= state_dim {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: state_dim,
                });
            }
            if idx[..k].contains(&i) {
                return Err(Error::InvalidArgument(format!("feature {i} selected twice")));
            }
        }
        if let Some(st) = &self.standardization {
            if st.mean.len() != idx.len() || st.std.len() != idx.len() {
                return Err(Error::DimensionMismatch {
                    expected: idx.len(),
                    got: st.mean.len(),
                });
            }
        }
        Ok(())
    }

    pub fn is_identity(&self, state_dim: usize) -> bool {
        self.standardization.is_none()
            && self.selected_state_indices.len() == state_dim
            && self.selected_state_indices.iter().enumerate().all(|(k, &i)| k == i)
    }

    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.selected_state_indices.iter().map(|&i| state[i]).collect();
        if let Some(st) = &self.standardization {
            for ((v, m), s) in out.iter_mut().zip(&st.mean).zip(&st.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Image of a state space under the transform.
    pub fn transform_space(&self, space: &Space) -> Result<Space> {
        self.validate(space.dim())?;
        if self.is_identity(space.dim()) {
            return Ok(space.clone());
        }
        let (low, high) = match space {
            Space::Discrete { n } => (vec![0.0], vec![(*n - 1) as f64]),
            Space::Box { low, high } => (low.clone(), high.clone()),
        };
        let lo = self.apply(&low);
        let hi = self.apply(&high);
        Space::boxed(lo, hi)
    }

    /// Adds z-score standardization fitted on the dataset's (selected) states.
    /// Zero-variance features keep unit scale.
    pub fn with_standardization(mut self, d: &Dataset) -> Result<Self> {
        if d.is_empty() {
            return Err(Error::EmptyDataset);
        }
        self.standardization = None;
        let rows: Vec<Vec<f64>> = d.transitions().iter().map(|t| self.apply(&t.state)).collect();
        let n = rows.len() as f64;
        let k = self.selected_state_indices.len();
        let mean: Vec<f64> = (0..k).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..k)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        self.standardization = Some(Standardization { mean, std });
        Ok(self)
    }

    pub fn apply_to_dataset(&self, d: &Dataset) -> Dataset {
        d.map_states(|s| self.apply(s))
    }
}

/// Wraps `env` so its observations pass through `t`.
pub fn fe_engineer_environment(env: &dyn Environment, t: &FeatureTransform) -> Result<EngineeredEnv> {
    EngineeredEnv::new(env.box_clone(), t.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiObjective {
    /// Raw mutual information.
    #[default]
    Raw,
    /// Mutual information divided by the number of selected features.
    PerFeature,
}

/// Estimated I([s_S, a]; [s'_S, r]) for a feature subset `S`.
pub fn mi_objective(d: &Dataset, subset: &[usize], k: usize) -> Result<f64> {
    let x: Vec<Vec<f64>> = d
        .transitions()
        .iter()
        .map(|t| {
            let mut v: Vec<f64> = subset.iter().map(|&i| t.state[i]).collect();
            v.extend_from_slice(&t.action);
            v
        })
        .collect();
    let y: Vec<Vec<f64>> = d
        .transitions()
        .iter()
        .map(|t| {
            let mut v: Vec<f64> = subset.iter().map(|&i| t.next_state[i]).collect();
            v.push(t.reward);
            v
        })
        .collect();
    Ok(knn_mutual_information(&x, &y, k)?.value)
}

/// Result of a forward selection run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub transform: FeatureTransform,
    /// Objective after each greedy addition.
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn score(&self) -> f64 {
        self.scores.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Greedy forward selection of `n_features` state features by the MI
/// objective; ties go to the lowest feature index.
pub fn fe_forward_mi_select(
    d: &Dataset,
    k: usize,
    n_features: usize,
    objective: MiObjective,
) -> Result<Selection> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = d.state_dim();
    if n_features == 0 || n_features > dim {
        return Err(Error::InvalidArgument(format!(
            "n_features must be in 1..={dim}, got {n_features}"
        )));
    }
    let mut selected: Vec<usize> = Vec::with_capacity(n_features);
    let mut scores = Vec::with_capacity(n_features);
    while selected.len() < n_features {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..dim).filter(|c| !selected.contains(c)) {
            let mut subset = selected.clone();
            subset.push(c);
            let mut v = mi_objective(d, &subset, k)?;
            if objective == MiObjective::PerFeature {
                v /= subset.len() as f64;
            }
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        let (c, v) = best.expect("at least one candidate remains");
        selected.push(c);
        scores.push(v);
    }
    Ok(Selection {
        transform: FeatureTransform::new(selected, dim)?,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Transition;
    use crate::envs::LqgEnv;
    use crate::rng::RngStream;
    use crate::units::dg_random_uniform;
    use rand::Rng;

    /// s'_0 = 0.8 s_0 + a + small noise, s_1 pure noise, reward = -s_0^2.
    fn synthetic(n: usize, seed: u64) -> Dataset {
        let mut rng = RngStream::new(seed).rng();
        let trajectories = (0..n)
            .map(|_| {
                let s = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let a = vec![rng.random_range(-1.0..1.0)];
                let next = vec![
                    0.8 * s[0] + a[0] + 0.01 * rng.random::<f64>(),
                    rng.random_range(-1.0..1.0),
                ];
                vec![Transition {
                    reward: -s[0] * s[0],
                    state: s,
                    action: a,
                    next_state: next,
                    absorbing: false,
                    last: true,
                }]
            })
            .collect();
        Dataset::from_trajectories(trajectories).unwrap()
    }

    #[test]
    fn picks_informative_feature() {
        let d = synthetic(1000, 1);
        let sel = fe_forward_mi_select(&d, 5, 1, MiObjective::Raw).unwrap();
        let brute: Vec<f64> = (0..2).map(|c| mi_objective(&d, &[c], 5).unwrap()).collect();
        assert!(brute[0] > brute[1]);
        assert_eq!(sel.transform.selected_state_indices, vec![0]);
    }

    #[test]
    fn full_selection_uses_all_features() {
        let d = synthetic(300, 2);
        let sel = fe_forward_mi_select(&d, 5, 2, MiObjective::Raw).unwrap();
        let mut idx = sel.transform.selected_state_indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(sel.scores.len(), 2);
        assert!(fe_forward_mi_select(&d, 5, 3, MiObjective::Raw).is_err());
        assert!(fe_forward_mi_select(&d, 5, 0, MiObjective::Raw).is_err());
    }

    #[test]
    fn transform_validation() {
        assert!(FeatureTransform::new(vec![], 2).is_err());
        assert!(FeatureTransform::new(vec![2], 2).is_err());
        assert!(FeatureTransform::new(vec![0, 0], 2).is_err());
        assert!(FeatureTransform::identity(3).is_identity(3));
        assert!(!FeatureTransform::new(vec![1, 0], 2).unwrap().is_identity(2));
    }

    #[test]
    fn identity_observations_are_bitwise_equal() {
        let env = LqgEnv::standard(&RngStream::new(0));
        let mut wrapped = fe_engineer_environment(&env, &FeatureTransform::identity(2)).unwrap();
        let mut plain = env.clone();
        assert_eq!(wrapped.reset(), plain.reset());
        let a = [0.3, -0.2, 1.0];
        for _ in 0..10 {
            let x = wrapped.step(&a).unwrap();
            let y = plain.step(&a).unwrap();
            assert_eq!(x, y);
        }
        assert_eq!(wrapped.spec(), plain.spec());
    }

    #[test]
    fn select_first_of_lqg() {
        let env = LqgEnv::standard(&RngStream::new(0));
        let t = FeatureTransform::new(vec![0], 2).unwrap();
        let mut wrapped = fe_engineer_environment(&env, &t).unwrap();
        let mut plain = env.clone();
        assert_eq!(wrapped.spec().state_space.dim(), 1);
        let s = plain.reset();
        assert_eq!(wrapped.reset(), vec![s[0]]);
    }

    #[test]
    fn dataset_and_environment_sides_agree() {
        let env = LqgEnv::standard(&RngStream::new(0));
        let d = dg_random_uniform(&env, 5, &RngStream::new(1)).unwrap();
        let t = FeatureTransform::new(vec![1], 2).unwrap().with_standardization(&d).unwrap();
        let mapped = t.apply_to_dataset(&d);
        for (orig, m) in d.transitions().iter().zip(mapped.transitions()) {
            assert_eq!(t.apply(&orig.state), m.state);
            assert_eq!(t.apply(&orig.next_state), m.next_state);
        }
        let states: Vec<f64> = mapped.transitions().iter().map(|x| x.state[0]).collect();
        let mean = states.iter().sum::<f64>() / states.len() as f64;
        assert!(mean.abs() < 1e-12);
    }
}
