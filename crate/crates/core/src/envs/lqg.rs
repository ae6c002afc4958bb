//! Linear-quadratic-Gaussian regulator and its finite-horizon Riccati solution.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::mdp::{Horizon, MdpSpec, Space};
use crate::policy::Policy;
use crate::rng::{RngStream, StreamRng};

/// Serializable description of an LQG instance. `Default` is the 2-state,
/// 3-action regulator with `Q = 0.7 I`, `R = 0.3 I`, noise std 0.1, bound
/// 3.5, γ = 0.9 and T = 15; initial states are uniform on `[-2, 2]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqgParams {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    /// Diagonal of the noise standard-deviation matrix.
    pub noise_std: Vec<f64>,
    pub bound: f64,
    pub gamma: f64,
    pub horizon: usize,
    pub init_low: Vec<f64>,
    pub init_high: Vec<f64>,
}

impl Default for LqgParams {
    fn default() -> Self {
        Self {
            a: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            b: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]],
            q: vec![vec![0.7, 0.0], vec![0.0, 0.7]],
            r: vec![
                vec![0.3, 0.0, 0.0],
                vec![0.0, 0.3, 0.0],
                vec![0.0, 0.0, 0.3],
            ],
            noise_std: vec![0.1, 0.1],
            bound: 3.5,
            gamma: 0.9,
            horizon: 15,
            init_low: vec![-2.0, -2.0],
            init_high: vec![2.0, 2.0],
        }
    }
}

pub(crate) fn to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::InvalidArgument(format!("matrix {name} is empty or ragged")));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub(crate) fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn check_psd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let sym = (m - m.transpose()).abs().max() <= 1e-12 * m.abs().max().max(1.0);
    if !sym {
        return Err(Error::InvalidArgument(format!("{name} must be symmetric")));
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -1e-9 {
        return Err(Error::InvalidArgument(format!(
            "{name} must be positive semi-definite (min eigenvalue {min_eig})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LqgEnv {
    params: LqgParams,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    spec: MdpSpec,
    state: Vec<f64>,
    rng: StreamRng,
}

impl LqgEnv {
    pub fn new(params: LqgParams, stream: &RngStream) -> Result<Self> {
        let a = to_matrix(&params.a, "A")?;
        let b = to_matrix(&params.b, "B")?;
        let q = to_matrix(&params.q, "Q")?;
        let r = to_matrix(&params.r, "R")?;
        let n = a.nrows();
        let m = b.ncols();
        if a.ncols() != n || b.nrows() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.nrows(),
            });
        }
        if q.shape() != (n, n) || r.shape() != (m, m) {
            return Err(Error::InvalidArgument("Q must be n×n and R m×m".into()));
        }
        check_psd(&q, "Q")?;
        check_psd(&r, "R")?;
        if params.noise_std.len() != n || params.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument(
                "noise_std must hold n non-negative entries".into(),
            ));
        }
        if !(params.bound > 0.0) {
            return Err(Error::InvalidArgument("bound must be > 0".into()));
        }
        if params.init_low.len() != n || params.init_high.len() != n {
            return Err(Error::InvalidArgument("initial box must have dimension n".into()));
        }
        let init = Space::boxed(params.init_low.clone(), params.init_high.clone())?;
        if let Space::Box { low, high } = &init {
            if low.iter().chain(high).any(|v| v.abs() > params.bound) {
                return Err(Error::InvalidArgument(
                    "initial box must lie inside the state bound".into(),
                ));
            }
        }
        let spec = MdpSpec::new(
            Space::symmetric_box(n, params.bound)?,
            Space::symmetric_box(m, params.bound)?,
            params.gamma,
            Horizon::Finite(params.horizon),
        )?;
        Ok(Self {
            a,
            b,
            q,
            r,
            spec,
            state: vec![0.0; n],
            rng: stream.rng(),
            params,
        })
    }

    /// The default regulator instance.
    pub fn standard(stream: &RngStream) -> Self {
        Self::new(LqgParams::default(), stream).expect("default parameters are valid")
    }

    pub fn params(&self) -> &LqgParams {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    fn clip(&self, v: &mut [f64]) {
        let bd = self.params.bound;
        v.iter_mut().for_each(|x| *x = x.clamp(-bd, bd));
    }

    /// Deterministic part of a step given an explicit noise vector
    /// `eps` (already scaled by the noise std).
    pub fn transition(&self, s: &[f64], a: &[f64], eps: &[f64]) -> Result<(Vec<f64>, f64)> {
        let n = self.state_dim();
        let m = self.action_dim();
        if s.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: s.len() });
        }
        if a.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: a.len() });
        }
        let mut s = s.to_vec();
        let mut a = a.to_vec();
        self.clip(&mut s);
        self.clip(&mut a);
        let sv = DVector::from_column_slice(&s);
        let av = DVector::from_column_slice(&a);
        let reward = -(sv.dot(&(&self.q * &sv))) - av.dot(&(&self.r * &av));
        let next = &self.a * &sv + &self.b * &av;
        let mut next: Vec<f64> = next.iter().zip(eps).map(|(x, e)| x + e).collect();
        self.clip(&mut next);
        Ok((next, reward))
    }

    /// One transition from an explicit state with noise drawn from `rng`.
    pub fn lqg_step<R: Rng + ?Sized>(
        &self,
        s: &[f64],
        a: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64)> {
        let eps: Vec<f64> = self
            .params
            .noise_std
            .iter()
            .map(|sd| {
                let z: f64 = rng.sample(StandardNormal);
                sd * z
            })
            .collect();
        self.transition(s, a, &eps)
    }

    /// Finite-horizon Riccati recursion with zero terminal cost.
    pub fn riccati_solve(&self) -> Result<RiccatiSolution> {
        let gamma = self.params.gamma;
        let t_max = self.params.horizon;
        let n = self.state_dim();
        let sigma = DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            self.params.noise_std.iter().map(|s| s * s),
        ));
        let mut p_next = DMatrix::<f64>::zeros(n, n);
        let mut c_next = 0.0;
        let mut gains = Vec::with_capacity(t_max);
        let mut costs = vec![p_next.clone()];
        let mut offsets = vec![0.0];
        for t in (0..t_max).rev() {
            let bt_p = self.b.transpose() * &p_next;
            let h = &self.r + gamma * &bt_p * &self.b;
            let svd = h.clone().svd(false, false);
            let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
            if !(smin > 1e-12 * smax.max(1e-300)) {
                return Err(Error::Singular { step: t });
            }
            let h_inv = h.try_inverse().ok_or(Error::Singular { step: t })?;
            let k = -gamma * h_inv * &bt_p * &self.a;
            let p = &self.q + gamma * self.a.transpose() * &p_next * (&self.a + &self.b * &k);
            let p = (&p + p.transpose()) * 0.5;
            let c = gamma * ((&p_next * &sigma).trace() + c_next);
            gains.push(k);
            costs.push(p.clone());
            offsets.push(c);
            p_next = p;
            c_next = c;
        }
        gains.reverse();
        costs.reverse();
        offsets.reverse();
        Ok(RiccatiSolution {
            gains: gains.iter().map(to_rows).collect(),
            cost_matrices: costs.iter().map(to_rows).collect(),
            noise_offsets: offsets,
        })
    }
}

impl Environment for LqgEnv {
    fn spec(&self) -> &MdpSpec {
        &self.spec
    }

    fn reset(&mut self) -> Vec<f64> {
        let lo = &self.params.init_low;
        let hi = &self.params.init_high;
        let rng = &mut self.rng;
        self.state = lo
            .iter()
            .zip(hi)
            .map(|(l, h)| if l == h { *l } else { rng.random_range(*l..=*h) })
            .collect();
        self.state.clone()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        let rng = &mut self.rng;
        let eps: Vec<f64> = self
            .params
            .noise_std
            .iter()
            .map(|sd| {
                let z: f64 = rng.sample(StandardNormal);
                sd * z
            })
            .collect();
        let (next, reward) = self.transition(&self.state, action, &eps)?;
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
        "lqg"
    }
}

/// Optimal linear controller of the unclipped problem.
///
/// `gains[t]` is `K_t` (m×n), `cost_matrices[t]` is `P_t` for `t = 0..=T`
/// with `P_T = 0`, and `noise_offsets[t]` is `c_t`, so that the optimal
/// return from `s` at time `t` is `-(sᵀ P_t s) - c_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSolution {
    pub gains: Vec<Vec<Vec<f64>>>,
    pub cost_matrices: Vec<Vec<Vec<f64>>>,
    pub noise_offsets: Vec<f64>,
}

impl RiccatiSolution {
    /// Closed-form optimal return from `s0`.
    pub fn expected_return(&self, s0: &[f64]) -> f64 {
        let p = &self.cost_matrices[0];
        let quad: f64 = (0..s0.len())
            .map(|i| (0..s0.len()).map(|j| s0[i] * p[i][j] * s0[j]).sum::<f64>())
            .sum();
        -quad - self.noise_offsets[0]
    }

    /// Closed-form optimal return averaged over a uniform initial box.
    pub fn expected_return_uniform(&self, low: &[f64], high: &[f64]) -> f64 {
        let p = &self.cost_matrices[0];
        let mean: Vec<f64> = low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect();
        let second: Vec<f64> = low
            .iter()
            .zip(high)
            .map(|(l, h)| if l == h { l * l } else { (h.powi(3) - l.powi(3)) / (3.0 * (h - l)) })
            .collect();
        let n = low.len();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += p[i][j] * if i == j { second[i] } else { mean[i] * mean[j] };
            }
        }
        -quad - self.noise_offsets[0]
    }

    /// Time-average of the gains, a stationary approximation of the controller.
    pub fn mean_gain(&self) -> Vec<Vec<f64>> {
        let t = self.gains.len() as f64;
        let mut acc = vec![vec![0.0; self.gains[0][0].len()]; self.gains[0].len()];
        for k in &self.gains {
            for (row, krow) in acc.iter_mut().zip(k) {
                for (v, kv) in row.iter_mut().zip(krow) {
                    *v += kv / t;
                }
            }
        }
        acc
    }
}

/// Time-indexed policy `a_t = clip(K_t s_t)`.
pub fn riccati_policy(sol: &RiccatiSolution, action_space: Space) -> Policy {
    Policy::TimeVaryingLinear {
        action_space,
        gains: sol.gains.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(horizon: usize) -> LqgEnv {
        LqgEnv::new(
            LqgParams {
                a: vec![vec![1.0]],
                b: vec![vec![1.0]],
                q: vec![vec![1.0]],
                r: vec![vec![1.0]],
                noise_std: vec![0.0],
                bound: 10.0,
                gamma: 1.0,
                horizon,
                init_low: vec![-1.0],
                init_high: vec![1.0],
            },
            &RngStream::new(0),
        )
        .unwrap()
    }

    #[test]
    fn origin_is_fixed() {
        let env = LqgEnv::standard(&RngStream::new(0));
        let (next, r) = env
            .transition(&[0.0, 0.0], &[0.0, 0.0, 0.0], &[0.0, 0.0])
            .unwrap();
        assert_eq!(next, vec![0.0, 0.0]);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn hand_computed_step() {
        let env = LqgEnv::standard(&RngStream::new(0));
        let (next, r) = env
            .transition(&[1.0, 1.0], &[1.0, 0.0, 0.0], &[0.0, 0.0])
            .unwrap();
        assert_eq!(next, vec![2.0, 1.0]);
        assert!((r + 1.7).abs() < 1e-12);
    }

    #[test]
    fn clipping_at_bound() {
        let env = LqgEnv::standard(&RngStream::new(0));
        let (next, _) = env
            .transition(&[3.5, 3.5], &[3.5, 0.0, 0.0], &[0.0, 0.0])
            .unwrap();
        assert_eq!(next, vec![3.5, 3.5]);
        // oversized actions are clipped before the reward is charged
        let (_, r_big) = env.transition(&[0.0, 0.0], &[100.0, 0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((r_big + 0.3 * 3.5 * 3.5).abs() < 1e-12);
    }

    #[test]
    fn dimension_errors() {
        let env = LqgEnv::standard(&RngStream::new(0));
        assert!(env.transition(&[0.0], &[0.0; 3], &[0.0; 2]).is_err());
        assert!(env.transition(&[0.0; 2], &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn zero_noise_step_is_pure() {
        let mut p = LqgParams::default();
        p.noise_std = vec![0.0, 0.0];
        let env = LqgEnv::new(p, &RngStream::new(0)).unwrap();
        let mut r1 = RngStream::new(1).rng();
        let mut r2 = RngStream::new(2).rng();
        let a = env.lqg_step(&[0.3, -1.2], &[0.1, 0.2, -0.4], &mut r1).unwrap();
        let b = env.lqg_step(&[0.3, -1.2], &[0.1, 0.2, -0.4], &mut r2).unwrap();
        assert_eq!(a.0[0].to_bits(), b.0[0].to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    #[test]
    fn riccati_one_step() {
        let sol = scalar(1).riccati_solve().unwrap();
        assert_eq!(sol.gains[0], vec![vec![0.0]]);
        assert_eq!(sol.cost_matrices[0], vec![vec![1.0]]);
        assert_eq!(sol.cost_matrices[1], vec![vec![0.0]]);
    }

    #[test]
    fn riccati_two_steps() {
        let sol = scalar(2).riccati_solve().unwrap();
        assert!((sol.gains[0][0][0] + 0.5).abs() < 1e-15);
        assert!((sol.cost_matrices[0][0][0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn riccati_psd_at_every_step() {
        let sol = LqgEnv::standard(&RngStream::new(0)).riccati_solve().unwrap();
        assert_eq!(sol.gains.len(), 15);
        assert_eq!(sol.cost_matrices.len(), 16);
        for p in &sol.cost_matrices {
            let m = to_matrix(p, "P").unwrap();
            assert!(m.symmetric_eigen().eigenvalues.min() >= -1e-9);
        }
        assert!(sol.cost_matrices[15].iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn singular_system_reports_step() {
        let mut p = LqgParams::default();
        p.r = vec![vec![0.0; 3]; 3];
        let env = LqgEnv::new(p, &RngStream::new(0)).unwrap();
        // P_T = 0 so the last step (t = T-1) already has R + γBᵀPB = 0
        assert_eq!(env.riccati_solve(), Err(Error::Singular { step: 14 }));
    }

    #[test]
    fn riccati_policy_zero_at_origin_and_trivial_for_one_step() {
        let env = LqgEnv::standard(&RngStream::new(0));
        let sol = env.riccati_solve().unwrap();
        let pol = riccati_policy(&sol, env.spec().action_space.clone());
        let mut rng = RngStream::new(0).rng();
        for t in 0..15 {
            assert_eq!(pol.act(&[0.0, 0.0], t, &mut rng), vec![0.0, 0.0, 0.0]);
        }
        let one = scalar(1);
        let sol1 = one.riccati_solve().unwrap();
        let pol1 = riccati_policy(&sol1, one.spec().action_space.clone());
        assert_eq!(pol1.act(&[0.7], 0, &mut rng), vec![0.0]);
    }

    #[test]
    fn rejects_bad_matrices() {
        let mut p = LqgParams::default();
        p.q = vec![vec![1.0, 2.0], vec![0.0, 1.0]];
        assert!(LqgEnv::new(p, &RngStream::new(0)).is_err());
        let mut p = LqgParams::default();
        p.q = vec![vec![-1.0, 0.0], vec![0.0, 1.0]];
        assert!(LqgEnv::new(p, &RngStream::new(0)).is_err());
        let mut p = LqgParams::default();
        p.bound = 0.0;
        assert!(LqgEnv::new(p, &RngStream::new(0)).is_err());
    }
}
