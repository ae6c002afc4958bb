//! Transition records grouped into trajectories, plus the JSON Lines format.
//!
//! Missing entries (for the data-preparation stage) are stored as NaN in
//! memory and as `null` on disk.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub absorbing: bool,
    pub last: bool,
}

impl Transition {
    pub fn has_missing(&self) -> bool {
        self.reward.is_nan()
            || self.state.iter().any(|v| v.is_nan())
            || self.action.iter().any(|v| v.is_nan())
            || self.next_state.iter().any(|v| v.is_nan())
    }

    /// Bitwise equality, treating NaN payloads as equal when their bits are.
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        same(&self.state, &other.state)
            && same(&self.action, &other.action)
            && self.reward.to_bits() == other.reward.to_bits()
            && same(&self.next_state, &other.next_state)
            && self.absorbing == other.absorbing
            && self.last == other.last
    }
}

/// An ordered list of transitions partitioned into non-empty trajectories.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    transitions: Vec<Transition>,
    trajectory_offsets: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset, deriving trajectory boundaries from the `last` flags.
    /// The final transition must close its trajectory.
    pub fn from_transitions(transitions: Vec<Transition>) -> Result<Self> {
        let mut offsets = Vec::new();
        let mut start = true;
        for (i, t) in transitions.iter().enumerate() {
            if start {
                offsets.push(i);
            }
            start = t.last;
        }
        if !transitions.is_empty() && !start {
            return Err(Error::MalformedDataset(
                "final transition does not close its trajectory".into(),
            ));
        }
        Ok(Self {
            transitions,
            trajectory_offsets: offsets,
        })
    }

    pub fn from_trajectories(trajectories: Vec<Vec<Transition>>) -> Result<Self> {
        let mut all = Vec::new();
        for (i, mut traj) in trajectories.into_iter().enumerate() {
            if traj.is_empty() {
                return Err(Error::MalformedDataset(format!("trajectory {i} is empty")));
            }
            let n = traj.len();
            for (j, t) in traj.iter_mut().enumerate() {
                t.last = j + 1 == n;
            }
            all.extend(traj);
        }
        Self::from_transitions(all)
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn trajectory_offsets(&self) -> &[usize] {
        &self.trajectory_offsets
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn n_trajectories(&self) -> usize {
        self.trajectory_offsets.len()
    }

    pub fn state_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.state.len())
    }

    pub fn action_dim(&self) -> usize {
        self.transitions.first().map_or(0, |t| t.action.len())
    }

    pub fn trajectory(&self, i: usize) -> &[Transition] {
        let start = self.trajectory_offsets[i];
        let end = self
            .trajectory_offsets
            .get(i + 1)
            .copied()
            .unwrap_or(self.transitions.len());
        &self.transitions[start..end]
    }

    /// Trajectory slices in order; their concatenation is the whole dataset.
    pub fn split_trajectories(&self) -> Vec<&[Transition]> {
        (0..self.n_trajectories()).map(|i| self.trajectory(i)).collect()
    }

    /// Resamples whole trajectories with replacement, keeping the count.
    pub fn bootstrap(&self, stream: &RngStream) -> Result<Dataset> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut rng = stream.rng();
        let n = self.n_trajectories();
        let picks: Vec<Vec<Transition>> = (0..n)
            .map(|_| self.trajectory(rng.random_range(0..n)).to_vec())
            .collect();
        Dataset::from_trajectories(picks)
    }

    pub fn has_missing(&self) -> bool {
        self.transitions.iter().any(Transition::has_missing)
    }

    /// Applies `f` to every state and next state.
    pub fn map_states<F: Fn(&[f64]) -> Vec<f64>>(&self, f: F) -> Dataset {
        let transitions = self
            .transitions
            .iter()
            .map(|t| Transition {
                state: f(&t.state),
                next_state: f(&t.next_state),
                ..t.clone()
            })
            .collect();
        Dataset {
            transitions,
            trajectory_offsets: self.trajectory_offsets.clone(),
        }
    }

    /// Rebuilds a dataset from edited transitions keeping the same boundaries.
    pub(crate) fn with_transitions(&self, transitions: Vec<Transition>) -> Dataset {
        debug_assert_eq!(transitions.len(), self.transitions.len());
        Dataset {
            transitions,
            trajectory_offsets: self.trajectory_offsets.clone(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (episode, traj) in self.split_trajectories().into_iter().enumerate() {
            for (t, tr) in traj.iter().enumerate() {
                let rec = JsonlRecord::from_transition(episode as u64, t as u64, tr);
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Reads the JSON Lines format, rejecting any episode/t ordering that
    /// does not describe contiguous, complete trajectories.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Dataset> {
        let mut transitions = Vec::new();
        let mut prev: Option<(u64, u64, bool)> = None;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)
                .map_err(|e| Error::MalformedDataset(format!("line {}: {e}", lineno + 1)))?;
            match prev {
                None if rec.t != 0 => {
                    return Err(Error::MalformedDataset(format!(
                        "line {}: first record has t = {}",
                        lineno + 1,
                        rec.t
                    )))
                }
                Some((ep, t, last)) => {
                    let ok = if last {
                        rec.episode > ep && rec.t == 0
                    } else {
                        rec.episode == ep && rec.t == t + 1
                    };
                    if !ok {
                        return Err(Error::MalformedDataset(format!(
                            "line {}: episode {} t {} cannot follow episode {ep} t {t} (last = {last})",
                            lineno + 1,
                            rec.episode,
                            rec.t
                        )));
                    }
                }
                None => {}
            }
            prev = Some((rec.episode, rec.t, rec.last));
            transitions.push(rec.into_transition());
        }
        if let Some((_, _, false)) = prev {
            return Err(Error::MalformedDataset(
                "final record does not close its trajectory".into(),
            ));
        }
        Dataset::from_transitions(transitions)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    episode: u64,
    t: u64,
    s: Vec<Option<f64>>,
    a: Vec<Option<f64>>,
    r: Option<f64>,
    s_next: Vec<Option<f64>>,
    absorbing: bool,
    last: bool,
}

fn to_opt(v: &[f64]) -> Vec<Option<f64>> {
    v.iter().map(|x| if x.is_nan() { None } else { Some(*x) }).collect()
}

fn from_opt(v: Vec<Option<f64>>) -> Vec<f64> {
    v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()
}

impl JsonlRecord {
    fn from_transition(episode: u64, t: u64, tr: &Transition) -> Self {
        Self {
            episode,
            t,
            s: to_opt(&tr.state),
            a: to_opt(&tr.action),
            r: if tr.reward.is_nan() { None } else { Some(tr.reward) },
            s_next: to_opt(&tr.next_state),
            absorbing: tr.absorbing,
            last: tr.last,
        }
    }

    fn into_transition(self) -> Transition {
        Transition {
            state: from_opt(self.s),
            action: from_opt(self.a),
            reward: self.r.unwrap_or(f64::NAN),
            next_state: from_opt(self.s_next),
            absorbing: self.absorbing,
            last: self.last,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn tr(s: f64, last: bool) -> Transition {
        Transition {
            state: vec![s],
            action: vec![0.0],
            reward: s,
            next_state: vec![s + 1.0],
            absorbing: false,
            last,
        }
    }

    fn lengths(d: &Dataset) -> Vec<usize> {
        d.split_trajectories().iter().map(|t| t.len()).collect()
    }

    #[test]
    fn split_by_last_flags() {
        let d = Dataset::from_trajectories(vec![
            (0..3).map(|i| tr(i as f64, false)).collect(),
            (0..5).map(|i| tr(10.0 + i as f64, false)).collect(),
        ])
        .unwrap();
        assert_eq!(lengths(&d), vec![3, 5]);
        let concat: Vec<Transition> = d.split_trajectories().concat();
        assert_eq!(concat, d.transitions());
    }

    #[test]
    fn single_transition_trajectory() {
        let d = Dataset::from_transitions(vec![tr(0.0, true)]).unwrap();
        assert_eq!(lengths(&d), vec![1]);
    }

    #[test]
    fn unterminated_trajectory_rejected() {
        assert!(Dataset::from_transitions(vec![tr(0.0, true), tr(1.0, false)]).is_err());
    }

    #[test]
    fn bootstrap_of_singleton_is_identity() {
        let d = Dataset::from_trajectories(vec![(0..4).map(|i| tr(i as f64, false)).collect()])
            .unwrap();
        let b = d.bootstrap(&RngStream::new(3)).unwrap();
        assert_eq!(b, d);
    }

    #[test]
    fn bootstrap_replays_seeded_draws() {
        let d = Dataset::from_trajectories(
            (0..3)
                .map(|k| (0..k + 1).map(|i| tr((10 * k + i) as f64, false)).collect())
                .collect(),
        )
        .unwrap();
        let stream = RngStream::with_path(11, &[2, 5]);
        let b = d.bootstrap(&stream).unwrap();
        let mut rng = stream.rng();
        let expected: Vec<usize> = (0..3).map(|_| rng.random_range(0..3)).collect();
        let got: Vec<&[Transition]> = b.split_trajectories();
        assert_eq!(got.len(), 3);
        for (g, e) in got.iter().zip(&expected) {
            assert_eq!(*g, d.trajectory(*e));
        }
        assert_eq!(b, d.bootstrap(&stream).unwrap());
    }

    #[test]
    fn bootstrap_of_empty_fails() {
        assert_eq!(
            Dataset::default().bootstrap(&RngStream::new(0)),
            Err(Error::EmptyDataset)
        );
    }

    #[test]
    fn jsonl_round_trip_with_missing() {
        let mut t0 = tr(1.0, false);
        t0.state = vec![f64::NAN, 2.0];
        t0.next_state = vec![3.0, 4.0];
        let mut t1 = tr(2.0, true);
        t1.state = vec![5.0, 6.0];
        t1.next_state = vec![7.0, f64::NAN];
        t1.reward = f64::NAN;
        let d = Dataset::from_transitions(vec![t0, t1]).unwrap();
        let text = d.to_jsonl_string();
        assert!(text.contains("null"));
        let back = Dataset::read_jsonl(text.as_bytes()).unwrap();
        assert!(back
            .transitions()
            .iter()
            .zip(d.transitions())
            .all(|(a, b)| a.bit_eq(b)));
    }

    #[test]
    fn jsonl_rejects_bad_ordering() {
        let line = |ep: u64, t: u64, last: bool| {
            format!(
                r#"{{"episode":{ep},"t":{t},"s":[0.0],"a":[0.0],"r":0.0,"s_next":[0.0],"absorbing":false,"last":{last}}}"#
            )
        };
        let ok = [line(0, 0, false), line(0, 1, true), line(1, 0, true)].join("\n");
        assert_eq!(Dataset::read_jsonl(ok.as_bytes()).unwrap().n_trajectories(), 2);
        let skipped_t = [line(0, 0, false), line(0, 2, true)].join("\n");
        assert!(Dataset::read_jsonl(skipped_t.as_bytes()).is_err());
        let early_switch = [line(0, 0, false), line(1, 0, true)].join("\n");
        assert!(Dataset::read_jsonl(early_switch.as_bytes()).is_err());
        let reused_episode = [line(0, 0, true), line(0, 0, true)].join("\n");
        assert!(Dataset::read_jsonl(reused_episode.as_bytes()).is_err());
        let open_end = [line(0, 0, false)].join("\n");
        assert!(Dataset::read_jsonl(open_end.as_bytes()).is_err());
        let bad_start = [line(0, 1, true)].join("\n");
        assert!(Dataset::read_jsonl(bad_start.as_bytes()).is_err());
    }
}
