//! Imputation of missing (NaN) entries. A transition is viewed as the row
//! `[s, a, r, s']`.

use crate::dataset::{Dataset, Transition};
use crate::error::{Error, Result};

struct Layout {
    ds: usize,
    da: usize,
}

impl Layout {
    fn of(d: &Dataset) -> Result<Self> {
        let (ds, da) = (d.state_dim(), d.action_dim());
        for t in d.transitions() {
            if t.state.len() != ds || t.next_state.len() != ds || t.action.len() != da {
                return Err(Error::MalformedDataset("rows have inconsistent widths".into()));
            }
        }
        Ok(Self { ds, da })
    }

    fn width(&self) -> usize {
        2 * self.ds + self.da + 1
    }

    fn column_name(&self, c: usize) -> String {
        let (ds, da) = (self.ds, self.da);
        if c < ds {
            format!("s[{c}]")
        } else if c < ds + da {
            format!("a[{}]", c - ds)
        } else if c == ds + da {
            "r".into()
        } else {
            format!("s_next[{}]", c - ds - da - 1)
        }
    }

    fn row(&self, t: &Transition) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width());
        v.extend_from_slice(&t.state);
        v.extend_from_slice(&t.action);
        v.push(t.reward);
        v.extend_from_slice(&t.next_state);
        v
    }

    fn transition(&self, row: &[f64], like: &Transition) -> Transition {
        let (ds, da) = (self.ds, self.da);
        Transition {
            state: row[..ds].to_vec(),
            action: row[ds..ds + da].to_vec(),
            reward: row[ds + da],
            next_state: row[ds + da + 1..].to_vec(),
            absorbing: like.absorbing,
            last: like.last,
        }
    }
}

/// Replaces each missing entry with the mean of its column's observed values.
pub fn dp_mean_impute(d: &Dataset) -> Result<Dataset> {
    if !d.has_missing() {
        return Ok(d.clone());
    }
    let layout = Layout::of(d)?;
    let rows: Vec<Vec<f64>> = d.transitions().iter().map(|t| layout.row(t)).collect();
    let mut means = Vec::with_capacity(layout.width());
    for c in 0..layout.width() {
        let (sum, n) = rows
            .iter()
            .filter(|r| !r[c].is_nan())
            .fold((0.0, 0usize), |(s, n), r| (s + r[c], n + 1));
        if n == 0 {
            return Err(Error::FullyMissingColumn {
                column: layout.column_name(c),
            });
        }
        means.push(sum / n as f64);
    }
    let transitions = rows
        .into_iter()
        .zip(d.transitions())
        .map(|(mut row, t)| {
            for (v, m) in row.iter_mut().zip(&means) {
                if v.is_nan() {
                    *v = *m;
                }
            }
            layout.transition(&row, t)
        })
        .collect();
    Ok(d.with_transitions(transitions))
}

/// Fills each incomplete row from its nearest fully observed row, measuring
/// Euclidean distance over the coordinates the incomplete row does observe.
/// Ties go to the lowest row index.
pub fn dp_1nn_impute(d: &Dataset) -> Result<Dataset> {
    if !d.has_missing() {
        return Ok(d.clone());
    }
    let layout = Layout::of(d)?;
    let rows: Vec<Vec<f64>> = d.transitions().iter().map(|t| layout.row(t)).collect();
    let complete: Vec<usize> = (0..rows.len())
        .filter(|&i| rows[i].iter().all(|v| !v.is_nan()))
        .collect();
    if complete.is_empty() {
        return Err(Error::NoCompleteRow);
    }
    let transitions = rows
        .iter()
        .zip(d.transitions())
        .map(|(row, t)| {
            if row.iter().all(|v| !v.is_nan()) {
                return t.clone();
            }
            let mut best = (f64::INFINITY, complete[0]);
            for &j in &complete {
                let dist: f64 = row
                    .iter()
                    .zip(&rows[j])
                    .filter(|(v, _)| !v.is_nan())
                    .map(|(v, w)| (v - w) * (v - w))
                    .sum();
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            let donor = &rows[best.1];
            let filled: Vec<f64> = row
                .iter()
                .zip(donor)
                .map(|(v, w)| if v.is_nan() { *w } else { *v })
                .collect();
            layout.transition(&filled, t)
        })
        .collect();
    Ok(d.with_transitions(transitions))
}
