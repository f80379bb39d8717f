//! Per-sample training weights: static frequency reweighting and dynamic
//! TPR-driven reweighting.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{Class, Field, SubjectRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Frequency,
    DynamicTpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub scheme: Scheme,
    pub attribute: Field,
    pub weights: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct WeightLine {
    subject_id: String,
    weight: f64,
}

impl WeightVector {
    pub fn get(&self, subject_id: &str) -> Option<f64> {
        self.weights.get(subject_id).copied()
    }

    pub fn mean(&self) -> f64 {
        self.weights.values().sum::<f64>() / self.weights.len() as f64
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, &weight) in &self.weights {
            let line = WeightLine {
                subject_id: id.clone(),
                weight,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io("<weights>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, scheme: Scheme, attribute: Field) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<weights>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: WeightLine = serde_json::from_str(&line)?;
            if !(parsed.weight.is_finite() && parsed.weight > 0.0) {
                return Err(Error::invalid(format!(
                    "weight {} for {} must be finite and positive",
                    parsed.weight, parsed.subject_id
                )));
            }
            weights.insert(parsed.subject_id, parsed.weight);
        }
        Ok(WeightVector {
            scheme,
            attribute,
            weights,
        })
    }
}

/// Expected-over-observed weights for a subgroup-by-label count table.
///
/// `counts[a][y]` is the number of samples in subgroup `a` with label `y`.
/// Empty cells get `None`.
pub fn frequency_cell_weights(counts: &[Vec<u64>]) -> Vec<Vec<Option<f64>>> {
    let n: u64 = counts.iter().flatten().sum();
    let n_y: Vec<u64> = (0..counts.first().map_or(0, Vec::len))
        .map(|y| counts.iter().map(|row| row[y]).sum())
        .collect();
    counts
        .iter()
        .map(|row| {
            let n_a: u64 = row.iter().sum();
            row.iter()
                .zip(&n_y)
                .map(|(&n_ay, &n_y)| {
                    (n_ay > 0).then(|| (n_a as f64 * n_y as f64) / (n as f64 * n_ay as f64))
                })
                .collect()
        })
        .collect()
}

fn subgroup_of(r: &SubjectRecord, attribute: Field) -> Result<&'static str> {
    r.value_of(attribute).ok_or_else(|| {
        Error::invalid(format!(
            "subject {} has no `{attribute}` value; impute before reweighting",
            r.subject_id
        ))
    })
}

/// Frequency weights `N_a * N_y / (N * N_ay)` for every record.
pub fn frequency_weights(records: &[SubjectRecord], attribute: Field) -> Result<WeightVector> {
    if !attribute.is_protected() {
        return Err(Error::NotProtected(attribute.to_string()));
    }
    if records.is_empty() {
        return Err(Error::invalid("no records to weight"));
    }
    let subgroups = attribute.values();
    let mut counts = vec![vec![0u64; Class::ALL.len()]; subgroups.len()];
    let mut cell_of = Vec::with_capacity(records.len());
    for r in records {
        let sub = subgroup_of(r, attribute)?;
        let a = subgroups.iter().position(|s| *s == sub).unwrap();
        counts[a][r.label.index()] += 1;
        cell_of.push((a, r.label.index()));
    }
    let table = frequency_cell_weights(&counts);
    let weights = records
        .iter()
        .zip(cell_of)
        .map(|(r, (a, y))| (r.subject_id.clone(), table[a][y].unwrap()))
        .collect();
    Ok(WeightVector {
        scheme: Scheme::Frequency,
        attribute,
        weights,
    })
}

pub const DEFAULT_TPR_FLOOR: f64 = 0.05;

/// One classified training sample as seen by the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TprObservation<'a> {
    pub subgroup: &'a str,
    pub class: Class,
    pub correct: bool,
}

/// Running per (subgroup, class) TPR counts and the weights derived from them.
///
/// Counts accumulate through [`TprTracker::update`]. Every `update_period`
/// calls to [`TprTracker::tick`] the weights are recomputed from the counts
/// of that window, and the window starts over. Between refreshes the weights
/// do not change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprTracker {
    pub epsilon: f64,
    pub update_period: usize,
    counts: BTreeMap<(String, Class), (u64, u64)>,
    ticks: usize,
    weights: BTreeMap<(String, Class), f64>,
}

impl TprTracker {
    pub fn new(epsilon: f64, update_period: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::invalid(format!("TPR floor {epsilon} not in (0, 1)")));
        }
        if update_period == 0 {
            return Err(Error::invalid("update period must be at least one batch"));
        }
        Ok(TprTracker {
            epsilon,
            update_period,
            counts: BTreeMap::new(),
            ticks: 0,
            weights: BTreeMap::new(),
        })
    }

    pub fn update(&mut self, batch: &[TprObservation<'_>]) {
        for obs in batch {
            let cell = self
                .counts
                .entry((obs.subgroup.to_string(), obs.class))
                .or_insert((0, 0));
            cell.0 += obs.correct as u64;
            cell.1 += 1;
        }
    }

    /// `(correct, total)` for a cell in the current window.
    pub fn counts(&self, subgroup: &str, class: Class) -> (u64, u64) {
        self.counts
            .get(&(subgroup.to_string(), class))
            .copied()
            .unwrap_or((0, 0))
    }

    pub fn tpr(&self, subgroup: &str, class: Class) -> Option<f64> {
        let (correct, total) = self.counts(subgroup, class);
        (total > 0).then(|| correct as f64 / total as f64)
    }

    /// Marks the end of a batch; returns true when the weights were refreshed.
    pub fn tick(&mut self) -> bool {
        self.ticks += 1;
        if self.ticks % self.update_period == 0 {
            self.refresh();
            true
        } else {
            false
        }
    }

    /// Recomputes weights from the current window and starts a new one.
    pub fn refresh(&mut self) {
        self.weights = self
            .counts
            .iter()
            .filter(|(_, &(_, total))| total > 0)
            .map(|(k, &(correct, total))| {
                let tpr = correct as f64 / total as f64;
                (k.clone(), 1.0 / tpr.max(self.epsilon))
            })
            .collect();
        self.counts.clear();
    }

    /// Current weight of a cell; cells never observed weigh 1.
    pub fn weight(&self, subgroup: &str, class: Class) -> f64 {
        self.weights
            .get(&(subgroup.to_string(), class))
            .copied()
            .unwrap_or(1.0)
    }
}

/// Weight `1 / max(TPR, epsilon)` for every record, from the tracker's last refresh.
pub fn dynamic_weights(
    tracker: &TprTracker,
    records: &[SubjectRecord],
    attribute: Field,
) -> Result<WeightVector> {
    let mut weights = BTreeMap::new();
    for r in records {
        let sub = subgroup_of(r, attribute)?;
        weights.insert(r.subject_id.clone(), tracker.weight(sub, r.label));
    }
    Ok(WeightVector {
        scheme: Scheme::DynamicTpr,
        attribute,
        weights,
    })
}

/// Frequency scheme: `sum w_i l_i`. Dynamic scheme: `(1/N) sum w_i l_i`.
pub fn weighted_loss(losses: &[f64], weights: &[f64], scheme: Scheme) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let sum: f64 = losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    Ok(match scheme {
        Scheme::Frequency => sum,
        Scheme::DynamicTpr if losses.is_empty() => 0.0,
        Scheme::DynamicTpr => sum / losses.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_evaluated_cells() {
        let w = frequency_cell_weights(&[vec![6, 2], vec![1, 1]]);
        let expect = [[0.9333333333333333, 1.2], [1.4, 0.6]];
        for a in 0..2 {
            for y in 0..2 {
                assert!((w[a][y].unwrap() - expect[a][y]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn independence_and_scale() {
        let w = frequency_cell_weights(&[vec![2, 4], vec![3, 6]]);
        assert!(w.iter().flatten().all(|v| (v.unwrap() - 1.0).abs() < 1e-15));
        let a = frequency_cell_weights(&[vec![6, 2], vec![1, 1]]);
        let b = frequency_cell_weights(&[vec![12, 4], vec![2, 2]]);
        assert_eq!(a, b);
        let z = frequency_cell_weights(&[vec![3, 0], vec![1, 2]]);
        assert_eq!(z[0][1], None);
    }

    #[test]
    fn tracker_counts() {
        let mut t = TprTracker::new(0.05, 1).unwrap();
        let obs = |correct| TprObservation { subgroup: "a80_plus", class: Class::Mci, correct };
        t.update(&[obs(true), obs(true), obs(true), obs(false)]);
        assert_eq!(t.tpr("a80_plus", Class::Mci), Some(0.75));
        assert_eq!(t.tpr("a46_65", Class::Mci), None);
        let before = t.clone();
        t.update(&[]);
        assert_eq!(t, before);
    }

    #[test]
    fn dynamic_weight_rule() {
        let mut t = TprTracker::new(0.05, 2).unwrap();
        let o = |s, correct| TprObservation { subgroup: s, class: Class::Ad, correct };
        t.update(&[o("x", true), o("x", false), o("y", true), o("z", false)]);
        assert!(!t.tick());
        assert_eq!(t.weight("x", Class::Ad), 1.0, "stable until the period elapses");
        assert!(t.tick());
        assert_eq!(t.weight("x", Class::Ad), 2.0);
        assert_eq!(t.weight("y", Class::Ad), 1.0);
        assert_eq!(t.weight("z", Class::Ad), 20.0);
        assert_eq!(t.weight("never", Class::Ad), 1.0);
    }

    #[test]
    fn weighted_loss_forms() {
        assert_eq!(weighted_loss(&[1.0, 3.0], &[2.0, 1.0], Scheme::Frequency).unwrap(), 5.0);
        assert_eq!(weighted_loss(&[1.0, 3.0], &[1.0, 1.0], Scheme::DynamicTpr).unwrap(), 2.0);
        assert_eq!(weighted_loss(&[0.0, 0.0], &[7.0, 9.0], Scheme::Frequency).unwrap(), 0.0);
        assert!(weighted_loss(&[1.0], &[1.0, 2.0], Scheme::Frequency).is_err());
    }
}
