//! Calibrated equalized-odds post-processing for the three-class task.
//!
//! For each subgroup and class the one-vs-rest scores are calibrated with
//! isotonic regression fit on validation data, then per-subgroup thresholds
//! are chosen by coordinate descent to equalize TPR and FPR across
//! subgroups. A subject's final class is the one with the largest margin
//! `p_c - t_{a,c}`.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::domain::{Class, Field, Probs, SubjectRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ingest::{index_records, PredictionSet};
use crate::par::{self, Exec};

/// Monotone step function fit by pool-adjacent-violators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicModel {
    /// Ascending distinct scores.
    pub breakpoints: Vec<f64>,
    /// Non-decreasing fitted value at each breakpoint.
    pub values: Vec<f64>,
}

/// Weighted least-squares monotone fit of `targets` (already in score order).
pub fn pav(targets: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(targets.len(), weights.len());
    // Each block: (weighted mean, total weight, member count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(targets.len());
    for (&y, &w) in targets.iter().zip(weights) {
        blocks.push((y, w, 1));
        while blocks.len() > 1 {
            let (m2, w2, n2) = blocks[blocks.len() - 1];
            let (m1, w1, n1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.pop();
            let w = w1 + w2;
            *blocks.last_mut().unwrap() = ((m1 * w1 + m2 * w2) / w, w, n1 + n2);
        }
    }
    blocks
        .iter()
        .flat_map(|&(m, _, n)| std::iter::repeat(m).take(n))
        .collect()
}

pub fn isotonic_fit(scores: &[f64], targets: &[f64]) -> Result<IsotonicModel> {
    if scores.len() != targets.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::invalid("isotonic fit needs at least one sample"));
    }
    if scores.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(Error::invalid("isotonic fit inputs must be finite"));
    }
    let first = targets[0];
    if targets.iter().all(|&t| t == first) {
        warn!("isotonic calibration saw a single target value; using a constant model");
        return Ok(IsotonicModel {
            breakpoints: vec![scores.iter().copied().fold(f64::INFINITY, f64::min)],
            values: vec![first],
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Pool tied scores first so they always receive one fitted value.
    let mut breakpoints = Vec::new();
    let mut means = Vec::new();
    let mut weights = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut sum, mut n) = (0.0, 0.0);
        while i < order.len() && scores[order[i]] == s {
            sum += targets[order[i]];
            n += 1.0;
            i += 1;
        }
        breakpoints.push(s);
        means.push(sum / n);
        weights.push(n);
    }
    let values = pav(&means, &weights);
    Ok(IsotonicModel { breakpoints, values })
}

impl IsotonicModel {
    pub fn identity() -> Self {
        IsotonicModel {
            breakpoints: vec![0.0, 1.0],
            values: vec![0.0, 1.0],
        }
    }

    fn is_identity(&self) -> bool {
        *self == IsotonicModel::identity()
    }

    /// Value of the step containing `x`, clamped at both ends.
    pub fn eval(&self, x: f64) -> f64 {
        if self.is_identity() {
            return x.clamp(0.0, 1.0);
        }
        let i = self.breakpoints.partition_point(|&b| b <= x);
        self.values[i.saturating_sub(1)]
    }
}

/// One-vs-rest scores and labels of one subgroup for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupScores {
    pub subgroup: String,
    pub scores: Vec<f64>,
    pub positive: Vec<bool>,
}

/// Threshold grid `k / K` for `k = 0..=K`, where `K = 1 / step` is even so
/// that 0.5 lies on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub step: f64,
    pub size: usize,
}

impl Grid {
    pub fn new(step: f64) -> Result<Grid> {
        let k = (1.0 / step).round();
        if !(step > 0.0 && step <= 0.5) || (k * step - 1.0).abs() > 1e-9 || k as usize % 2 != 0 {
            return Err(Error::invalid(format!(
                "grid step {step} must divide 1 into an even number of steps"
            )));
        }
        Ok(Grid {
            step,
            size: k as usize,
        })
    }

    pub fn threshold(&self, k: usize) -> f64 {
        k as f64 / self.size as f64
    }

    pub fn half(&self) -> usize {
        self.size / 2
    }
}

/// Count of scores at or above each grid threshold, split by label.
struct GroupCounts {
    pos: usize,
    neg: usize,
    tp: Vec<usize>,
    fp: Vec<usize>,
}

impl GroupCounts {
    fn new(g: &GroupScores, grid: &Grid) -> GroupCounts {
        let mut pos_scores: Vec<f64> = Vec::new();
        let mut neg_scores: Vec<f64> = Vec::new();
        for (&s, &p) in g.scores.iter().zip(&g.positive) {
            if p {
                pos_scores.push(s);
            } else {
                neg_scores.push(s);
            }
        }
        pos_scores.sort_by(f64::total_cmp);
        neg_scores.sort_by(f64::total_cmp);
        let above = |v: &[f64], t: f64| v.len() - v.partition_point(|&s| s < t);
        let tp = (0..=grid.size).map(|k| above(&pos_scores, grid.threshold(k))).collect();
        let fp = (0..=grid.size).map(|k| above(&neg_scores, grid.threshold(k))).collect();
        GroupCounts {
            pos: pos_scores.len(),
            neg: neg_scores.len(),
            tp,
            fp,
        }
    }

    fn usable(&self) -> bool {
        self.pos > 0 && self.neg > 0
    }

    fn tpr(&self, k: usize) -> f64 {
        self.tp[k] as f64 / self.pos as f64
    }

    fn fpr(&self, k: usize) -> f64 {
        self.fp[k] as f64 / self.neg as f64
    }
}

/// `sum_a |TPR_a - mean TPR| + |FPR_a - mean FPR|` over the given groups.
fn deviation(rates: &[(f64, f64)]) -> f64 {
    if rates.is_empty() {
        return 0.0;
    }
    let n = rates.len() as f64;
    let mt = rates.iter().map(|r| r.0).sum::<f64>() / n;
    let mf = rates.iter().map(|r| r.1).sum::<f64>() / n;
    rates.iter().map(|r| (r.0 - mt).abs() + (r.1 - mf).abs()).sum()
}

struct Evaluation {
    objective: f64,
    tpr_range: f64,
    balanced_accuracy: f64,
}

fn evaluate(counts: &[&GroupCounts], ks: &[usize]) -> Evaluation {
    let rates: Vec<(f64, f64)> = counts.iter().zip(ks).map(|(c, &k)| (c.tpr(k), c.fpr(k))).collect();
    let lo = rates.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let hi = rates.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut tp, mut pos, mut tn, mut neg) = (0, 0, 0, 0);
    for (c, &k) in counts.iter().zip(ks) {
        tp += c.tp[k];
        pos += c.pos;
        tn += c.neg - c.fp[k];
        neg += c.neg;
    }
    Evaluation {
        objective: deviation(&rates),
        tpr_range: if rates.is_empty() { 0.0 } else { hi - lo },
        balanced_accuracy: 0.5 * (tp as f64 / pos.max(1) as f64 + tn as f64 / neg.max(1) as f64),
    }
}

/// Equalized-odds objective for explicit grid indices; groups lacking
/// positives or negatives are ignored.
pub fn objective_at(groups: &[GroupScores], grid: &Grid, ks: &[usize]) -> f64 {
    let counts: Vec<GroupCounts> = groups.iter().map(|g| GroupCounts::new(g, grid)).collect();
    let (used, used_ks): (Vec<&GroupCounts>, Vec<usize>) = counts
        .iter()
        .zip(ks)
        .filter(|(c, _)| c.usable())
        .map(|(c, &k)| (c, k))
        .unzip();
    evaluate(&used, &used_ks).objective
}

/// Thresholds for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFit {
    pub class: Class,
    pub subgroups: Vec<String>,
    pub thresholds: Vec<f64>,
    /// Subgroups pinned at 0.5 because they lack positives or negatives.
    pub excluded: Vec<String>,
    pub initial_objective: f64,
    pub objective: f64,
    pub initial_tpr_range: f64,
    pub tpr_range: f64,
    /// Objective after each full sweep.
    pub history: Vec<f64>,
}

pub const MAX_SWEEPS: usize = 100;
const TIE_TOLERANCE: f64 = 1e-12;

/// Coordinate descent over per-subgroup thresholds for class `class`.
///
/// Starting from 0.5 everywhere, each subgroup's threshold is set in turn to
/// the grid value with the best key (objective, then pooled balanced
/// accuracy, then distance to 0.5), subject to the max-min TPR across
/// subgroups not exceeding its starting value. A move is taken only when it
/// strictly improves the key and does not raise the objective, so the
/// objective never increases. Sweeps stop at a fixed point.
pub fn optimize_thresholds(class: Class, groups: &[GroupScores], grid: &Grid) -> ClassFit {
    let counts: Vec<GroupCounts> = groups.iter().map(|g| GroupCounts::new(g, grid)).collect();
    let mut excluded = Vec::new();
    let mut active = Vec::new();
    for (i, (g, c)) in groups.iter().zip(&counts).enumerate() {
        if c.usable() {
            active.push(i);
        } else {
            warn!(
                "class {class}: subgroup {:?} lacks positives or negatives; threshold pinned at 0.5",
                g.subgroup
            );
            excluded.push(g.subgroup.clone());
        }
    }
    let used: Vec<&GroupCounts> = active.iter().map(|&i| &counts[i]).collect();
    let half = grid.half();
    let mut ks = vec![half; used.len()];
    let start = evaluate(&used, &ks);
    let mut current = start.objective;
    let mut history = Vec::new();

    let better = |a: &Evaluation, ka: usize, b: &Evaluation, kb: usize| -> bool {
        if (a.objective - b.objective).abs() > TIE_TOLERANCE {
            return a.objective < b.objective;
        }
        if (a.balanced_accuracy - b.balanced_accuracy).abs() > TIE_TOLERANCE {
            return a.balanced_accuracy > b.balanced_accuracy;
        }
        ka.abs_diff(half) < kb.abs_diff(half)
    };

    if used.len() >= 2 {
        for _ in 0..MAX_SWEEPS {
            let mut moved = false;
            for g in 0..used.len() {
                let mut best_k = ks[g];
                let mut best = evaluate(&used, &ks);
                let mut trial = ks.clone();
                for k in 0..=grid.size {
                    if k == ks[g] {
                        continue;
                    }
                    trial[g] = k;
                    let e = evaluate(&used, &trial);
                    if e.tpr_range > start.tpr_range || e.objective > current {
                        continue;
                    }
                    if better(&e, k, &best, best_k) {
                        best = e;
                        best_k = k;
                    }
                }
                if best_k != ks[g] {
                    ks[g] = best_k;
                    current = best.objective;
                    moved = true;
                }
            }
            history.push(current);
            if !moved {
                break;
            }
        }
    } else if !groups.is_empty() {
        warn!("class {class}: fewer than two usable subgroups; thresholds left at 0.5");
    }

    let end = evaluate(&used, &ks);
    let mut thresholds = vec![0.5; groups.len()];
    for (slot, &i) in active.iter().enumerate() {
        thresholds[i] = grid.threshold(ks[slot]);
    }
    ClassFit {
        class,
        subgroups: groups.iter().map(|g| g.subgroup.clone()).collect(),
        thresholds,
        excluded,
        initial_objective: start.objective,
        objective: end.objective,
        initial_tpr_range: start.tpr_range,
        tpr_range: end.tpr_range,
        history,
    }
}

/// Argmax of `p_c - t_c`; ties go to the larger `p_c`, then to class order.
pub fn decide_multiclass(calibrated: &Probs, thresholds: &[f64; NUM_CLASSES]) -> Class {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        let m = calibrated[c] - thresholds[c];
        let mb = calibrated[best] - thresholds[best];
        if m > mb || (m == mb && calibrated[c] > calibrated[best]) {
            best = c;
        }
    }
    Class::ALL[best]
}

/// Thresholds and calibrators for every subgroup of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub attribute: Field,
    pub grid_step: f64,
    pub thresholds: BTreeMap<String, [f64; NUM_CLASSES]>,
    pub classes: Vec<ClassFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeoModel {
    pub table: ThresholdTable,
    pub calibrators: BTreeMap<String, Vec<IsotonicModel>>,
}

/// Post-processed output for one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct CeoOutput {
    pub calibrated: BTreeMap<String, Probs>,
    pub decisions: BTreeMap<String, Class>,
}

impl CeoOutput {
    /// Hard decisions as one-hot probability vectors.
    pub fn to_prediction_set(&self, seed: u64) -> PredictionSet {
        let mut set = PredictionSet::new(seed);
        for (id, c) in &self.decisions {
            let mut p = [0.0; NUM_CLASSES];
            p[c.index()] = 1.0;
            set.entries.insert(id.clone(), p);
        }
        set
    }
}

fn grouped<'a>(
    preds: &'a PredictionSet,
    records: &'a [SubjectRecord],
    attribute: Field,
) -> Result<BTreeMap<&'static str, Vec<(&'a str, &'a Probs, Class)>>> {
    let index = index_records(records);
    let mut out: BTreeMap<&'static str, Vec<_>> = BTreeMap::new();
    for (id, p) in &preds.entries {
        let rec = index
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownSubject(id.clone()))?;
        let sub = rec.value_of(attribute).ok_or_else(|| {
            Error::invalid(format!("subject {id} has no `{attribute}` value"))
        })?;
        out.entry(sub).or_default().push((id.as_str(), p, rec.label));
    }
    Ok(out)
}

impl CeoModel {
    pub fn fit(
        validation: &PredictionSet,
        records: &[SubjectRecord],
        attribute: Field,
        grid_step: f64,
    ) -> Result<CeoModel> {
        CeoModel::fit_with(Exec::default(), validation, records, attribute, grid_step)
    }

    pub fn fit_with(
        exec: Exec,
        validation: &PredictionSet,
        records: &[SubjectRecord],
        attribute: Field,
        grid_step: f64,
    ) -> Result<CeoModel> {
        if !attribute.is_protected() {
            return Err(Error::NotProtected(attribute.to_string()));
        }
        let grid = Grid::new(grid_step)?;
        let groups = grouped(validation, records, attribute)?;
        if groups.is_empty() {
            return Err(Error::invalid("no validation predictions"));
        }
        let subgroups: Vec<&'static str> = groups.keys().copied().collect();

        // One isotonic model per (subgroup, class) cell.
        let cells: Vec<(usize, usize)> = (0..subgroups.len())
            .flat_map(|a| (0..NUM_CLASSES).map(move |c| (a, c)))
            .collect();
        let fitted = par::map(exec, &cells, |&(a, c)| {
            let members = &groups[subgroups[a]];
            let scores: Vec<f64> = members.iter().map(|m| m.1[c]).collect();
            let targets: Vec<f64> = members.iter().map(|m| (m.2.index() == c) as u8 as f64).collect();
            isotonic_fit(&scores, &targets)
        });
        let mut calibrators: BTreeMap<String, Vec<IsotonicModel>> = BTreeMap::new();
        for (&(a, _), model) in cells.iter().zip(fitted) {
            calibrators.entry(subgroups[a].to_string()).or_default().push(model?);
        }

        let classes = par::map(exec, Class::ALL, |&class| {
            let c = class.index();
            let gs: Vec<GroupScores> = subgroups
                .iter()
                .map(|sub| {
                    let cal = &calibrators[*sub][c];
                    let members = &groups[sub];
                    GroupScores {
                        subgroup: sub.to_string(),
                        scores: members.iter().map(|m| cal.eval(m.1[c])).collect(),
                        positive: members.iter().map(|m| m.2 == class).collect(),
                    }
                })
                .collect();
            optimize_thresholds(class, &gs, &grid)
        });

        let mut thresholds = BTreeMap::new();
        for (a, sub) in subgroups.iter().enumerate() {
            let mut t = [0.5; NUM_CLASSES];
            for fit in &classes {
                t[fit.class.index()] = fit.thresholds[a];
            }
            thresholds.insert(sub.to_string(), t);
        }
        Ok(CeoModel {
            table: ThresholdTable {
                attribute,
                grid_step,
                thresholds,
                classes,
            },
            calibrators,
        })
    }

    /// Calibrates and decides every subject in `preds`. Subgroups unseen at
    /// fit time pass through uncalibrated with 0.5 thresholds.
    pub fn apply(&self, preds: &PredictionSet, records: &[SubjectRecord]) -> Result<CeoOutput> {
        let attribute = self.table.attribute;
        let groups = grouped(preds, records, attribute)?;
        let mut calibrated = BTreeMap::new();
        let mut decisions = BTreeMap::new();
        let identity = vec![IsotonicModel::identity(); NUM_CLASSES];
        for (sub, members) in groups {
            let cal = self.calibrators.get(sub).unwrap_or_else(|| {
                warn!("subgroup {sub:?} not seen during calibration; passing scores through");
                &identity
            });
            let t = self.table.thresholds.get(sub).copied().unwrap_or([0.5; NUM_CLASSES]);
            for (id, p, _) in members {
                let q = [cal[0].eval(p[0]), cal[1].eval(p[1]), cal[2].eval(p[2])];
                decisions.insert(id.to_string(), decide_multiclass(&q, &t));
                calibrated.insert(id.to_string(), q);
            }
        }
        Ok(CeoOutput {
            calibrated,
            decisions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pav_examples() {
        assert_eq!(pav(&[0.1, 0.5, 0.9], &[1.0; 3]), vec![0.1, 0.5, 0.9]);
        assert_eq!(pav(&[1.0, 0.0], &[1.0; 2]), vec![0.5, 0.5]);
        assert_eq!(pav(&[1.0, 0.0, 1.0], &[1.0; 3]), vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn isotonic_model_steps_and_ties() {
        let m = isotonic_fit(&[0.3, 0.1, 0.2, 0.2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(m.breakpoints, vec![0.1, 0.2, 0.3]);
        assert_eq!(m.values, vec![0.0, 0.5, 1.0]);
        assert_eq!(m.eval(-5.0), 0.0);
        assert_eq!(m.eval(0.25), 0.5);
        assert_eq!(m.eval(9.0), 1.0);
        let c = isotonic_fit(&[0.1, 0.9], &[1.0, 1.0]).unwrap();
        assert_eq!((c.eval(0.0), c.eval(1.0)), (1.0, 1.0));
    }

    #[test]
    fn grid_requires_half() {
        assert!(Grid::new(0.01).is_ok());
        assert_eq!(Grid::new(0.01).unwrap().threshold(50), 0.5);
        assert!(Grid::new(0.03).is_err());
        assert!(Grid::new(0.2).is_err());
    }

    #[test]
    fn margin_decisions() {
        let p = [0.4, 0.35, 0.25];
        assert_eq!(decide_multiclass(&p, &[0.5, 0.2, 0.5]), Class::Mci);
        assert_eq!(decide_multiclass(&p, &[0.5; 3]), Class::Control);
        // equal margins: the higher probability wins
        assert_eq!(decide_multiclass(&[0.3, 0.5, 0.2], &[0.1, 0.3, 0.5]), Class::Mci);
        assert_eq!(decide_multiclass(&[0.5, 0.3, 0.2], &[0.3, 0.1, 0.5]), Class::Control);
    }

    fn group(name: &str, pos: &[f64], neg: &[f64]) -> GroupScores {
        GroupScores {
            subgroup: name.into(),
            scores: pos.iter().chain(neg).copied().collect(),
            positive: pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect(),
        }
    }

    #[test]
    fn equalized_groups_stay_at_half() {
        let g = vec![group("a", &[0.9, 0.7], &[0.2, 0.1]), group("b", &[0.8, 0.6], &[0.3, 0.4])];
        let fit = optimize_thresholds(Class::Ad, &g, &Grid::new(0.01).unwrap());
        assert_eq!(fit.thresholds, vec![0.5, 0.5]);
        assert_eq!(fit.objective, 0.0);
    }

    #[test]
    fn excluded_group_pinned() {
        let g = vec![
            group("a", &[0.9, 0.4], &[0.2]),
            group("b", &[0.8, 0.6], &[0.3]),
            group("c", &[0.7], &[]),
        ];
        let fit = optimize_thresholds(Class::Mci, &g, &Grid::new(0.01).unwrap());
        assert_eq!(fit.excluded, vec!["c".to_string()]);
        assert_eq!(fit.thresholds[2], 0.5);
        assert!(fit.objective <= fit.initial_objective);
        assert_eq!(fit.objective, 0.0);
    }

    #[test]
    fn fixed_point_history_non_increasing() {
        let g = vec![
            group("a", &[0.9, 0.55, 0.45], &[0.6, 0.2, 0.1]),
            group("b", &[0.52, 0.48, 0.3], &[0.51, 0.49, 0.05]),
        ];
        let fit = optimize_thresholds(Class::Control, &g, &Grid::new(0.01).unwrap());
        let mut prev = fit.initial_objective;
        for &h in &fit.history {
            assert!(h <= prev);
            prev = h;
        }
        assert!(fit.tpr_range <= fit.initial_tpr_range);
    }
}
