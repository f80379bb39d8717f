//! Performance and subgroup fairness metrics.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::domain::{Class, Field, Probs, SubjectRecord, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::ingest::{argmax_class, index_records, PredictionSet};

/// One-vs-rest confusion counts for a (class, subgroup) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCell {
    pub class: Class,
    pub subgroup: String,
    pub tp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
    /// `None` when the cell has no positives.
    pub tpr: Option<f64>,
    /// `None` when the cell has no negatives.
    pub fpr: Option<f64>,
}

impl RateCell {
    fn from_counts(class: Class, subgroup: &str, tp: u64, fn_: u64, fp: u64, tn: u64) -> Self {
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        RateCell {
            class,
            subgroup: subgroup.to_string(),
            tp,
            fn_,
            fp,
            tn,
            tpr: ratio(tp, tp + fn_),
            fpr: ratio(fp, fp + tn),
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub attribute: Field,
    /// Subgroups in report order.
    pub subgroups: Vec<String>,
    /// Class-major: all subgroups of `control`, then `mci`, then `ad`.
    pub cells: Vec<RateCell>,
}

impl RateTable {
    pub fn cell(&self, class: Class, subgroup: &str) -> Option<&RateCell> {
        self.cells
            .iter()
            .find(|c| c.class == class && c.subgroup == subgroup)
    }

    pub fn tpr(&self, class: Class, subgroup: &str) -> Option<f64> {
        self.cell(class, subgroup).and_then(|c| c.tpr)
    }

    pub fn fpr(&self, class: Class, subgroup: &str) -> Option<f64> {
        self.cell(class, subgroup).and_then(|c| c.fpr)
    }

    pub fn undefined_cells(&self) -> impl Iterator<Item = &RateCell> {
        self.cells.iter().filter(|c| c.tpr.is_none() || c.fpr.is_none())
    }
}

/// A labelled decision for one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision<'a> {
    pub subgroup: &'a str,
    pub label: Class,
    pub pred: Class,
}

/// Orders subgroup tokens by the attribute's declared value order, with any
/// unexpected tokens sorted after.
fn order_subgroups(attribute: Field, present: impl IntoIterator<Item = String>) -> Vec<String> {
    let declared = attribute.values();
    let mut subs: Vec<String> = present.into_iter().collect();
    subs.sort_by_key(|s| {
        (
            declared.iter().position(|d| d == s).unwrap_or(usize::MAX),
            s.clone(),
        )
    });
    subs.dedup();
    subs
}

pub fn rates_from_decisions(attribute: Field, decisions: &[Decision<'_>]) -> RateTable {
    let subgroups = order_subgroups(attribute, decisions.iter().map(|d| d.subgroup.to_string()));
    let mut cells = Vec::with_capacity(NUM_CLASSES * subgroups.len());
    for &class in Class::ALL {
        for sub in &subgroups {
            let (mut tp, mut fn_, mut fp, mut tn) = (0, 0, 0, 0);
            for d in decisions.iter().filter(|d| d.subgroup == sub) {
                match (d.label == class, d.pred == class) {
                    (true, true) => tp += 1,
                    (true, false) => fn_ += 1,
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                }
            }
            cells.push(RateCell::from_counts(class, sub, tp, fn_, fp, tn));
        }
    }
    RateTable {
        attribute,
        subgroups,
        cells,
    }
}

/// Per (class, subgroup) TPR/FPR of the hard predictions in `preds`.
///
/// Subjects whose attribute value is missing (unimputed education) are left
/// out with a warning.
pub fn subgroup_rates(
    preds: &PredictionSet,
    records: &[SubjectRecord],
    attribute: Field,
) -> Result<RateTable> {
    if !attribute.is_protected() {
        return Err(Error::NotProtected(attribute.to_string()));
    }
    let index = index_records(records);
    let mut decisions = Vec::with_capacity(preds.len());
    let mut skipped = 0usize;
    for (id, probs) in &preds.entries {
        let rec = index
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownSubject(id.clone()))?;
        match rec.value_of(attribute) {
            Some(subgroup) => decisions.push(Decision {
                subgroup,
                label: rec.label,
                pred: argmax_class(probs),
            }),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("{skipped} subjects without a `{attribute}` value left out of the rate table");
    }
    Ok(rates_from_decisions(attribute, &decisions))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupMacro {
    pub subgroup: String,
    pub macro_tpr: Option<f64>,
    pub macro_fpr: Option<f64>,
    /// Cells (TPR or FPR) left out because their denominator was empty.
    pub skipped_cells: usize,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => skipped += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), skipped)
}

/// Unweighted mean of TPR and FPR over the classes where each is defined.
///
/// A subgroup whose cells are all undefined is omitted with a warning.
pub fn macro_average(table: &RateTable) -> Result<Vec<SubgroupMacro>> {
    if table.cells.is_empty() {
        return Err(Error::invalid("empty rate table"));
    }
    let mut out = Vec::with_capacity(table.subgroups.len());
    for sub in &table.subgroups {
        let cells: Vec<&RateCell> = table.cells.iter().filter(|c| &c.subgroup == sub).collect();
        let (macro_tpr, skip_t) = mean_defined(cells.iter().map(|c| c.tpr));
        let (macro_fpr, skip_f) = mean_defined(cells.iter().map(|c| c.fpr));
        if macro_tpr.is_none() && macro_fpr.is_none() {
            warn!("subgroup {sub:?} has no defined cells; omitted from macro averages");
            continue;
        }
        out.push(SubgroupMacro {
            subgroup: sub.clone(),
            macro_tpr,
            macro_fpr,
            skipped_cells: skip_t + skip_f,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub attribute: Field,
    pub per_class_tpr_gap: BTreeMap<Class, f64>,
    pub per_class_fpr_gap: BTreeMap<Class, f64>,
    pub macro_by_subgroup: Vec<SubgroupMacro>,
    pub macro_fpr_gap: f64,
    pub eoo_gap: f64,
    pub eo_gap: f64,
}

fn spread(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut n = 0;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
        n += 1;
    }
    (n >= 2).then_some(hi - lo)
}

pub fn gap_report(table: &RateTable) -> Result<GapReport> {
    let macros = macro_average(table)?;
    let eoo_gap = spread(macros.iter().filter_map(|m| m.macro_tpr)).ok_or_else(|| {
        Error::Undefined(format!(
            "`{}` needs at least two subgroups with a defined macro TPR",
            table.attribute
        ))
    })?;
    let macro_fpr_gap = spread(macros.iter().filter_map(|m| m.macro_fpr)).unwrap_or(0.0);
    let mut per_class_tpr_gap = BTreeMap::new();
    let mut per_class_fpr_gap = BTreeMap::new();
    for &class in Class::ALL {
        let of_class = || table.cells.iter().filter(move |c| c.class == class);
        if let Some(g) = spread(of_class().filter_map(|c| c.tpr)) {
            per_class_tpr_gap.insert(class, g);
        }
        if let Some(g) = spread(of_class().filter_map(|c| c.fpr)) {
            per_class_fpr_gap.insert(class, g);
        }
    }
    Ok(GapReport {
        attribute: table.attribute,
        per_class_tpr_gap,
        per_class_fpr_gap,
        macro_by_subgroup: macros,
        macro_fpr_gap,
        eoo_gap,
        eo_gap: eoo_gap + macro_fpr_gap,
    })
}

/// `sum_c sum_a |TPR(a, c) - mean_a TPR(., c)|` over defined cells.
pub fn tpr_deviation_sum(table: &RateTable) -> f64 {
    Class::ALL
        .iter()
        .map(|&class| {
            let tprs: Vec<f64> = table
                .cells
                .iter()
                .filter(|c| c.class == class)
                .filter_map(|c| c.tpr)
                .collect();
            if tprs.is_empty() {
                return 0.0;
            }
            let mean = tprs.iter().sum::<f64>() / tprs.len() as f64;
            tprs.iter().map(|t| (t - mean).abs()).sum::<f64>()
        })
        .sum()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::invalid("no samples"));
    }
    Ok(())
}

/// Macro F1 over the classes with a nonzero denominator.
pub fn f1_macro(preds: &[Class], labels: &[Class]) -> Result<f64> {
    check_lengths(preds.len(), labels.len())?;
    let mut total = 0.0;
    let mut n = 0;
    for &c in Class::ALL {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &y) in preds.iter().zip(labels) {
            match (y == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        let den = 2 * tp + fp + fn_;
        if den > 0 {
            total += 2.0 * tp as f64 / den as f64;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Midrank (1-based) of every score.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary ROC AUC via the Mann-Whitney statistic with midranks for ties.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both positives and negatives".into()));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Average precision: the step-interpolated area under the precision-recall
/// curve, with tied scores treated as one threshold.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), positive.len())?;
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 || n_pos == positive.len() {
        return Err(Error::Undefined("AUPRC needs both positives and negatives".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += positive[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

fn one_vs_rest(
    probs: &[Probs],
    labels: &[Class],
    metric: fn(&[f64], &[bool]) -> Result<f64>,
) -> Result<BTreeMap<Class, f64>> {
    check_lengths(probs.len(), labels.len())?;
    let mut out = BTreeMap::new();
    for &c in Class::ALL {
        let scores: Vec<f64> = probs.iter().map(|p| p[c.index()]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        let v = metric(&scores, &pos).map_err(|e| Error::Undefined(format!("class {c}: {e}")))?;
        out.insert(c, v);
    }
    Ok(out)
}

pub fn auc_ovr(probs: &[Probs], labels: &[Class]) -> Result<BTreeMap<Class, f64>> {
    one_vs_rest(probs, labels, auc_binary)
}

pub fn auprc_ovr(probs: &[Probs], labels: &[Class]) -> Result<BTreeMap<Class, f64>> {
    one_vs_rest(probs, labels, average_precision)
}

pub const LOG_LOSS_CLAMP: f64 = 1e-15;

/// Mean negative log probability of the true class, clamped to
/// `[1e-15, 1 - 1e-15]`.
pub fn log_loss_multiclass(probs: &[Probs], labels: &[Class]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(p, y)| -p[y.index()].clamp(LOG_LOSS_CLAMP, 1.0 - LOG_LOSS_CLAMP).ln())
        .sum();
    Ok(total / probs.len() as f64)
}

/// Word error rate: minimal (substitutions + deletions + insertions) over
/// the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER needs a nonempty reference"));
    }
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[hypothesis.len()] as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    #[default]
    StudentT,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
    pub ci95_half_width: f64,
}

pub fn seed_aggregate(values: &[f64]) -> Result<SeedAggregate> {
    seed_aggregate_with(values, Interval::StudentT)
}

pub fn seed_aggregate_with(values: &[f64], interval: Interval) -> Result<SeedAggregate> {
    let n = values.len();
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 runs to aggregate, got {n}")));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let q = match interval {
        Interval::StudentT => StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .inverse_cdf(0.975),
        Interval::Normal => Normal::new(0.0, 1.0)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .inverse_cdf(0.975),
    };
    Ok(SeedAggregate {
        n,
        mean,
        std,
        ci95_half_width: q * std / (n as f64).sqrt(),
    })
}

/// Headline performance of one prediction set. Ranking metrics are `None`
/// when some class has no positives or no negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub n: usize,
    pub f1_macro: f64,
    pub log_loss: f64,
    pub auc: Option<BTreeMap<Class, f64>>,
    pub auprc: Option<BTreeMap<Class, f64>>,
}

pub fn performance(preds: &PredictionSet, records: &[SubjectRecord]) -> Result<Performance> {
    let index = index_records(records);
    let mut probs = Vec::with_capacity(preds.len());
    let mut labels = Vec::with_capacity(preds.len());
    for (id, p) in &preds.entries {
        let rec = index
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownSubject(id.clone()))?;
        probs.push(*p);
        labels.push(rec.label);
    }
    let hard: Vec<Class> = probs.iter().map(argmax_class).collect();
    Ok(Performance {
        n: probs.len(),
        f1_macro: f1_macro(&hard, &labels)?,
        log_loss: log_loss_multiclass(&probs, &labels)?,
        auc: auc_ovr(&probs, &labels).ok(),
        auprc: auprc_ovr(&probs, &labels).ok(),
    })
}
