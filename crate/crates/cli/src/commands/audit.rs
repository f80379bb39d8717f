use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use fairscreen::fairmetrics::{gap_report, performance, seed_aggregate, subgroup_rates, tpr_deviation_sum, GapReport, Performance, RateTable, SeedAggregate};
use fairscreen::ingest::{impute_missing, PredictionSet, DEFAULT_IMPUTE_MAX_ITERS, DEFAULT_IMPUTE_TOL};
use fairscreen::{Class, Field, SubjectRecord};
use serde::{Deserialize, Serialize};

use super::{load_attributes, load_predictions, to_json, wants, Format};
use crate::manifest::Run;
use crate::render::{mean_ci, num, table, Bar, BarChart};

#[derive(Debug, Clone, Args, Serialize)]
pub struct AuditArgs {
    /// Prediction JSONL; lines with different seeds are audited as separate runs.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Attribute table (CSV, or JSONL by extension).
    #[arg(long)]
    pub attributes: PathBuf,
    /// Protected attribute to audit.
    #[arg(long)]
    pub attribute: Field,
    /// Fill missing education values before auditing.
    #[arg(long)]
    pub impute: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "json")]
    pub format: Vec<Format>,
}

/// Metrics of one prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRun {
    pub seed: u64,
    pub rates: RateTable,
    pub gaps: GapReport,
    pub performance: Performance,
    pub tpr_deviation_sum: f64,
}

/// Per-cell rates pooled over runs. The CI is present when at least two
/// runs define the rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub class: Class,
    pub subgroup: String,
    pub tpr_mean: Option<f64>,
    pub tpr_ci95: Option<f64>,
    pub fpr_mean: Option<f64>,
    pub fpr_ci95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBundle {
    pub title: String,
    pub attribute: Field,
    pub subgroups: Vec<String>,
    pub runs: Vec<AuditRun>,
    pub cells: Vec<CellSummary>,
    /// Headline metrics over runs; empty with a single run.
    pub aggregates: BTreeMap<String, SeedAggregate>,
}

pub fn audit_run(preds: &PredictionSet, records: &[SubjectRecord], attribute: Field) -> Result<AuditRun> {
    preds.validate_against(records)?;
    let rates = subgroup_rates(preds, records, attribute)?;
    let gaps = gap_report(&rates)?;
    Ok(AuditRun {
        seed: preds.seed,
        tpr_deviation_sum: tpr_deviation_sum(&rates),
        performance: performance(preds, records)?,
        gaps,
        rates,
    })
}

fn pooled(values: &[f64]) -> (Option<f64>, Option<f64>) {
    match values.len() {
        0 => (None, None),
        1 => (Some(values[0]), None),
        _ => seed_aggregate(values)
            .map(|a| (Some(a.mean), Some(a.ci95_half_width)))
            .unwrap_or((None, None)),
    }
}

impl AuditBundle {
    pub fn new(title: String, attribute: Field, runs: Vec<AuditRun>) -> AuditBundle {
        let mut subgroups: Vec<String> = Vec::new();
        for r in &runs {
            for s in &r.rates.subgroups {
                if !subgroups.contains(s) {
                    subgroups.push(s.clone());
                }
            }
        }
        let declared = attribute.values();
        subgroups.sort_by_key(|s| (declared.iter().position(|d| d == s).unwrap_or(usize::MAX), s.clone()));

        let mut cells = Vec::new();
        for &class in Class::ALL {
            for sub in &subgroups {
                let tprs: Vec<f64> = runs.iter().filter_map(|r| r.rates.tpr(class, sub)).collect();
                let fprs: Vec<f64> = runs.iter().filter_map(|r| r.rates.fpr(class, sub)).collect();
                let (tpr_mean, tpr_ci95) = pooled(&tprs);
                let (fpr_mean, fpr_ci95) = pooled(&fprs);
                cells.push(CellSummary {
                    class,
                    subgroup: sub.clone(),
                    tpr_mean,
                    tpr_ci95,
                    fpr_mean,
                    fpr_ci95,
                });
            }
        }

        let mut aggregates = BTreeMap::new();
        let metrics: [(&str, fn(&AuditRun) -> f64); 5] = [
            ("eoo_gap", |r| r.gaps.eoo_gap),
            ("eo_gap", |r| r.gaps.eo_gap),
            ("f1_macro", |r| r.performance.f1_macro),
            ("log_loss", |r| r.performance.log_loss),
            ("tpr_deviation_sum", |r| r.tpr_deviation_sum),
        ];
        if runs.len() >= 2 {
            for (name, f) in metrics {
                let vals: Vec<f64> = runs.iter().map(f).collect();
                if let Ok(a) = seed_aggregate(&vals) {
                    aggregates.insert(name.to_string(), a);
                }
            }
        }
        AuditBundle {
            title,
            attribute,
            subgroups,
            runs,
            cells,
            aggregates,
        }
    }

    fn cell(&self, class: Class, sub: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.class == class && c.subgroup == sub)
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "## {}\n", self.title);
        let seeds: Vec<String> = self.runs.iter().map(|r| r.seed.to_string()).collect();
        let _ = writeln!(
            s,
            "Attribute `{}`, {} run(s) (seeds {}).\n",
            self.attribute,
            self.runs.len(),
            seeds.join(", ")
        );
        let rows: Vec<Vec<String>> = if self.aggregates.is_empty() {
            self.runs
                .iter()
                .flat_map(|r| {
                    [
                        ("eoo_gap", r.gaps.eoo_gap),
                        ("eo_gap", r.gaps.eo_gap),
                        ("f1_macro", r.performance.f1_macro),
                        ("log_loss", r.performance.log_loss),
                        ("tpr_deviation_sum", r.tpr_deviation_sum),
                    ]
                })
                .map(|(k, v)| vec![k.to_string(), format!("{v:.4}")])
                .collect()
        } else {
            self.aggregates
                .iter()
                .map(|(k, a)| vec![k.clone(), mean_ci(a.mean, Some(a.ci95_half_width))])
                .collect()
        };
        s.push_str(&table(&["metric", "value (mean ± 95% CI)"], &rows));
        s.push('\n');

        let mut rows = Vec::new();
        for c in &self.cells {
            rows.push(vec![
                c.class.to_string(),
                c.subgroup.clone(),
                c.tpr_mean.map_or("-".into(), |m| mean_ci(m, c.tpr_ci95)),
                c.fpr_mean.map_or("-".into(), |m| mean_ci(m, c.fpr_ci95)),
            ]);
        }
        s.push_str(&table(&["class", "subgroup", "TPR", "FPR"], &rows));
        if let Some(last) = self.runs.last() {
            s.push('\n');
            let rows: Vec<Vec<String>> = last
                .gaps
                .macro_by_subgroup
                .iter()
                .map(|m| vec![m.subgroup.clone(), num(m.macro_tpr), num(m.macro_fpr), m.skipped_cells.to_string()])
                .collect();
            let _ = writeln!(s, "Macro averages, seed {}:\n", last.seed);
            s.push_str(&table(&["subgroup", "macro TPR", "macro FPR", "undefined cells"], &rows));
        }
        s
    }

    /// TPR and FPR charts: classes grouped within each subgroup.
    pub fn charts(&self) -> Vec<(&'static str, String)> {
        let series: Vec<String> = Class::ALL.iter().map(|c| c.to_string()).collect();
        let chart = |rate: &str, pick: fn(&CellSummary) -> (Option<f64>, Option<f64>)| BarChart {
            title: format!("{} {rate} by {}", self.title, self.attribute),
            y_label: rate.to_string(),
            groups: self.subgroups.clone(),
            series: series.clone(),
            values: self
                .subgroups
                .iter()
                .map(|sub| {
                    Class::ALL
                        .iter()
                        .map(|&c| {
                            self.cell(c, sub).and_then(|cell| {
                                let (m, ci) = pick(cell);
                                m.map(|value| Bar { value, ci })
                            })
                        })
                        .collect()
                })
                .collect(),
            y_max: Some(1.0),
        };
        vec![
            ("tpr", chart("TPR", |c| (c.tpr_mean, c.tpr_ci95))),
            ("fpr", chart("FPR", |c| (c.fpr_mean, c.fpr_ci95))),
        ]
        .into_iter()
        .map(|(k, c)| (k, c.svg(None)))
        .collect()
    }

    pub fn csv(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Row<'a> {
            seed: u64,
            class: Class,
            subgroup: &'a str,
            tp: u64,
            #[serde(rename = "fn")]
            fn_: u64,
            fp: u64,
            tn: u64,
            tpr: Option<f64>,
            fpr: Option<f64>,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.runs {
            for c in &r.rates.cells {
                w.serialize(Row {
                    seed: r.seed,
                    class: c.class,
                    subgroup: &c.subgroup,
                    tp: c.tp,
                    fn_: c.fn_,
                    fp: c.fp,
                    tn: c.tn,
                    tpr: c.tpr,
                    fpr: c.fpr,
                })?;
            }
        }
        Ok(w.into_inner()?)
    }
}

/// Writes the bundle in every requested format under `stem`.
pub fn write_bundle(run: &mut Run, bundle: &AuditBundle, stem: &str, formats: &[Format]) -> Result<()> {
    if wants(formats, Format::Json) {
        run.write(&format!("{stem}.json"), &to_json(bundle)?)?;
    }
    if wants(formats, Format::Csv) {
        run.write(&format!("{stem}.csv"), &bundle.csv()?)?;
    }
    if wants(formats, Format::Md) {
        run.write(&format!("{stem}.md"), bundle.markdown().as_bytes())?;
    }
    if wants(formats, Format::Svg) {
        for (name, svg) in bundle.charts() {
            run.write(&format!("{stem}_{name}.svg"), svg.as_bytes())?;
        }
    }
    Ok(())
}

pub fn run(args: &AuditArgs, run: &mut Run) -> Result<()> {
    let mut records = load_attributes(run, &args.attributes)?;
    let sets = load_predictions(run, &args.predictions)?;
    run.seeds(&sets.iter().map(|s| s.seed).collect::<Vec<_>>());
    if args.impute {
        let imp = impute_missing(&records, Field::Education, DEFAULT_IMPUTE_MAX_ITERS, DEFAULT_IMPUTE_TOL)?;
        let n = imp.imputed.iter().filter(|x| **x).count();
        if n > 0 {
            log::info!("imputed education for {n} subjects");
        }
        records = imp.records;
    }
    let runs = sets
        .iter()
        .map(|s| audit_run(s, &records, args.attribute))
        .collect::<Result<Vec<_>>>()?;
    let bundle = AuditBundle::new(format!("Audit of {}", args.predictions.display()), args.attribute, runs);
    write_bundle(run, &bundle, "audit", &args.format)
}
