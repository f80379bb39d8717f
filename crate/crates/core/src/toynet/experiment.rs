//! Baseline versus mitigated training runs on one synthetic dataset.

use serde::{Deserialize, Serialize};

use super::objective::AdversaryConfig;
use super::report::{modality_weight_report, ModalityReport};
use super::scenario::{Dataset, Split};
use super::train::{train, EpochStats, TrainConfig, Weighting};
use super::ModelKind;
use crate::ceo::CeoModel;
use crate::domain::{Class, SubjectRecord};
use crate::error::{invalid, Result};
use crate::fairmetrics::{gap_report, performance, seed_aggregate, subgroup_rates, tpr_deviation_sum, GapReport, Performance, RateTable, SeedAggregate};
use crate::ingest::PredictionSet;
use crate::par::{self, Exec};
use crate::reweight::frequency_weights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Frequency,
    DynamicTpr,
    Adversarial,
    /// Post-processing of the baseline's predictions.
    Ceo,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Frequency,
        Variant::DynamicTpr,
        Variant::Adversarial,
        Variant::Ceo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Frequency => "frequency",
            Variant::DynamicTpr => "dynamic_tpr",
            Variant::Adversarial => "adversarial",
            Variant::Ceo => "ceo",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim())
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub kind: ModelKind,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub lambda: f64,
    pub ceo_grid_step: f64,
    /// Overrides of the per-architecture training defaults.
    pub epochs: Option<usize>,
    pub hidden: Option<usize>,
    pub lr: Option<f64>,
}

impl SimulationConfig {
    pub fn new(kind: ModelKind, seeds: Vec<u64>) -> SimulationConfig {
        SimulationConfig {
            kind,
            seeds,
            variants: Variant::ALL.to_vec(),
            lambda: super::objective::DEFAULT_LAMBDA,
            ceo_grid_step: 0.01,
            epochs: None,
            hidden: None,
            lr: None,
        }
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::new(self.kind, seed);
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(h) = self.hidden {
            c.hidden = h;
        }
        if let Some(lr) = self.lr {
            c.lr = lr;
            c.lr_linguistic = lr;
        }
        c
    }
}

/// Test-split fairness and performance of one variant under one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub rates: RateTable,
    pub gaps: GapReport,
    pub performance: Performance,
    pub tpr_deviation_sum: f64,
    /// Smallest macro-TPR margin of any other subgroup over the most
    /// disadvantaged one.
    pub worst_subgroup: String,
    pub worst_subgroup_gap: f64,
    pub history: Vec<EpochStats>,
    #[serde(skip)]
    pub predictions: Option<PredictionSet>,
}

/// Validation-side view of the CEO threshold search, per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CeoClassSummary {
    pub class: Class,
    pub initial_objective: f64,
    pub objective: f64,
    pub initial_tpr_range: f64,
    pub tpr_range: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub outcomes: Vec<VariantOutcome>,
    pub ceo: Option<Vec<CeoClassSummary>>,
    pub modality: ModalityReport,
}

impl SeedRun {
    pub fn outcome(&self, v: Variant) -> Option<&VariantOutcome> {
        self.outcomes.iter().find(|o| o.variant == v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub eoo_gap: Option<SeedAggregate>,
    pub eo_gap: Option<SeedAggregate>,
    pub f1_macro: Option<SeedAggregate>,
    pub tpr_deviation_sum: Option<SeedAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub scenario: String,
    pub config: SimulationConfig,
    pub subgroups: Vec<String>,
    pub runs: Vec<SeedRun>,
    pub summary: Vec<VariantSummary>,
}

fn outcome(
    variant: Variant,
    preds: PredictionSet,
    records: &[SubjectRecord],
    data: &Dataset,
    history: Vec<EpochStats>,
) -> Result<VariantOutcome> {
    let rates = subgroup_rates(&preds, records, data.attribute)?;
    let gaps = gap_report(&rates)?;
    let perf = performance(&preds, records)?;
    let macros: Vec<(String, f64)> = gaps
        .macro_by_subgroup
        .iter()
        .filter_map(|m| m.macro_tpr.map(|t| (m.subgroup.clone(), t)))
        .collect();
    let (worst, worst_tpr) = macros
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("gap report guarantees two subgroups");
    let margin = macros
        .iter()
        .filter(|(s, _)| *s != worst)
        .map(|(_, t)| t - worst_tpr)
        .fold(f64::INFINITY, f64::min);
    Ok(VariantOutcome {
        variant,
        tpr_deviation_sum: tpr_deviation_sum(&rates),
        rates,
        gaps,
        performance: perf,
        worst_subgroup: worst,
        worst_subgroup_gap: margin,
        history,
        predictions: Some(preds),
    })
}

/// Trains every requested variant for one seed.
pub fn run_seed(data: &Dataset, cfg: &SimulationConfig, seed: u64) -> Result<SeedRun> {
    let train_records = data.records(Split::Train);
    let val_records = data.records(Split::Val);
    let test_records = data.records(Split::Test);
    let wants = |v: Variant| cfg.variants.contains(&v);

    let mut outcomes = Vec::new();
    let mut ceo = None;
    let base_cfg = cfg.train_config(seed);
    let baseline = train(data, &base_cfg)?;
    let modality = modality_weight_report(&baseline.params, &data.test)?;
    if wants(Variant::Baseline) {
        outcomes.push(outcome(Variant::Baseline, baseline.test.clone(), &test_records, data, baseline.history.clone())?);
    }
    for variant in [Variant::Frequency, Variant::DynamicTpr, Variant::Adversarial] {
        if !wants(variant) {
            continue;
        }
        let mut c = base_cfg.clone();
        match variant {
            Variant::Frequency => {
                c.weighting = Weighting::Static {
                    weights: frequency_weights(&train_records, data.attribute)?,
                }
            }
            Variant::DynamicTpr => c.weighting = Weighting::dynamic(),
            Variant::Adversarial => c.adversary = Some(AdversaryConfig { lambda: cfg.lambda }),
            _ => unreachable!(),
        }
        let out = train(data, &c)?;
        outcomes.push(outcome(variant, out.test, &test_records, data, out.history)?);
    }
    if wants(Variant::Ceo) {
        let model = CeoModel::fit_with(Exec::Sequential, &baseline.val, &val_records, data.attribute, cfg.ceo_grid_step)?;
        let adjusted = model.apply(&baseline.test, &test_records)?.to_prediction_set(seed);
        ceo = Some(
            model
                .table
                .classes
                .iter()
                .map(|f| CeoClassSummary {
                    class: f.class,
                    initial_objective: f.initial_objective,
                    objective: f.objective,
                    initial_tpr_range: f.initial_tpr_range,
                    tpr_range: f.tpr_range,
                })
                .collect(),
        );
        outcomes.push(outcome(Variant::Ceo, adjusted, &test_records, data, Vec::new())?);
    }
    Ok(SeedRun {
        seed,
        outcomes,
        ceo,
        modality,
    })
}

/// Runs all seeds (in parallel under [`Exec::Parallel`]) and aggregates.
pub fn simulate(exec: Exec, data: &Dataset, cfg: &SimulationConfig) -> Result<Simulation> {
    if cfg.seeds.is_empty() {
        return Err(invalid("no seeds given"));
    }
    let runs = par::try_map_range(exec, cfg.seeds.len(), |i| run_seed(data, cfg, cfg.seeds[i]))?;
    let summary = cfg
        .variants
        .iter()
        .map(|&v| {
            let col = |f: &dyn Fn(&VariantOutcome) -> f64| -> Option<SeedAggregate> {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.outcome(v)).map(f).collect();
                seed_aggregate(&vals).ok()
            };
            VariantSummary {
                variant: v,
                eoo_gap: col(&|o| o.gaps.eoo_gap),
                eo_gap: col(&|o| o.gaps.eo_gap),
                f1_macro: col(&|o| o.performance.f1_macro),
                tpr_deviation_sum: col(&|o| o.tpr_deviation_sum),
            }
        })
        .collect();
    Ok(Simulation {
        scenario: data.name.clone(),
        config: cfg.clone(),
        subgroups: data.subgroups.clone(),
        runs,
        summary,
    })
}
