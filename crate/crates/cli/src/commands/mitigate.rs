use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Subcommand};
use fairscreen::ceo::CeoModel;
use fairscreen::ingest::write_predictions;
use fairscreen::reweight::frequency_weights;
use fairscreen::{Class, Exec, Field};
use serde::Serialize;

use super::{load_attributes, load_predictions, to_json};
use crate::manifest::Run;

#[derive(Debug, Clone, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigateCommand {
    /// Frequency weights that make the attribute independent of the label.
    Reweight(ReweightArgs),
    /// Calibrated equalized-odds thresholds fit on validation predictions.
    Ceo(CeoArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReweightArgs {
    /// Attribute table of the training subjects.
    #[arg(long)]
    pub attributes: PathBuf,
    #[arg(long)]
    pub attribute: Field,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CeoArgs {
    /// Validation predictions used to fit calibrators and thresholds.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Predictions to adjust; one run per seed present in the validation file.
    #[arg(long)]
    pub test_predictions: PathBuf,
    #[arg(long)]
    pub attributes: PathBuf,
    #[arg(long)]
    pub attribute: Field,
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
}

pub fn run(cmd: &MitigateCommand, run: &mut Run) -> Result<()> {
    match cmd {
        MitigateCommand::Reweight(a) => reweight(a, run),
        MitigateCommand::Ceo(a) => ceo(a, run),
    }
}

#[derive(Serialize)]
struct CellWeight {
    subgroup: String,
    class: Class,
    count: usize,
    weight: f64,
}

fn reweight(args: &ReweightArgs, run: &mut Run) -> Result<()> {
    let records = load_attributes(run, &args.attributes)?;
    let w = frequency_weights(&records, args.attribute)?;
    let mut cells: Vec<CellWeight> = Vec::new();
    for r in &records {
        let sub = r.value_of(args.attribute).unwrap_or("missing");
        match cells.iter_mut().find(|c| c.subgroup == sub && c.class == r.label) {
            Some(c) => c.count += 1,
            None => cells.push(CellWeight {
                subgroup: sub.to_string(),
                class: r.label,
                count: 1,
                weight: w.get(&r.subject_id).unwrap_or(f64::NAN),
            }),
        }
    }
    let order = args.attribute.values();
    cells.sort_by_key(|c| (order.iter().position(|v| *v == c.subgroup), c.class));
    let mut jsonl = Vec::new();
    w.write_jsonl(&mut jsonl)?;
    run.write("weights.jsonl", &jsonl)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        attribute: Field,
        subjects: usize,
        mean_weight: f64,
        cells: &'a [CellWeight],
    }
    let summary = Summary {
        attribute: args.attribute,
        subjects: records.len(),
        mean_weight: w.mean(),
        cells: &cells,
    };
    run.write("reweight.json", &to_json(&summary)?)?;
    Ok(())
}

fn ceo(args: &CeoArgs, run: &mut Run) -> Result<()> {
    let records = load_attributes(run, &args.attributes)?;
    let val = load_predictions(run, &args.predictions)?;
    let test = load_predictions(run, &args.test_predictions)?;
    run.seeds(&val.iter().map(|s| s.seed).collect::<Vec<_>>());

    #[derive(Serialize)]
    struct Fitted {
        seed: u64,
        model: CeoModel,
    }
    let mut fitted = Vec::new();
    let mut adjusted = Vec::new();
    for v in &val {
        let t = test.iter().find(|t| t.seed == v.seed).ok_or_else(|| {
            fairscreen::Error::InvalidInput(format!(
                "validation seed {} has no matching run in {}",
                v.seed,
                args.test_predictions.display()
            ))
        })?;
        let model = CeoModel::fit_with(Exec::default(), v, &records, args.attribute, args.grid_step)?;
        adjusted.push(model.apply(t, &records)?.to_prediction_set(t.seed));
        fitted.push(Fitted { seed: v.seed, model });
    }
    let mut jsonl = Vec::new();
    write_predictions(&mut jsonl, &adjusted)?;
    run.write("ceo_predictions.jsonl", &jsonl)?;
    run.write("ceo_thresholds.json", &to_json(&fitted)?)?;
    Ok(())
}
