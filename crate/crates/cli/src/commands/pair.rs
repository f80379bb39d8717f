use std::io::Cursor;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, ValueEnum};
use fairscreen::pairing::{conversion_plan, plan_pairs, read_features, read_utterances, Normalization};
use fairscreen::Exec;
use serde::Serialize;

use super::to_json;
use crate::manifest::Run;

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Zscore,
    Minmax,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PairArgs {
    /// Speaker feature CSV.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long, value_enum, default_value = "zscore")]
    pub normalization: Norm,
    /// Optional `subject_id,utterance` CSV; adds conversion directives to the plan.
    #[arg(long)]
    pub utterances: Option<PathBuf>,
}

pub fn run(args: &PairArgs, run: &mut Run) -> Result<()> {
    let bytes = run.input(&args.features)?;
    let feats = read_features(Cursor::new(bytes), &args.features.display().to_string())?;
    let how = match args.normalization {
        Norm::Zscore => Normalization::ZScore,
        Norm::Minmax => Normalization::MinMax,
    };
    let mut plan = plan_pairs(Exec::default(), &feats, how)?;
    if let Some(path) = &args.utterances {
        let utts = read_utterances(Cursor::new(run.input(path)?))?;
        plan.directives = conversion_plan(&plan, &utts)?;
    }
    run.write("pairs.json", &to_json(&plan)?)?;
    Ok(())
}
