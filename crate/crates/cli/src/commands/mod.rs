pub mod audit;
pub mod augment;
pub mod mitigate;
pub mod pair;
pub mod report;
pub mod simulate;

use std::fmt;
use std::io::Cursor;
use std::path::Path;

use anyhow::Result;
use clap::ValueEnum;
use fairscreen::ingest::{read_attributes_csv, read_attributes_jsonl, read_predictions, AttributeFormat, PredictionSet};
use fairscreen::SubjectRecord;
use serde::{Deserialize, Serialize};

use crate::manifest::Run;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
    Md,
    Svg,
}

/// Bad flag combinations found after argument parsing; exits with the usage code.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn wants(formats: &[Format], f: Format) -> bool {
    formats.contains(&f)
}

pub fn load_attributes(run: &mut Run, path: &Path) -> Result<Vec<SubjectRecord>> {
    let bytes = run.input(path)?;
    let name = path.display().to_string();
    Ok(match AttributeFormat::from_path(path) {
        AttributeFormat::Csv => read_attributes_csv(Cursor::new(bytes), &name)?,
        AttributeFormat::Jsonl => read_attributes_jsonl(Cursor::new(bytes), &name)?,
    })
}

pub fn load_predictions(run: &mut Run, path: &Path) -> Result<Vec<PredictionSet>> {
    let bytes = run.input(path)?;
    let sets = read_predictions(Cursor::new(bytes), &path.display().to_string())?;
    if sets.is_empty() {
        return Err(fairscreen::Error::InvalidInput(format!("{} has no predictions", path.display())).into());
    }
    Ok(sets)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}
