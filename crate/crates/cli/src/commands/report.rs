use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use super::audit::AuditBundle;
use super::{usage, wants, Format};
use crate::manifest::Run;

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Audit bundle JSON written by `audit` or `simulate`; repeat for several.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "Fairness report")]
    pub title: String,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "md,svg")]
    pub format: Vec<Format>,
}

pub fn run(args: &ReportArgs, run: &mut Run) -> Result<()> {
    if wants(&args.format, Format::Json) || wants(&args.format, Format::Csv) {
        return Err(usage("report only renders md and svg"));
    }
    let mut bundles = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let bytes = run.input(path)?;
        let b: AuditBundle = serde_json::from_slice(&bytes)
            .map_err(fairscreen::Error::from)
            .with_context(|| format!("{} is not an audit bundle", path.display()))?;
        bundles.push(b);
    }
    let mut md = format!("# {}\n\n", args.title);
    for (i, b) in bundles.iter().enumerate() {
        md.push_str(&b.markdown());
        if wants(&args.format, Format::Svg) {
            md.push('\n');
            for (name, svg) in b.charts() {
                let file = format!("report_{:02}_{name}.svg", i + 1);
                run.write(&file, svg.as_bytes())?;
                md.push_str(&format!("![{} {name}]({file})\n", b.title));
            }
        }
        md.push('\n');
    }
    if wants(&args.format, Format::Md) {
        run.write("report.md", md.as_bytes())?;
    }
    Ok(())
}
