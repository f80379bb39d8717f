use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use fairscreen::par;
use fairscreen::specaug::{apply_instance, compile_plan, read_wav, write_wav, AudioClip, Augmented, Band, Operator, OversamplePlan};
use fairscreen::Exec;
use serde::Serialize;

use super::{load_attributes, to_json};
use crate::manifest::Run;

#[derive(Debug, Clone, Args, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub attributes: PathBuf,
    /// Oversampling plan JSON.
    #[arg(long)]
    pub plan: PathBuf,
    /// Directory holding one `<subject_id>.wav` per source subject.
    #[arg(long)]
    pub audio_dir: PathBuf,
    /// Replaces the plan's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct Produced {
    index: usize,
    source: String,
    operator: Operator,
    seed: u64,
    output: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    offset_samples: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    band: Option<Band>,
}

fn op_name(op: Operator) -> &'static str {
    match op {
        Operator::TimeShift => "time_shift",
        Operator::FreqMask => "freq_mask",
        Operator::TimeMask => "time_mask",
    }
}

pub fn run(args: &AugmentArgs, run: &mut Run) -> Result<()> {
    let records = load_attributes(run, &args.attributes)?;
    let mut plan: OversamplePlan = serde_json::from_slice(&run.input(&args.plan)?)
        .map_err(fairscreen::Error::from)
        .with_context(|| format!("parsing {}", args.plan.display()))?;
    if let Some(seed) = args.seed {
        plan.seed = seed;
    }
    run.seeds(&[plan.seed]);
    let instances = compile_plan(&records, &plan)?;

    let mut clips: BTreeMap<String, AudioClip> = BTreeMap::new();
    for inst in &instances {
        if clips.contains_key(&inst.source) {
            continue;
        }
        let path = args.audio_dir.join(format!("{}.wav", inst.source));
        run.input(&path)?;
        clips.insert(inst.source.clone(), read_wav(&path, &inst.source)?);
    }

    let results = par::map(Exec::default(), &instances, |inst| apply_instance(&clips[&inst.source], inst));
    let dir = run.out_dir.join("augmented");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut produced = Vec::with_capacity(instances.len());
    for (inst, result) in instances.iter().zip(results) {
        let stem = format!("augmented/{:05}_{}_{}", inst.index, inst.source, op_name(inst.operator));
        let (output, offset_samples, band) = match result? {
            Augmented::Audio { clip, offset } => {
                let name = format!("{stem}.wav");
                write_wav(&run.out_dir.join(&name), &clip)?;
                run.adopt(&name)?;
                (name, Some(offset), None)
            }
            Augmented::Spectrogram { spec, band } => {
                let name = format!("{stem}.f32");
                spec.write(&run.out_dir.join(&name))?;
                run.adopt(&name)?;
                run.adopt(&format!("{name}.json"))?;
                (name, None, Some(band))
            }
        };
        produced.push(Produced {
            index: inst.index,
            source: inst.source.clone(),
            operator: inst.operator,
            seed: inst.seed,
            output,
            offset_samples,
            band,
        });
    }
    run.write("augment_manifest.json", &to_json(&produced)?)?;
    Ok(())
}
