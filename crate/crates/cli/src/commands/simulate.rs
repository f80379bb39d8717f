use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use clap::Args;
use fairscreen::ingest::{write_attributes_csv, PredictionSet};
use fairscreen::toynet::experiment::{simulate, Simulation, SimulationConfig, Variant};
use fairscreen::toynet::report::ModalityReport;
use fairscreen::toynet::scenario::{synth_scenario, ScenarioConfig, Split, PRESETS};
use fairscreen::toynet::ModelKind;
use fairscreen::Exec;
use serde::Serialize;

use super::audit::{write_bundle, AuditBundle, AuditRun};
use super::{to_json, usage, wants, Format};
use crate::manifest::Run;
use crate::render::{mean_ci, table, Bar, BarChart};

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Preset name or path to a scenario JSON file.
    #[arg(long, default_value = "age-bias-v1")]
    pub scenario: String,
    /// Number of training seeds.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    /// First training seed; runs use `seed..seed + seeds`.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value = "agf")]
    pub model: ModelKind,
    /// Comma-separated subset of baseline, frequency, dynamic_tpr, adversarial, ceo.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    /// Adversary weight for the adversarial variant.
    #[arg(long, default_value_t = 0.05)]
    pub lambda: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Run seeds one after another instead of in parallel.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "json,csv,md,svg")]
    pub format: Vec<Format>,
}

fn load_scenario(run: &mut Run, spec: &str) -> Result<ScenarioConfig> {
    if let Some(cfg) = ScenarioConfig::preset(spec) {
        return Ok(cfg);
    }
    let path = Path::new(spec);
    if !path.exists() {
        return Err(usage(format!(
            "--scenario {spec:?} is neither a preset ({}) nor an existing file",
            PRESETS.join(", ")
        )));
    }
    let bytes = run.input(path)?;
    let cfg: ScenarioConfig = serde_json::from_slice(&bytes)
        .map_err(fairscreen::Error::from)
        .with_context(|| format!("parsing scenario {spec}"))?;
    Ok(cfg)
}

pub fn run(args: &SimulateArgs, run: &mut Run) -> Result<()> {
    if args.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let scenario = load_scenario(run, &args.scenario)?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    run.seeds(&seeds);
    let data = synth_scenario(&scenario)?;

    let mut cfg = SimulationConfig::new(args.model, seeds);
    if let Some(v) = &args.variants {
        cfg.variants = v.clone();
    }
    cfg.lambda = args.lambda;
    cfg.epochs = args.epochs;
    cfg.hidden = args.hidden;
    cfg.lr = args.lr;
    let exec = if args.sequential { Exec::Sequential } else { Exec::default() };
    let sim = simulate(exec, &data, &cfg)?;

    run.write("scenario.json", &to_json(&scenario)?)?;
    for split in Split::ALL {
        let mut csv = Vec::new();
        write_attributes_csv(&mut csv, &data.records(split))?;
        run.write(&format!("dataset/{}.csv", split.as_str()), &csv)?;
    }
    for &variant in &cfg.variants {
        let preds: Vec<PredictionSet> = sim
            .runs
            .iter()
            .filter_map(|r| r.outcome(variant).and_then(|o| o.predictions.clone()))
            .collect();
        let mut jsonl = Vec::new();
        fairscreen::ingest::write_predictions(&mut jsonl, &preds)?;
        run.write(&format!("predictions/{}.jsonl", variant.as_str()), &jsonl)?;

        let audits = sim
            .runs
            .iter()
            .filter_map(|r| {
                r.outcome(variant).map(|o| AuditRun {
                    seed: r.seed,
                    rates: o.rates.clone(),
                    gaps: o.gaps.clone(),
                    performance: o.performance.clone(),
                    tpr_deviation_sum: o.tpr_deviation_sum,
                })
            })
            .collect();
        let bundle = AuditBundle::new(format!("{} / {}", sim.scenario, variant.as_str()), data.attribute, audits);
        write_bundle(run, &bundle, &format!("audits/{}", variant.as_str()), &args.format)?;
    }

    if wants(&args.format, Format::Json) {
        run.write("simulation.json", &to_json(&sim)?)?;
    }
    if wants(&args.format, Format::Csv) {
        run.write("simulation.csv", &summary_csv(&sim)?)?;
    }
    if wants(&args.format, Format::Md) {
        run.write("simulation.md", markdown(&sim).as_bytes())?;
    }
    if wants(&args.format, Format::Svg) {
        run.write("simulation_gaps.svg", gap_chart(&sim).svg(None).as_bytes())?;
    }
    Ok(())
}

fn summary_csv(sim: &Simulation) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Row<'a> {
        seed: u64,
        variant: &'a str,
        eoo_gap: f64,
        eo_gap: f64,
        f1_macro: f64,
        log_loss: f64,
        tpr_deviation_sum: f64,
        worst_subgroup: &'a str,
        worst_subgroup_gap: f64,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &sim.runs {
        for o in &r.outcomes {
            w.serialize(Row {
                seed: r.seed,
                variant: o.variant.as_str(),
                eoo_gap: o.gaps.eoo_gap,
                eo_gap: o.gaps.eo_gap,
                f1_macro: o.performance.f1_macro,
                log_loss: o.performance.log_loss,
                tpr_deviation_sum: o.tpr_deviation_sum,
                worst_subgroup: &o.worst_subgroup,
                worst_subgroup_gap: o.worst_subgroup_gap,
            })?;
        }
    }
    Ok(w.into_inner()?)
}

fn gap_chart(sim: &Simulation) -> BarChart {
    let bar = |a: &Option<fairscreen::fairmetrics::SeedAggregate>, fallback: Option<f64>| {
        a.map(|a| Bar { value: a.mean, ci: Some(a.ci95_half_width) })
            .or(fallback.map(|value| Bar { value, ci: None }))
    };
    let single = |v: Variant, f: fn(&fairscreen::toynet::experiment::VariantOutcome) -> f64| {
        (sim.runs.len() == 1)
            .then(|| sim.runs[0].outcome(v).map(f))
            .flatten()
    };
    BarChart {
        title: format!("{}: subgroup gaps by variant", sim.scenario),
        y_label: "gap".into(),
        groups: sim.summary.iter().map(|s| s.variant.as_str().to_string()).collect(),
        series: vec!["eoo_gap".into(), "eo_gap".into()],
        values: sim
            .summary
            .iter()
            .map(|s| {
                vec![
                    bar(&s.eoo_gap, single(s.variant, |o| o.gaps.eoo_gap)),
                    bar(&s.eo_gap, single(s.variant, |o| o.gaps.eo_gap)),
                ]
            })
            .collect(),
        y_max: None,
    }
}

fn markdown(sim: &Simulation) -> String {
    let mut s = String::new();
    let seeds: Vec<String> = sim.config.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "# Simulation: {}\n", sim.scenario);
    let _ = writeln!(
        s,
        "Model `{}`, seeds {}, subgroups {}.\n",
        match sim.config.kind {
            ModelKind::Agf => "agf",
            ModelKind::Lwf => "lwf",
        },
        seeds.join(", "),
        sim.subgroups.join(", ")
    );

    let _ = writeln!(s, "## Summary over seeds (mean ± 95% CI)\n");
    let cell = |a: &Option<fairscreen::fairmetrics::SeedAggregate>| {
        a.map_or("-".to_string(), |a| mean_ci(a.mean, Some(a.ci95_half_width)))
    };
    let rows: Vec<Vec<String>> = sim
        .summary
        .iter()
        .map(|v| {
            vec![
                v.variant.as_str().to_string(),
                cell(&v.eoo_gap),
                cell(&v.eo_gap),
                cell(&v.f1_macro),
                cell(&v.tpr_deviation_sum),
            ]
        })
        .collect();
    s.push_str(&table(&["variant", "eoo_gap", "eo_gap", "macro F1", "TPR deviation sum"], &rows));

    let _ = writeln!(s, "\n## eoo_gap per seed\n");
    let variants: Vec<Variant> = sim.config.variants.clone();
    let mut header = vec!["seed"];
    header.extend(variants.iter().map(|v| v.as_str()));
    let rows: Vec<Vec<String>> = sim
        .runs
        .iter()
        .map(|r| {
            let mut row = vec![r.seed.to_string()];
            row.extend(
                variants
                    .iter()
                    .map(|&v| r.outcome(v).map_or("-".into(), |o| format!("{:.4}", o.gaps.eoo_gap))),
            );
            row
        })
        .collect();
    s.push_str(&table(&header, &rows));

    let versus = |name: &str, v: Variant, metric: fn(&fairscreen::toynet::experiment::VariantOutcome) -> f64| {
        let pairs: Vec<(f64, f64)> = sim
            .runs
            .iter()
            .filter_map(|r| Some((metric(r.outcome(Variant::Baseline)?), metric(r.outcome(v)?))))
            .collect();
        let better = pairs.iter().filter(|(b, m)| m < b).count();
        (!pairs.is_empty()).then(|| format!("- {} lowers {name} relative to baseline in {better} of {} seeds.", v.as_str(), pairs.len()))
    };
    let mut lines = Vec::new();
    for v in [Variant::Frequency, Variant::DynamicTpr, Variant::Adversarial] {
        lines.extend(versus("eoo_gap", v, |o| o.gaps.eoo_gap));
    }
    lines.extend(versus("the TPR deviation sum", Variant::Ceo, |o| o.tpr_deviation_sum));
    if !lines.is_empty() {
        let _ = writeln!(s, "\n## Mitigation versus baseline\n");
        for l in lines {
            let _ = writeln!(s, "{l}");
        }
    }

    let rows: Vec<Vec<String>> = sim
        .runs
        .iter()
        .filter_map(|r| r.outcome(Variant::Baseline).map(|o| (r.seed, o)))
        .map(|(seed, o)| vec![seed.to_string(), o.worst_subgroup.clone(), format!("{:.4}", o.worst_subgroup_gap)])
        .collect();
    if !rows.is_empty() {
        let _ = writeln!(s, "\n## Most disadvantaged subgroup (baseline)\n");
        s.push_str(&table(&["seed", "subgroup", "macro-TPR margin to next"], &rows));
    }

    let rows: Vec<Vec<String>> = sim
        .runs
        .iter()
        .flat_map(|r| r.ceo.iter().flatten().map(move |c| (r.seed, c)))
        .map(|(seed, c)| {
            vec![
                seed.to_string(),
                c.class.to_string(),
                format!("{:.4} → {:.4}", c.initial_objective, c.objective),
                format!("{:.4} → {:.4}", c.initial_tpr_range, c.tpr_range),
            ]
        })
        .collect();
    if !rows.is_empty() {
        let _ = writeln!(s, "\n## CEO threshold search on validation\n");
        s.push_str(&table(&["seed", "class", "objective", "TPR range"], &rows));
    }

    let _ = writeln!(s, "\n## Modality weights (baseline, test split)\n");
    let rows: Vec<Vec<String>> = sim
        .runs
        .iter()
        .map(|r| match &r.modality {
            ModalityReport::Agf(m) => vec![
                r.seed.to_string(),
                format!("α_L {:.4}, α_A {:.4}, var {:.5}", m.mean_alpha_linguistic, m.mean_alpha_acoustic, m.variance),
            ],
            ModalityReport::Lwf(m) => vec![r.seed.to_string(), format!("α {:.4}", m.alpha)],
        })
        .collect();
    s.push_str(&table(&["seed", "weights"], &rows));
    s
}
