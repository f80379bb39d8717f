//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so every criterion reports a PASS/FAIL line even when an earlier one fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use fairscreen::ceo::{pav, CeoModel};
use fairscreen::fairmetrics::{gap_report, macro_average, subgroup_rates, RateTable};
use fairscreen::ingest::PredictionSet;
use fairscreen::pairing::max_weight_matching;
use fairscreen::reweight::{frequency_cell_weights, frequency_weights};
use fairscreen::specaug::{
    default_cutoff, freq_mask, log_mel, low_pass, mask_value, mel_points, time_mask, time_shift, AudioClip,
    MEL_CHANNELS,
};
use fairscreen::toynet::experiment::{simulate, SimulationConfig, Variant};
use fairscreen::toynet::gradcheck::finite_diff_check;
use fairscreen::toynet::objective::{adversary_encoder_gradient, batch_gradients, AdversaryConfig};
use fairscreen::toynet::scenario::{synth_scenario, Dataset, Sample, ScenarioConfig, Split};
use fairscreen::toynet::train::{init_params, train, TrainConfig};
use fairscreen::toynet::{ModelKind, ParamSet};
use fairscreen::{AgeGroup, Class, Exec, Field, Gender, Language, SubjectRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---------------------------------------------------------------------------
// Shared helpers

fn record(id: &str, group: AgeGroup, label: Class) -> SubjectRecord {
    SubjectRecord {
        subject_id: id.to_string(),
        gender: Gender::Female,
        age_years: Some(group.representative_age()),
        age_group: group,
        education: None,
        language: Language::English,
        label,
    }
}

fn class_of(c: char) -> Class {
    match c {
        'c' => Class::Control,
        'm' => Class::Mci,
        'a' => Class::Ad,
        _ => panic!("bad class token {c}"),
    }
}

fn group_of(c: char) -> AgeGroup {
    match c {
        'y' => AgeGroup::A46To65,
        'm' => AgeGroup::A66To80,
        'o' => AgeGroup::A80Plus,
        _ => panic!("bad group token {c}"),
    }
}

fn one_hot_ish(c: Class) -> [f64; 3] {
    let mut p = [0.2; 3];
    p[c.index()] = 0.6;
    p
}

// ---------------------------------------------------------------------------
// 1. Fairness metrics against hand-countable fixtures

/// Each token is `group:label>prediction`. Goldens are `(eoo_gap, eo_gap)`
/// worked out by hand as fractions.
const FIXTURES: [(&str, f64, f64); 10] = [
    ("y:c>c y:c>c y:m>m y:m>c y:a>a o:c>c o:c>m o:m>m o:a>m o:a>a", 1.0 / 6.0, 2.0 / 9.0),
    ("y:c>c y:m>m y:a>a o:c>c o:m>m o:a>a m:c>c m:m>m m:a>a", 0.0, 0.0),
    ("y:c>m y:m>a y:a>c o:c>a o:m>c o:a>m", 0.0, 0.0),
    ("y:c>c y:m>m y:a>a y:a>m o:c>c o:c>a o:m>m o:m>c", 1.0 / 3.0, 17.0 / 36.0),
    ("y:c>c y:c>c y:c>m m:m>m m:a>a m:c>c m:a>m m:m>a", 0.0, 1.0 / 18.0),
    (
        "y:c>c y:c>m y:m>m y:m>m y:a>a y:a>c m:c>c m:c>c m:m>a m:m>m m:a>a m:a>a o:c>m o:c>c o:m>c o:m>a o:a>m o:a>a",
        0.5,
        0.75,
    ),
    ("y:c>c y:m>c y:a>c o:c>c o:m>c o:a>c m:c>c m:a>c", 1.0 / 6.0, 1.0 / 6.0),
    (
        "y:c>c y:c>c y:c>c y:c>m y:c>c y:m>m y:m>m y:m>a y:a>a y:a>a y:a>m y:a>a o:c>c o:c>a o:m>m o:m>c o:a>a o:a>a o:a>c o:c>m",
        43.0 / 180.0,
        409.0 / 1080.0,
    ),
    ("y:c>c y:m>a y:a>a m:c>m m:m>m m:a>a o:c>c o:m>m o:a>c", 0.0, 0.0),
    ("y:a>a y:a>a y:a>m m:c>c m:m>m m:a>c m:a>a o:m>m o:m>c o:c>a o:a>a o:c>c", 1.0 / 6.0, 0.25),
];

fn parse_fixture(spec: &str) -> (Vec<SubjectRecord>, PredictionSet, Vec<(AgeGroup, Class, Class)>) {
    let mut records = Vec::new();
    let mut preds = PredictionSet::new(0);
    let mut triples = Vec::new();
    for (i, tok) in spec.split_whitespace().enumerate() {
        let ch: Vec<char> = tok.chars().collect();
        let (g, l, p) = (group_of(ch[0]), class_of(ch[2]), class_of(ch[4]));
        let id = format!("s{i:02}");
        records.push(record(&id, g, l));
        preds.insert(id, &one_hot_ish(p)).unwrap();
        triples.push((g, l, p));
    }
    (records, preds, triples)
}

fn crit_metrics() -> Check {
    let tol = 1e-12;
    for (f, (spec, eoo, eo)) in FIXTURES.iter().enumerate() {
        let (records, preds, triples) = parse_fixture(spec);
        ensure!(triples.len() <= 20, "fixture {f} too large");
        let table = subgroup_rates(&preds, &records, Field::Age).map_err(|e| e.to_string())?;

        // Confusion counts by direct tally.
        let groups: Vec<AgeGroup> = AgeGroup::ALL
            .iter()
            .copied()
            .filter(|g| triples.iter().any(|t| t.0 == *g))
            .collect();
        ensure!(
            table.subgroups == groups.iter().map(|g| g.as_str().to_string()).collect::<Vec<_>>(),
            "fixture {f}: subgroups {:?}",
            table.subgroups
        );
        let mut macro_t: Vec<Option<f64>> = Vec::new();
        let mut macro_f: Vec<Option<f64>> = Vec::new();
        for g in &groups {
            let (mut ts, mut fs) = (Vec::new(), Vec::new());
            for &c in Class::ALL {
                let mut k = [0u64; 4];
                for &(tg, l, p) in &triples {
                    if tg != *g {
                        continue;
                    }
                    let slot = match (l == c, p == c) {
                        (true, true) => 0,
                        (true, false) => 1,
                        (false, true) => 2,
                        (false, false) => 3,
                    };
                    k[slot] += 1;
                }
                let cell = table.cell(c, g.as_str()).ok_or(format!("fixture {f}: missing cell"))?;
                ensure!(
                    [cell.tp, cell.fn_, cell.fp, cell.tn] == k,
                    "fixture {f} {c}/{g:?}: counts {:?} vs {k:?}",
                    [cell.tp, cell.fn_, cell.fp, cell.tn]
                );
                let tpr = (k[0] + k[1] > 0).then(|| k[0] as f64 / (k[0] + k[1]) as f64);
                let fpr = (k[2] + k[3] > 0).then(|| k[2] as f64 / (k[2] + k[3]) as f64);
                ensure!(cell.tpr == tpr && cell.fpr == fpr, "fixture {f} {c}/{g:?}: rates");
                ts.extend(tpr);
                fs.extend(fpr);
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            macro_t.push(mean(&ts));
            macro_f.push(mean(&fs));
        }
        let macros = macro_average(&table).map_err(|e| e.to_string())?;
        for (m, (t, fp)) in macros.iter().zip(macro_t.iter().zip(&macro_f)) {
            let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() <= tol,
                (None, None) => true,
                _ => false,
            };
            ensure!(close(m.macro_tpr, *t) && close(m.macro_fpr, *fp), "fixture {f}: macro for {}", m.subgroup);
        }
        let gaps = gap_report(&table).map_err(|e| e.to_string())?;
        ensure!((gaps.eoo_gap - eoo).abs() <= tol, "fixture {f}: eoo_gap {} vs {eoo}", gaps.eoo_gap);
        ensure!((gaps.eo_gap - eo).abs() <= tol, "fixture {f}: eo_gap {} vs {eo}", gaps.eo_gap);
    }
    Ok(format!("{} fixtures", FIXTURES.len()))
}

// ---------------------------------------------------------------------------
// 2. Matching against exhaustive search

/// Best total weight over all matchings, by dynamic programming over vertex
/// subsets. Also returns one optimal pair list.
fn exhaustive<W: Copy + PartialOrd + std::ops::Add<Output = W>>(w: &[Vec<W>], zero: W) -> (W, Vec<(usize, usize)>) {
    let n = w.len();
    let full = 1usize << n;
    let mut best: Vec<Option<(W, Option<(usize, usize)>)>> = vec![None; full];
    best[0] = Some((zero, None));
    for mask in 1..full {
        let i = mask.trailing_zeros() as usize;
        let rest = mask & !(1 << i);
        let mut cand = (best[rest].unwrap().0, None);
        for j in i + 1..n {
            if rest & (1 << j) != 0 {
                let v = best[rest & !(1 << j)].unwrap().0 + w[i][j];
                if v > cand.0 {
                    cand = (v, Some((i, j)));
                }
            }
        }
        best[mask] = Some(cand);
    }
    let mut pairs = Vec::new();
    let mut mask = full - 1;
    while mask != 0 {
        let i = mask.trailing_zeros() as usize;
        match best[mask].unwrap().1 {
            Some((a, b)) => {
                pairs.push((a, b));
                mask &= !(1 << a) & !(1 << b);
            }
            None => mask &= !(1 << i),
        }
    }
    pairs.sort_unstable();
    (best[full - 1].unwrap().0, pairs)
}

fn crit_matching() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut count = 0;
    for n in [2usize, 4, 6, 8, 10] {
        for inst in 0..40 {
            let integer = inst % 2 == 0;
            let mut d = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in i + 1..n {
                    let v = if integer { rng.gen_range(0..=20) as f64 } else { rng.gen_range(0.0..2.0) };
                    d[i][j] = v;
                    d[j][i] = v;
                }
            }
            let m = max_weight_matching(&d).map_err(|e| e.to_string())?;
            if integer {
                let w: Vec<Vec<i64>> = d.iter().map(|r| r.iter().map(|&v| v as i64).collect()).collect();
                let (opt, _) = exhaustive(&w, 0i64);
                ensure!(m.total_weight == opt as f64, "n={n} #{inst}: {} vs {opt}", m.total_weight);
            } else {
                let (opt, pairs) = exhaustive(&d, 0.0);
                let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.0, p.1)).collect();
                let resum: f64 = pairs.iter().map(|&(a, b)| d[a][b]).sum();
                ensure!(
                    got == pairs && m.total_weight == resum,
                    "n={n} #{inst}: {got:?} ({}) vs {pairs:?} ({opt})",
                    m.total_weight
                );
            }
            count += 1;
        }
    }
    Ok(format!("{count} instances"))
}

// ---------------------------------------------------------------------------
// 3. PAV against brute-force monotone least squares

/// Minimizes weighted squared error over every split of the sequence into
/// consecutive blocks whose means are non-decreasing.
fn brute_isotonic(y: &[f64], w: &[f64]) -> Vec<f64> {
    let n = y.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cuts in 0u32..(1 << (n - 1)) {
        let mut fit = vec![0.0; n];
        let mut start = 0;
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for end in 1..=n {
            if end == n || cuts & (1 << (end - 1)) != 0 {
                let sw: f64 = w[start..end].iter().sum();
                let m = (start..end).map(|i| w[i] * y[i]).sum::<f64>() / sw;
                if m < prev {
                    ok = false;
                    break;
                }
                fit[start..end].fill(m);
                prev = m;
                start = end;
            }
        }
        if !ok {
            continue;
        }
        let sse: f64 = (0..n).map(|i| w[i] * (y[i] - fit[i]).powi(2)).sum();
        if best.as_ref().map_or(true, |b| sse < b.0) {
            best = Some((sse, fit));
        }
    }
    best.unwrap().1
}

fn crit_isotonic() -> Check {
    let mags = [3.0, 1.0, 4.0, 1.5, 5.0, 2.5];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for pattern in 0u32..64 {
        let sign = |i: usize| if pattern & (1 << i) != 0 { 1.0 } else { -1.0 };
        let values: Vec<f64> = (0..6).map(|i| sign(i) * mags[i]).collect();
        let walk: Vec<f64> = values
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let random_w: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..3.0)).collect();
        for y in [&values, &walk] {
            for w in [&vec![1.0; 6], &random_w] {
                let got = pav(y, w);
                let want = brute_isotonic(y, w);
                let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
                ensure!(err <= 1e-9, "pattern {pattern:06b}: {got:?} vs {want:?}");
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} inputs, max abs error {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 4. CEO never worsens the validation objective

/// Exact rational, enough for rates with small denominators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Q(i128, i128);

impl Q {
    fn new(n: i128, d: i128) -> Q {
        fn gcd(a: i128, b: i128) -> i128 {
            if b == 0 {
                a.abs()
            } else {
                gcd(b, a % b)
            }
        }
        let g = gcd(n, d).max(1);
        let s = if d < 0 { -1 } else { 1 };
        Q(s * n / g, s * d / g)
    }
    fn add(self, o: Q) -> Q {
        Q::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn sub(self, o: Q) -> Q {
        Q::new(self.0 * o.1 - o.0 * self.1, self.1 * o.1)
    }
    fn abs(self) -> Q {
        Q(self.0.abs(), self.1)
    }
    fn le(self, o: Q) -> bool {
        self.0 * o.1 <= o.0 * self.1
    }
    fn f(self) -> f64 {
        self.0 as f64 / self.1 as f64
    }
}

struct ClassCheck {
    objective: (Q, Q),
    range: (Q, Q),
}

/// Recomputes, per class, the equalized-odds deviation and TPR range at 0.5
/// thresholds and at the fitted ones, from calibrated validation scores.
fn ceo_oracle(model: &CeoModel, preds: &PredictionSet, records: &[SubjectRecord], attr: Field) -> Vec<ClassCheck> {
    let index: BTreeMap<&str, &SubjectRecord> = records.iter().map(|r| (r.subject_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for &class in Class::ALL {
        let c = class.index();
        let eval = |fitted: bool| -> (Q, Q) {
            let mut rates = Vec::new();
            for (sub, cals) in &model.calibrators {
                let t = if fitted { model.table.thresholds[sub][c] } else { 0.5 };
                let (mut tp, mut pos, mut fp, mut neg) = (0, 0, 0, 0);
                for (id, p) in &preds.entries {
                    let r = index[id.as_str()];
                    if r.value_of(attr) != Some(sub.as_str()) {
                        continue;
                    }
                    let hit = cals[c].eval(p[c]) >= t;
                    if r.label == class {
                        pos += 1;
                        tp += hit as i128;
                    } else {
                        neg += 1;
                        fp += hit as i128;
                    }
                }
                if pos > 0 && neg > 0 {
                    rates.push((Q::new(tp, pos), Q::new(fp, neg)));
                }
            }
            if rates.is_empty() {
                return (Q(0, 1), Q(0, 1));
            }
            let n = rates.len() as i128;
            let mt = rates.iter().fold(Q(0, 1), |a, r| a.add(r.0));
            let mf = rates.iter().fold(Q(0, 1), |a, r| a.add(r.1));
            let (mt, mf) = (Q::new(mt.0, mt.1 * n), Q::new(mf.0, mf.1 * n));
            let obj = rates
                .iter()
                .fold(Q(0, 1), |a, r| a.add(r.0.sub(mt).abs()).add(r.1.sub(mf).abs()));
            let hi = rates.iter().map(|r| r.0).fold(rates[0].0, |a, b| if a.le(b) { b } else { a });
            let lo = rates.iter().map(|r| r.0).fold(rates[0].0, |a, b| if a.le(b) { a } else { b });
            (obj, hi.sub(lo))
        };
        let (o0, r0) = eval(false);
        let (o1, r1) = eval(true);
        out.push(ClassCheck {
            objective: (o0, o1),
            range: (r0, r1),
        });
    }
    out
}

/// Validation predictions whose quality depends on the subgroup.
fn ceo_fixture(seed: u64) -> (Vec<SubjectRecord>, PredictionSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut preds = PredictionSet::new(seed);
    for (gi, &g) in AgeGroup::ALL.iter().enumerate() {
        let skill = [2.0, 1.0, 0.3][gi] + rng.gen_range(-0.2..0.2);
        for i in 0..rng.gen_range(30..60) {
            let label = Class::ALL[rng.gen_range(0..3)];
            let logits: Vec<f64> = (0..3)
                .map(|c| rng.gen_range(-1.0..1.0) + if c == label.index() { skill } else { 0.0 })
                .collect();
            let z: f64 = logits.iter().map(|v| v.exp()).sum();
            let p: Vec<f64> = logits.iter().map(|v| v.exp() / z).collect();
            let id = format!("{}-{i:03}", g.as_str());
            records.push(record(&id, g, label));
            preds.insert(id, &p).unwrap();
        }
    }
    (records, preds)
}

fn check_ceo(tag: &str, model: &CeoModel, preds: &PredictionSet, records: &[SubjectRecord]) -> Result<(), String> {
    let checks = ceo_oracle(model, preds, records, Field::Age);
    for (fit, chk) in model.table.classes.iter().zip(&checks) {
        let (o0, o1) = chk.objective;
        let (r0, r1) = chk.range;
        ensure!(o1.le(o0), "{tag} {}: objective {} > {}", fit.class, o1.f(), o0.f());
        ensure!(r1.le(r0), "{tag} {}: TPR range {} > {}", fit.class, r1.f(), r0.f());
        ensure!(
            (fit.initial_objective - o0.f()).abs() < 1e-12 && (fit.objective - o1.f()).abs() < 1e-12,
            "{tag} {}: reported objectives disagree with recomputation",
            fit.class
        );
    }
    Ok(())
}

fn crit_ceo() -> Check {
    for seed in 0..10 {
        let (records, preds) = ceo_fixture(seed);
        let model = CeoModel::fit(&preds, &records, Field::Age, 0.01).map_err(|e| e.to_string())?;
        check_ceo(&format!("fixture {seed}"), &model, &preds, &records)?;
    }
    let data = reference_scenario();
    let val_records = data.records(Split::Val);
    let mut improved = 0;
    for seed in 1..=5 {
        let out = train(&data, &TrainConfig::new(ModelKind::Agf, seed)).map_err(|e| e.to_string())?;
        let model = CeoModel::fit(&out.val, &val_records, data.attribute, 0.01).map_err(|e| e.to_string())?;
        check_ceo(&format!("scenario seed {seed}"), &model, &out.val, &val_records)?;
        improved += model.table.classes.iter().filter(|c| c.objective < c.initial_objective).count();
    }
    Ok(format!("10 fixtures + 5 scenario seeds; {improved}/15 scenario classes strictly improved"))
}

// ---------------------------------------------------------------------------
// 5-6. Gradients

fn small_scenario(seed: u64) -> Dataset {
    let mut cfg = ScenarioConfig::preset("age-bias-v1").unwrap();
    for c in &mut cfg.cells {
        c.n_train = 3;
        c.n_val = 2;
        c.n_test = 2;
    }
    cfg.seed = seed;
    synth_scenario(&cfg).unwrap()
}

fn random_params(kind: ModelKind, data: &Dataset, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut cfg = TrainConfig::new(kind, rng.gen());
    cfg.hidden = 16;
    cfg.adversary = Some(AdversaryConfig::default());
    let mut p = init_params(data, &cfg).unwrap();
    for t in &mut p.tensors {
        let scale = if t.cols > 1 { (3.0 / t.cols as f64).sqrt() } else { 0.5 };
        for v in &mut t.data {
            *v = scale * rng.gen_range(-1.0..1.0);
        }
    }
    p
}

fn batch<'a>(data: &'a Dataset, rng: &mut ChaCha8Rng) -> Vec<&'a Sample> {
    (0..4).map(|_| &data.train[rng.gen_range(0..data.train.len())]).collect()
}

fn crit_gradients() -> Check {
    let data = small_scenario(21);
    let mut rng = ChaCha8Rng::seed_from_u64(5150);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for kind in [ModelKind::Agf, ModelKind::Lwf] {
        for draw in 0..20 {
            let p = random_params(kind, &data, &mut rng);
            let b = batch(&data, &mut rng);
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
            let lambda = [0.05, 0.3][draw % 2];
            let r = finite_diff_check(&p, &b, &w, lambda, 1e-5, None, draw as u64).map_err(|e| e.to_string())?;
            ensure!(r.checked == p.len(), "{kind:?} draw {draw}: only {} coordinates", r.checked);
            ensure!(r.max_rel_error < 1e-4, "{kind:?} draw {draw}: {:?}", r.worst);
            worst = worst.max(r.max_rel_error);
            coords += r.checked;
        }
    }
    Ok(format!("40 draws, {coords} coordinates, max rel error {worst:.2e}"))
}

fn crit_grl() -> Check {
    let data = small_scenario(22);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut compared = 0;
    for kind in [ModelKind::Agf, ModelKind::Lwf] {
        let p = random_params(kind, &data, &mut rng);
        let b = batch(&data, &mut rng);
        let plain = adversary_encoder_gradient(&p, &b).map_err(|e| e.to_string())?;
        for lambda in [0.0, 0.05, 0.3] {
            let out = batch_gradients(&p, &b, &[1.0; 4], lambda).map_err(|e| e.to_string())?;
            let rev = out.reversed_encoder.ok_or("no reversed gradient")?;
            for (r, g) in rev.tensors.iter().zip(&plain.tensors) {
                if !r.role.is_encoder() {
                    continue;
                }
                for (x, y) in r.data.iter().zip(&g.data) {
                    let want = -lambda * y;
                    ensure!(x.to_bits() == want.to_bits(), "{kind:?} {} at lambda {lambda}: {x} vs {want}", r.name);
                    compared += 1;
                }
            }
        }
    }
    Ok(format!("{compared} encoder coordinates bitwise equal"))
}

// ---------------------------------------------------------------------------
// 7. Mitigation on the biased scenario

fn reference_scenario() -> Dataset {
    synth_scenario(&ScenarioConfig::preset("age-bias-v1").unwrap()).unwrap()
}

fn deviation_sum(t: &RateTable) -> f64 {
    let mut total = 0.0;
    for &c in Class::ALL {
        let v: Vec<f64> = t.cells.iter().filter(|x| x.class == c).filter_map(|x| x.tpr).collect();
        if v.is_empty() {
            continue;
        }
        let m = v.iter().sum::<f64>() / v.len() as f64;
        total += v.iter().map(|x| (x - m).abs()).sum::<f64>();
    }
    total
}

fn crit_efficacy() -> Check {
    let data = reference_scenario();
    let mut cfg = SimulationConfig::new(ModelKind::Agf, (1..=5).collect());
    cfg.variants = vec![Variant::Baseline, Variant::Frequency, Variant::Ceo];
    let sim = simulate(Exec::default(), &data, &cfg).map_err(|e| e.to_string())?;
    let biased = AgeGroup::A80Plus.as_str();
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut detail = Vec::new();
    for run in &sim.runs {
        let base = run.outcome(Variant::Baseline).unwrap();
        let freq = run.outcome(Variant::Frequency).unwrap();
        let ceo = run.outcome(Variant::Ceo).unwrap();
        let macros = &base.gaps.macro_by_subgroup;
        let own = macros.iter().find(|m| m.subgroup == biased).and_then(|m| m.macro_tpr).ok_or("no biased subgroup")?;
        let gap = macros
            .iter()
            .filter(|m| m.subgroup != biased)
            .filter_map(|m| m.macro_tpr)
            .map(|t| t - own)
            .fold(f64::INFINITY, f64::min);
        let (d0, d1) = (deviation_sum(&base.rates), deviation_sum(&ceo.rates));
        ensure!(
            (d0 - base.tpr_deviation_sum).abs() < 1e-12 && (d1 - ceo.tpr_deviation_sum).abs() < 1e-12,
            "deviation sum disagrees with recomputation"
        );
        a += (gap > 0.15) as usize;
        b += (freq.gaps.eoo_gap < base.gaps.eoo_gap) as usize;
        c += (d1 < d0) as usize;
        detail.push(format!(
            "seed {}: gap {gap:.3}, eoo {:.3}->{:.3}, dev {d0:.3}->{d1:.3}",
            run.seed, base.gaps.eoo_gap, freq.gaps.eoo_gap
        ));
    }
    let summary = format!("(a) {a}/5 (b) {b}/5 (c) {c}/5; {}", detail.join("; "));
    ensure!(a >= 4 && b >= 4 && c == 5, "{summary}");
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. Frequency-weight identity

fn crit_reweight() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for t in 0..100 {
        let rows = rng.gen_range(2..=5);
        let cols = rng.gen_range(2..=4);
        let counts: Vec<Vec<u64>> = (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(1..=60)).collect()).collect();
        let w = frequency_cell_weights(&counts);
        let n: u64 = counts.iter().flatten().sum();
        let mut mass = 0.0;
        for a in 0..rows {
            for y in 0..cols {
                let n_a: u64 = counts[a].iter().sum();
                let n_y: u64 = counts.iter().map(|r| r[y]).sum();
                let joint = counts[a][y] as f64 * w[a][y].unwrap() / n as f64;
                let product = (n_a as f64 / n as f64) * (n_y as f64 / n as f64);
                worst = worst.max((joint - product).abs());
                ensure!((joint - product).abs() <= 1e-9, "table {t} cell ({a},{y}): {joint} vs {product}");
                mass += joint;
            }
        }
        ensure!((mass - 1.0).abs() <= 1e-9, "table {t}: mean weight {mass}");
        if rows == 3 && cols == 3 {
            // Same table through per-subject weights.
            let mut records = Vec::new();
            for (a, row) in counts.iter().enumerate() {
                for (y, &k) in row.iter().enumerate() {
                    for i in 0..k {
                        records.push(record(&format!("{t}-{a}-{y}-{i}"), AgeGroup::ALL[a], Class::ALL[y]));
                    }
                }
            }
            let wv = frequency_weights(&records, Field::Age).map_err(|e| e.to_string())?;
            ensure!((wv.mean() - 1.0).abs() <= 1e-9, "table {t}: subject mean weight {}", wv.mean());
        }
    }
    Ok(format!("100 tables, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 9. SpecAugment contracts

fn noise_clip(rng: &mut ChaCha8Rng, sr: u32, n: usize) -> AudioClip {
    AudioClip::new("n", sr, (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
}

fn crit_specaug() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let clip = noise_clip(&mut rng, 16_000, 48_000);
    let spec = log_mel(&clip).map_err(|e| e.to_string())?;
    let (ch, frames) = (spec.channels(), spec.frames());
    ensure!(spec.values.iter().all(|&v| v != mask_value()), "noise spectrogram already at the floor");
    let mut seen_f = [false; 61];
    let mut seen_t = [false; 61];
    let mut mut_sorted = clip.samples.clone();
    mut_sorted.sort_unstable_by(f64::total_cmp);
    let (mut pos, mut neg) = (0, 0);
    for draw in 0..1000u64 {
        let mut r = ChaCha8Rng::seed_from_u64(draw);
        let (m, band) = freq_mask(&spec, &mut r).map_err(|e| e.to_string())?;
        ensure!((1..=60).contains(&band.width) && band.start + band.width <= MEL_CHANNELS, "freq band {band:?}");
        seen_f[band.width] = true;
        let changed: Vec<usize> = (0..m.values.len()).filter(|&i| m.values[i] != spec.values[i]).collect();
        ensure!(changed.len() == band.width * frames, "freq mask changed {} entries", changed.len());
        ensure!(changed.iter().all(|&i| m.values[i] == mask_value()), "freq mask value");

        let (m, band) = time_mask(&spec, &mut r).map_err(|e| e.to_string())?;
        ensure!((1..=60).contains(&band.width) && band.start + band.width <= frames, "time band {band:?}");
        seen_t[band.width] = true;
        let changed = (0..m.values.len()).filter(|&i| m.values[i] != spec.values[i]).count();
        ensure!(changed == band.width * ch, "time mask changed {changed} entries");
        ensure!(m.values.iter().filter(|&&v| v == mask_value()).count() == changed, "time mask value");

        let (shifted, offset) = time_shift(&clip, &mut r);
        let mag = offset.unsigned_abs() as usize;
        ensure!((16_000..=24_000).contains(&mag), "shift {offset} outside [1 s, half duration]");
        if offset > 0 {
            pos += 1;
        } else {
            neg += 1;
        }
        let mut s = shifted.samples;
        s.sort_unstable_by(f64::total_cmp);
        ensure!(s == mut_sorted, "time shift changed the sample multiset");
    }
    ensure!(seen_f[1..].iter().all(|x| *x), "some frequency widths in 1..=60 never drawn");
    ensure!(seen_t[1..].iter().all(|x| *x), "some time widths in 1..=60 never drawn");
    ensure!(pos > 0 && neg > 0, "shift direction never varies");
    Ok(format!("1000 draws on a {ch}x{frames} spectrogram; shifts +{pos}/-{neg}"))
}

// ---------------------------------------------------------------------------
// 10. DSP sanity

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn tone(freq: f64, sr: u32, secs: f64) -> AudioClip {
    let n = (sr as f64 * secs) as usize;
    let s = (0..n)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64).sin())
        .collect();
    AudioClip::new("tone", sr, s).unwrap()
}

fn crit_dsp() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let n = rng.gen_range(2048..60_000);
        let spec = log_mel(&noise_clip(&mut rng, 16_000, n)).map_err(|e| e.to_string())?;
        let want = 1 + (n - 2048) / 512;
        ensure!(spec.frames() == want, "n={n}: {} frames, expected {want}", spec.frames());
    }

    let sr = 16_000;
    let spec = log_mel(&tone(1000.0, sr, 2.0)).map_err(|e| e.to_string())?;
    let energy: Vec<f64> = (0..spec.channels()).map(|c| spec.row(c).iter().sum()).collect();
    let peak = (0..energy.len()).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap();
    // Centers sit at equal mel steps; channel m is centered on step m + 1.
    let step = hz_to_mel(sr as f64 / 2.0) / (MEL_CHANNELS + 1) as f64;
    let analytic = (hz_to_mel(1000.0) / step).round() as usize - 1;
    ensure!(peak == analytic, "1 kHz peaks in channel {peak}, analytic {analytic}");
    let centers = mel_points(sr);
    ensure!((centers[peak + 1] - 1000.0).abs() < 30.0, "channel {peak} centered at {} Hz", centers[peak + 1]);

    let sr = 44_100;
    let cutoff = default_cutoff(sr);
    let ratio = |f: f64| -> Result<f64, String> {
        let x = tone(f, sr, 1.0);
        let y = low_pass(&x, cutoff).map_err(|e| e.to_string())?;
        let edge = 2000;
        let n = x.samples.len();
        Ok(rms(&y.samples[edge..n - edge]) / rms(&x.samples[edge..n - edge]))
    };
    let hi = ratio(15_000.0)?;
    let lo = ratio(1_000.0)?;
    ensure!(hi < 0.01, "15 kHz keeps {:.4} of its RMS", hi);
    ensure!((1.0 - lo).abs() < 0.01, "1 kHz RMS ratio {lo:.5}");
    Ok(format!("50 lengths; 1 kHz peak in channel {peak}; 15 kHz ratio {hi:.2e}, 1 kHz ratio {lo:.5}"))
}

// ---------------------------------------------------------------------------
// 11. Byte-identical CLI outputs

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn cli(args: &[&str], out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_fairscreen"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .arg("--deterministic")
        .status()
        .map_err(|e| e.to_string())?;
    ensure!(status.success(), "fairscreen {args:?} exited with {status}");
    Ok(())
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn crit_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let preds = fixture("predictions.jsonl");
    let attrs = fixture("attributes.csv");
    let runs: [(&str, Vec<&str>); 2] = [
        (
            "simulate",
            vec!["simulate", "--scenario", "age-bias-v1", "--seeds", "2", "--epochs", "3"],
        ),
        (
            "audit",
            vec![
                "audit",
                "--predictions",
                preds.to_str().unwrap(),
                "--attributes",
                attrs.to_str().unwrap(),
                "--attribute",
                "age",
                "--format",
                "json,csv,md,svg",
            ],
        ),
    ];
    let mut files = 0;
    for (name, args) in &runs {
        let a = tmp.path().join(format!("{name}-a"));
        let b = tmp.path().join(format!("{name}-b"));
        cli(args, &a)?;
        cli(args, &b)?;
        let (ta, tb) = (tree(&a), tree(&b));
        ensure!(ta.len() > 1, "{name} wrote only {} files", ta.len());
        ensure!(ta.keys().eq(tb.keys()), "{name}: different file sets");
        for (k, v) in &ta {
            ensure!(tb[k] == *v, "{name}: {} differs between runs", k.display());
        }
        files += ta.len();
    }
    Ok(format!("{files} files byte-identical across repeated simulate and audit runs"))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(u8, &str, Option<Duration>, fn() -> Check); 11] = [
        (1, "fairness-metric oracle equivalence", Some(Duration::from_secs(1)), crit_metrics),
        (2, "matching exactness", Some(Duration::from_secs(30)), crit_matching),
        (3, "isotonic exactness", None, crit_isotonic),
        (4, "CEO monotone improvement", None, crit_ceo),
        (5, "gradient correctness", Some(Duration::from_secs(60)), crit_gradients),
        (6, "GRL exactness", None, crit_grl),
        (7, "mitigation efficacy", Some(Duration::from_secs(600)), crit_efficacy),
        (8, "frequency-weight identity", None, crit_reweight),
        (9, "SpecAugment contracts", None, crit_specaug),
        (10, "DSP sanity", None, crit_dsp),
        (11, "determinism", None, crit_determinism),
    ];
    let filter: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, limit, f) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = match (result, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS [{id:>2}] {name} ({elapsed:.2?}): {detail}"),
            Err(why) => {
                println!("FAIL [{id:>2}] {name} ({elapsed:.2?}): {why}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
