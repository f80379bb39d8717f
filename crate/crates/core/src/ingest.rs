//! Loading and normalizing participant attributes and prediction files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{
    AgeGroup, Class, Education, Field, Gender, Language, Probs, SubjectRecord, NUM_CLASSES,
};
use crate::error::{Error, Result};

pub const REQUIRED_COLUMNS: [&str; 6] =
    ["subject_id", "gender", "age", "education", "language", "label"];

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeFormat {
    Csv,
    Jsonl,
}

impl AttributeFormat {
    /// Guesses the format from the file extension (`.jsonl`/`.json` vs anything else).
    pub fn from_path(path: &Path) -> AttributeFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => AttributeFormat::Jsonl,
            _ => AttributeFormat::Csv,
        }
    }
}

pub fn load_attributes(path: &Path, format: AttributeFormat) -> Result<Vec<SubjectRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match format {
        AttributeFormat::Csv => read_attributes_csv(file, &name),
        AttributeFormat::Jsonl => read_attributes_jsonl(BufReader::new(file), &name),
    }
}

/// Raw string cells of one attribute row, before validation.
struct RawRow {
    line: usize,
    cells: BTreeMap<&'static str, String>,
}

pub fn read_attributes_csv<R: Read>(reader: R, source: &str) -> Result<Vec<SubjectRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut positions = BTreeMap::new();
    for col in REQUIRED_COLUMNS {
        let pos = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(col))
            .ok_or_else(|| Error::MissingColumn {
                path: source.to_string(),
                column: col.to_string(),
            })?;
        positions.insert(col, pos);
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let cells = positions
            .iter()
            .map(|(col, &pos)| (*col, rec.get(pos).unwrap_or("").to_string()))
            .collect();
        rows.push(RawRow { line, cells });
    }
    finish_rows(rows)
}

pub fn read_attributes_jsonl<R: BufRead>(reader: R, source: &str) -> Result<Vec<SubjectRecord>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(&line)?;
        let mut cells = BTreeMap::new();
        for col in REQUIRED_COLUMNS {
            let value = obj.get(col).ok_or_else(|| Error::MissingColumn {
                path: format!("{source} line {}", i + 1),
                column: col.to_string(),
            })?;
            let text = match value {
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(s) => s.trim().to_string(),
                other => other.to_string(),
            };
            cells.insert(col, text);
        }
        rows.push(RawRow { line: i + 1, cells });
    }
    finish_rows(rows)
}

fn finish_rows(rows: Vec<RawRow>) -> Result<Vec<SubjectRecord>> {
    let scheme = EducationScheme::default();
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let rec = parse_row(&row, &scheme)?;
        if !seen.insert(rec.subject_id.clone()) {
            return Err(Error::DuplicateSubject(rec.subject_id));
        }
        out.push(rec);
    }
    Ok(out)
}

fn parse_row(row: &RawRow, scheme: &EducationScheme) -> Result<SubjectRecord> {
    let cell = |col: &'static str| row.cells.get(col).map(String::as_str).unwrap_or("");
    let schema = |col: &str, value: &str, reason: String| Error::Schema {
        row: row.line,
        column: col.to_string(),
        value: value.to_string(),
        reason,
    };

    let subject_id = cell("subject_id").to_string();
    if subject_id.is_empty() {
        return Err(schema("subject_id", "", "empty subject_id".into()));
    }
    let gender: Gender = cell("gender")
        .parse()
        .map_err(|r| schema("gender", cell("gender"), r))?;
    let language: Language = cell("language")
        .parse()
        .map_err(|r| schema("language", cell("language"), r))?;
    let label: Class = cell("label")
        .parse()
        .map_err(|r| schema("label", cell("label"), r))?;

    let age_raw = cell("age");
    let (age_years, age_group) = if let Ok(years) = age_raw.parse::<f64>() {
        if !years.is_finite() || years.fract() != 0.0 {
            return Err(schema("age", age_raw, "expected whole years".into()));
        }
        let group = bin_age(years as i64).map_err(|e| schema("age", age_raw, e.to_string()))?;
        (Some(years as u32), group)
    } else {
        let group: AgeGroup = age_raw.parse().map_err(|r| schema("age", age_raw, r))?;
        (None, group)
    };

    let edu_raw = cell("education");
    let education = if edu_raw.is_empty() || edu_raw.eq_ignore_ascii_case("na") {
        None
    } else {
        Some(
            map_education_with(edu_raw, scheme)
                .map_err(|e| schema("education", edu_raw, e.to_string()))?,
        )
    };

    Ok(SubjectRecord {
        subject_id,
        gender,
        age_years,
        age_group,
        education,
        language,
        label,
    })
}

/// Writes records as a CSV attribute file readable by [`read_attributes_csv`].
pub fn write_attributes_csv<W: Write>(writer: W, records: &[SubjectRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REQUIRED_COLUMNS)?;
    for r in records {
        let age = match r.age_years {
            Some(y) => y.to_string(),
            None => r.age_group.to_string(),
        };
        w.write_record([
            r.subject_id.as_str(),
            r.gender.as_str(),
            age.as_str(),
            r.education.map(Education::as_str).unwrap_or(""),
            r.language.as_str(),
            r.label.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Bins an age in years into the three analysis groups.
///
/// Ages below 46 fall outside the cohort's range; they are mapped to the
/// youngest bin with a warning rather than rejected.
pub fn bin_age(age_years: i64) -> Result<AgeGroup> {
    match age_years {
        a if a < 0 => Err(Error::invalid(format!("negative age {a}"))),
        a if a < 46 => {
            warn!("age {a} is below 46; assigning to a46_65");
            Ok(AgeGroup::A46To65)
        }
        46..=65 => Ok(AgeGroup::A46To65),
        66..=80 => Ok(AgeGroup::A66To80),
        _ => Ok(AgeGroup::A80Plus),
    }
}

/// Year cutoffs and category synonyms used to map heterogeneous education
/// entries onto the four ISCED-aligned levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EducationScheme {
    pub elementary_max_years: u32,
    pub high_school_max_years: u32,
    pub undergraduate_max_years: u32,
    /// Extra lower-case synonyms checked before the built-in table.
    #[serde(default)]
    pub synonyms: BTreeMap<String, Education>,
}

impl Default for EducationScheme {
    fn default() -> Self {
        EducationScheme {
            elementary_max_years: 8,
            high_school_max_years: 12,
            undergraduate_max_years: 16,
            synonyms: BTreeMap::new(),
        }
    }
}

const EDUCATION_SYNONYMS: &[(&str, Education)] = &[
    ("elementary", Education::Elementary),
    ("elementary school", Education::Elementary),
    ("primary", Education::Elementary),
    ("primary school", Education::Elementary),
    ("less than high school", Education::Elementary),
    ("no formal education", Education::Elementary),
    ("none", Education::Elementary),
    ("high school", Education::HighSchool),
    ("high_school", Education::HighSchool),
    ("highschool", Education::HighSchool),
    ("secondary", Education::HighSchool),
    ("secondary school", Education::HighSchool),
    ("hs", Education::HighSchool),
    ("ged", Education::HighSchool),
    ("undergraduate", Education::Undergraduate),
    ("college", Education::Undergraduate),
    ("some college", Education::Undergraduate),
    ("university", Education::Undergraduate),
    ("associate", Education::Undergraduate),
    ("associate degree", Education::Undergraduate),
    ("bachelor", Education::Undergraduate),
    ("bachelors", Education::Undergraduate),
    ("bachelor's", Education::Undergraduate),
    ("ba", Education::Undergraduate),
    ("bs", Education::Undergraduate),
    ("graduate", Education::Graduate),
    ("postgraduate", Education::Graduate),
    ("advanced", Education::Graduate),
    ("master", Education::Graduate),
    ("masters", Education::Graduate),
    ("master's", Education::Graduate),
    ("ma", Education::Graduate),
    ("ms", Education::Graduate),
    ("msc", Education::Graduate),
    ("phd", Education::Graduate),
    ("doctorate", Education::Graduate),
    ("md", Education::Graduate),
];

pub fn map_education(raw: &str) -> Result<Education> {
    map_education_with(raw, &EducationScheme::default())
}

pub fn map_education_with(raw: &str, scheme: &EducationScheme) -> Result<Education> {
    let token = raw.trim();
    if let Ok(years) = token.parse::<f64>() {
        if !years.is_finite() || years < 0.0 {
            return Err(Error::UnmappedEducation(raw.to_string()));
        }
        let y = years.round() as u32;
        return Ok(if y <= scheme.elementary_max_years {
            Education::Elementary
        } else if y <= scheme.high_school_max_years {
            Education::HighSchool
        } else if y <= scheme.undergraduate_max_years {
            Education::Undergraduate
        } else {
            Education::Graduate
        });
    }
    let key = token.to_ascii_lowercase().replace(['.', '-'], "");
    let key = key.split_whitespace().collect::<Vec<_>>().join(" ");
    if let Some(e) = scheme.synonyms.get(&key) {
        return Ok(*e);
    }
    EDUCATION_SYNONYMS
        .iter()
        .find(|(s, _)| *s == key)
        .map(|(_, e)| *e)
        .ok_or_else(|| Error::UnmappedEducation(raw.to_string()))
}

#[derive(Debug, Clone)]
pub struct Imputation {
    pub records: Vec<SubjectRecord>,
    /// `imputed[i]` is true when record `i`'s target value was filled in.
    pub imputed: Vec<bool>,
    pub iterations: usize,
}

pub const DEFAULT_IMPUTE_MAX_ITERS: usize = 10;
pub const DEFAULT_IMPUTE_TOL: f64 = 1e-3;

/// Predictor row: intercept, age in years, male, spanish, mandarin.
fn predictor_row(r: &SubjectRecord) -> [f64; 5] {
    let age = r
        .age_years
        .unwrap_or_else(|| r.age_group.representative_age()) as f64;
    [
        1.0,
        age,
        (r.gender == Gender::Male) as u8 as f64,
        (r.language == Language::Spanish) as u8 as f64,
        (r.language == Language::Mandarin) as u8 as f64,
    ]
}

/// Fills missing values of `target` by round-robin least-squares regression
/// on age, gender and language, starting from the mode of the observed values.
///
/// Only `education` can be missing in a [`SubjectRecord`]; other targets are
/// returned unchanged.
pub fn impute_missing(
    records: &[SubjectRecord],
    target: Field,
    max_iters: usize,
    tol: f64,
) -> Result<Imputation> {
    let n = records.len();
    if target != Field::Education {
        return Ok(Imputation {
            records: records.to_vec(),
            imputed: vec![false; n],
            iterations: 0,
        });
    }
    let observed: Vec<usize> = (0..n).filter(|&i| records[i].education.is_some()).collect();
    let missing: Vec<usize> = (0..n).filter(|&i| records[i].education.is_none()).collect();
    if observed.is_empty() {
        return Err(Error::CannotImpute(target.to_string()));
    }
    if missing.is_empty() {
        return Ok(Imputation {
            records: records.to_vec(),
            imputed: vec![false; n],
            iterations: 0,
        });
    }

    let levels = Education::ALL.len();
    let mut counts = vec![0usize; levels];
    for &i in &observed {
        counts[records[i].education.unwrap().ordinal()] += 1;
    }
    let mode = (0..levels).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap();

    let mut codes: Vec<f64> = records
        .iter()
        .map(|r| r.education.map(|e| e.ordinal() as f64).unwrap_or(mode as f64))
        .collect();

    let design = |rows: &[usize]| {
        DMatrix::from_fn(rows.len(), 5, |i, j| predictor_row(&records[rows[i]])[j])
    };
    let x_obs = design(&observed);
    let x_mis = design(&missing);
    let svd = x_obs.svd(true, true);

    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let y = DVector::from_iterator(observed.len(), observed.iter().map(|&i| codes[i]));
        let beta = svd
            .solve(&y, 1e-10)
            .map_err(|e| Error::Numerical(format!("imputation least squares: {e}")))?;
        let pred = &x_mis * beta;
        let mut max_change: f64 = 0.0;
        for (k, &i) in missing.iter().enumerate() {
            let level = pred[k].round().clamp(0.0, (levels - 1) as f64);
            max_change = max_change.max((level - codes[i]).abs());
            codes[i] = level;
        }
        if max_change < tol {
            break;
        }
    }

    let mut out = records.to_vec();
    let mut imputed = vec![false; n];
    for &i in &missing {
        out[i].education = Education::from_ordinal(codes[i] as usize);
        imputed[i] = true;
    }
    Ok(Imputation {
        records: out,
        imputed,
        iterations,
    })
}

/// Splits `records` into `(part_a, part_b)` with `part_b` holding roughly
/// `fraction` of every stratum.
///
/// Each stratum contributes `floor(fraction * size)` subjects, and the
/// largest fractional remainders receive one extra subject until the total
/// reaches `round(fraction * N)`. A stratum whose floor is zero stays
/// entirely in `part_a`. Both parts keep the input order.
pub fn stratified_split(
    records: &[SubjectRecord],
    fraction: f64,
    strata: &[Field],
    seed: u64,
) -> Result<(Vec<SubjectRecord>, Vec<SubjectRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} not in (0, 1)")));
    }
    let mut groups: BTreeMap<Vec<&'static str>, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = strata
            .iter()
            .map(|f| r.value_of(*f).unwrap_or("missing"))
            .collect();
        groups.entry(key).or_default().push(i);
    }

    let mut alloc: Vec<usize> = Vec::with_capacity(groups.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for (g, (key, members)) in groups.iter().enumerate() {
        let exact = fraction * members.len() as f64;
        let floor = exact.floor() as usize;
        if floor == 0 {
            warn!("stratum {key:?} ({} subjects) too small to split; kept in part A", members.len());
        } else if exact > floor as f64 {
            remainders.push((exact - floor as f64, g));
        }
        alloc.push(floor);
    }
    let target = (fraction * records.len() as f64).round() as usize;
    let mut total: usize = alloc.iter().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, g) in remainders {
        if total >= target {
            break;
        }
        alloc[g] += 1;
        total += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_b = vec![false; records.len()];
    for ((_, members), take) in groups.iter().zip(alloc) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..take] {
            in_b[i] = true;
        }
    }
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (r, flag) in records.iter().zip(in_b) {
        if flag {
            b.push(r.clone());
        } else {
            a.push(r.clone());
        }
    }
    Ok((a, b))
}

/// Class probabilities for every subject of one training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub seed: u64,
    pub entries: BTreeMap<String, Probs>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictionLine {
    subject_id: String,
    probs: Vec<f64>,
    seed: u64,
}

pub fn validate_probs(probs: &[f64]) -> Result<Probs> {
    if probs.len() != NUM_CLASSES {
        return Err(Error::invalid(format!(
            "expected {NUM_CLASSES} probabilities, got {}",
            probs.len()
        )));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(format!("probabilities {probs:?} must be finite and non-negative")));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::invalid(format!("probabilities {probs:?} sum to {sum}, not 1")));
    }
    Ok([probs[0], probs[1], probs[2]])
}

/// Index of the largest entry; ties go to the earlier class.
pub fn argmax_class(probs: &Probs) -> Class {
    let mut best = 0;
    for c in 1..NUM_CLASSES {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    Class::ALL[best]
}

impl PredictionSet {
    pub fn new(seed: u64) -> Self {
        PredictionSet {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, subject_id: impl Into<String>, probs: &[f64]) -> Result<()> {
        let id = subject_id.into();
        let p = validate_probs(probs)?;
        if self.entries.insert(id.clone(), p).is_some() {
            return Err(Error::DuplicateSubject(id));
        }
        Ok(())
    }

    pub fn hard_pred(&self, subject_id: &str) -> Option<Class> {
        self.entries.get(subject_id).map(argmax_class)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every predicted subject must exist in `records`.
    pub fn validate_against(&self, records: &[SubjectRecord]) -> Result<()> {
        let ids: HashSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
        match self.entries.keys().find(|k| !ids.contains(k.as_str())) {
            Some(missing) => Err(Error::UnknownSubject(missing.clone())),
            None => Ok(()),
        }
    }
}

/// Reads a prediction JSONL file, grouping lines by run seed (ascending).
pub fn read_predictions<R: BufRead>(reader: R, source: &str) -> Result<Vec<PredictionSet>> {
    let mut by_seed: BTreeMap<u64, PredictionSet> = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredictionLine = serde_json::from_str(&line).map_err(|e| Error::Schema {
            row: i + 1,
            column: "prediction".into(),
            value: line.chars().take(80).collect(),
            reason: e.to_string(),
        })?;
        by_seed
            .entry(parsed.seed)
            .or_insert_with(|| PredictionSet::new(parsed.seed))
            .insert(parsed.subject_id, &parsed.probs)
            .map_err(|e| Error::Schema {
                row: i + 1,
                column: "probs".into(),
                value: format!("{:?}", parsed.probs),
                reason: e.to_string(),
            })?;
    }
    Ok(by_seed.into_values().collect())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionSet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(BufReader::new(file), &path.display().to_string())
}

pub fn write_predictions<W: Write>(mut writer: W, sets: &[PredictionSet]) -> Result<()> {
    for set in sets {
        for (id, probs) in &set.entries {
            let line = PredictionLine {
                subject_id: id.clone(),
                probs: probs.to_vec(),
                seed: set.seed,
            };
            serde_json::to_writer(&mut writer, &line)?;
            writer.write_all(b"\n").map_err(|e| Error::io("<predictions>", e))?;
        }
    }
    Ok(())
}

/// Lookup from subject id to record.
pub fn index_records(records: &[SubjectRecord]) -> BTreeMap<&str, &SubjectRecord> {
    records.iter().map(|r| (r.subject_id.as_str(), r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "subject_id,gender,age,education,language,label\n\
        s1,female,70,12,english,control\n\
        s2,male,85,PhD,spanish,ad\n\
        s3,female,60,,mandarin,mci\n";

    #[test]
    fn csv_three_rows() {
        let recs = read_attributes_csv(CSV.as_bytes(), "t").unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].education, Some(Education::HighSchool));
        assert_eq!(recs[1].education, Some(Education::Graduate));
        assert_eq!(recs[1].age_group, AgeGroup::A80Plus);
        assert_eq!(recs[2].education, None);
    }

    #[test]
    fn bad_language_names_row() {
        let csv = "subject_id,gender,age,education,language,label\n\
            s1,female,70,12,english,control\n\
            s2,male,85,12,french,ad\n";
        match read_attributes_csv(csv.as_bytes(), "t") {
            Err(Error::Schema { row, column, value, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "language");
                assert_eq!(value, "french");
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_and_duplicates() {
        let csv = "subject_id,gender,age,language,label\ns1,female,70,english,control\n";
        assert!(matches!(
            read_attributes_csv(csv.as_bytes(), "t"),
            Err(Error::MissingColumn { column, .. }) if column == "education"
        ));
        let csv = "subject_id,gender,age,education,language,label\n\
            s1,female,70,12,english,control\ns1,male,71,12,english,ad\n";
        assert!(matches!(
            read_attributes_csv(csv.as_bytes(), "t"),
            Err(Error::DuplicateSubject(id)) if id == "s1"
        ));
    }

    #[test]
    fn jsonl_matches_csv() {
        let jsonl = r#"{"subject_id":"s1","gender":"female","age":70,"education":"12","language":"english","label":"control"}
{"subject_id":"s2","gender":"male","age":85,"education":"PhD","language":"spanish","label":"ad"}
{"subject_id":"s3","gender":"female","age":60,"education":null,"language":"mandarin","label":"mci"}
"#;
        let a = read_attributes_csv(CSV.as_bytes(), "t").unwrap();
        let b = read_attributes_jsonl(jsonl.as_bytes(), "t").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn age_bins() {
        assert_eq!(bin_age(65).unwrap(), AgeGroup::A46To65);
        assert_eq!(bin_age(66).unwrap(), AgeGroup::A66To80);
        assert_eq!(bin_age(80).unwrap(), AgeGroup::A66To80);
        assert_eq!(bin_age(81).unwrap(), AgeGroup::A80Plus);
        assert_eq!(bin_age(30).unwrap(), AgeGroup::A46To65);
        assert!(bin_age(-1).is_err());
    }

    #[test]
    fn binning_is_total_and_idempotent() {
        for age in 0..=120 {
            let g = bin_age(age).unwrap();
            assert_eq!(bin_age(g.representative_age() as i64).unwrap(), g);
        }
    }

    #[test]
    fn education_mapping() {
        assert_eq!(map_education("12").unwrap(), Education::HighSchool);
        assert_eq!(map_education("8").unwrap(), Education::Elementary);
        assert_eq!(map_education("16").unwrap(), Education::Undergraduate);
        assert_eq!(map_education("17").unwrap(), Education::Graduate);
        assert_eq!(map_education("graduate").unwrap(), Education::Graduate);
        assert_eq!(map_education("PhD").unwrap(), Education::Graduate);
        assert_eq!(map_education("High School").unwrap(), Education::HighSchool);
        match map_education("kindergarten") {
            Err(Error::UnmappedEducation(t)) => assert_eq!(t, "kindergarten"),
            other => panic!("{other:?}"),
        }
        let mut scheme = EducationScheme::default();
        scheme.high_school_max_years = 11;
        assert_eq!(map_education_with("12", &scheme).unwrap(), Education::Undergraduate);
    }

    fn rec(id: &str, age: u32, edu: Option<Education>) -> SubjectRecord {
        SubjectRecord {
            subject_id: id.into(),
            gender: Gender::Female,
            age_years: Some(age),
            age_group: bin_age(age as i64).unwrap(),
            education: edu,
            language: Language::English,
            label: Class::Control,
        }
    }

    #[test]
    fn impute_identity_without_missing() {
        let recs = vec![rec("a", 50, Some(Education::Graduate)), rec("b", 70, Some(Education::Elementary))];
        let out = impute_missing(&recs, Field::Education, 10, 1e-3).unwrap();
        assert_eq!(out.records, recs);
        assert!(out.imputed.iter().all(|f| !f));
    }

    #[test]
    fn impute_exact_linear_rule() {
        // education code = (age - 46) / 10 on observed rows; the solve is exact.
        let mut recs: Vec<SubjectRecord> = [46, 56, 66, 76, 46, 76]
            .iter()
            .enumerate()
            .map(|(i, &a)| rec(&format!("s{i}"), a, Education::from_ordinal(((a - 46) / 10) as usize)))
            .collect();
        recs.push(rec("target", 66, None));
        let out = impute_missing(&recs, Field::Education, 10, 1e-3).unwrap();
        assert_eq!(out.records[6].education, Some(Education::Undergraduate));
        assert!(out.imputed[6]);
        assert_eq!(&out.records[..6], &recs[..6]);
    }

    #[test]
    fn impute_all_missing_fails() {
        let recs = vec![rec("a", 50, None)];
        assert!(matches!(
            impute_missing(&recs, Field::Education, 10, 1e-3),
            Err(Error::CannotImpute(_))
        ));
    }

    #[test]
    fn split_forced_allocation_and_determinism() {
        let recs: Vec<SubjectRecord> = (0..10)
            .map(|i| {
                let mut r = rec(&format!("s{i}"), 70, Some(Education::Graduate));
                r.label = if i < 5 { Class::Control } else { Class::Ad };
                r
            })
            .collect();
        let (a, b) = stratified_split(&recs, 0.2, &[Field::Label], 3).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(b.iter().filter(|r| r.label == Class::Control).count(), 1);
        assert_eq!(b.iter().filter(|r| r.label == Class::Ad).count(), 1);
        let (a2, b2) = stratified_split(&recs, 0.2, &[Field::Label], 3).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn predictions_validate() {
        let mut set = PredictionSet::new(1);
        set.insert("a", &[0.2, 0.3, 0.5]).unwrap();
        assert!(set.insert("b", &[0.2, 0.3, 0.6]).is_err());
        assert!(set.insert("c", &[-0.1, 0.6, 0.5]).is_err());
        assert!(set.insert("a", &[0.2, 0.3, 0.5]).is_err());
        assert_eq!(set.hard_pred("a"), Some(Class::Ad));
        assert_eq!(argmax_class(&[0.4, 0.4, 0.2]), Class::Control);
        let recs = vec![rec("z", 60, None)];
        assert!(matches!(set.validate_against(&recs), Err(Error::UnknownSubject(_))));
    }

    #[test]
    fn predictions_jsonl_round_trip() {
        let mut s1 = PredictionSet::new(1);
        s1.insert("a", &[0.2, 0.3, 0.5]).unwrap();
        let mut s0 = PredictionSet::new(0);
        s0.insert("a", &[1.0, 0.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_predictions(&mut buf, &[s1.clone(), s0.clone()]).unwrap();
        let back = read_predictions(buf.as_slice(), "t").unwrap();
        assert_eq!(back, vec![s0, s1]);
    }
}
