//! Speaker pairing for voice conversion: three-feature acoustic profiles,
//! cosine dissimilarity, and an exact maximum-weight matching.

pub mod blossom;

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const FEATURE_COLUMNS: [&str; 3] = [
    "voiced_segments_per_sec",
    "shimmer_local_db",
    "mfcc1_stddev_norm",
];

/// Largest brute-force instance accepted.
pub const BRUTE_FORCE_MAX: usize = 12;

/// Distances are quantized to integers with the largest one mapped here, so
/// both matchers compare weights exactly.
pub const WEIGHT_SCALE: f64 = (1u64 << 40) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerFeatures {
    pub subject_id: String,
    pub x: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-feature z-score with the population standard deviation.
    #[default]
    ZScore,
    /// Per-feature rescaling to [0, 1].
    MinMax,
}

pub fn read_features<R: Read>(reader: R, source: &str) -> Result<Vec<SpeakerFeatures>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn {
                path: source.to_string(),
                column: name.to_string(),
            })
    };
    let id_col = col("subject_id")?;
    let cols = [col(FEATURE_COLUMNS[0])?, col(FEATURE_COLUMNS[1])?, col(FEATURE_COLUMNS[2])?];
    let mut out: Vec<SpeakerFeatures> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id = rec.get(id_col).unwrap_or("").to_string();
        let mut x = [0.0; 3];
        for (k, &c) in cols.iter().enumerate() {
            let raw = rec.get(c).unwrap_or("");
            x[k] = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Schema {
                    row: line,
                    column: FEATURE_COLUMNS[k].to_string(),
                    value: raw.to_string(),
                    reason: "expected a finite number".into(),
                })?;
        }
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateSubject(id));
        }
        out.push(SpeakerFeatures { subject_id: id, x });
    }
    Ok(out)
}

pub fn load_features(path: &Path) -> Result<Vec<SpeakerFeatures>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_features(file, &path.display().to_string())
}

pub fn normalize_features(raw: &[SpeakerFeatures], how: Normalization) -> Result<Vec<SpeakerFeatures>> {
    if raw.len() < 2 {
        return Err(Error::invalid("normalization needs at least two speakers"));
    }
    let n = raw.len() as f64;
    let mut out = raw.to_vec();
    for k in 0..3 {
        let col = raw.iter().map(|s| s.x[k]);
        let (shift, scale) = match how {
            Normalization::ZScore => {
                let mean = col.clone().sum::<f64>() / n;
                let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var.sqrt())
            }
            Normalization::MinMax => {
                let lo = col.clone().fold(f64::INFINITY, f64::min);
                let hi = col.fold(f64::NEG_INFINITY, f64::max);
                (lo, hi - lo)
            }
        };
        if !(scale > 0.0) {
            return Err(Error::invalid(format!(
                "feature `{}` is constant across the cohort",
                FEATURE_COLUMNS[k]
            )));
        }
        for s in &mut out {
            s.x[k] = (s.x[k] - shift) / scale;
        }
    }
    Ok(out)
}

/// `1 - cos(x, y)`, clamped to [0, 2].
pub fn cosine_distance(x: &[f64; 3], y: &[f64; 3]) -> Result<f64> {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::invalid("cosine distance of a zero vector"));
    }
    Ok((1.0 - dot / (nx * ny)).clamp(0.0, 2.0))
}

pub fn distance_matrix(feats: &[SpeakerFeatures]) -> Result<Vec<Vec<f64>>> {
    distance_matrix_with(Exec::default(), feats)
}

pub fn distance_matrix_with(exec: Exec, feats: &[SpeakerFeatures]) -> Result<Vec<Vec<f64>>> {
    if let Some(s) = feats.iter().find(|s| s.x.iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid(format!(
            "speaker {} has a zero feature vector",
            s.subject_id
        )));
    }
    par::try_map_range(exec, feats.len(), |i| {
        feats
            .iter()
            .map(|other| cosine_distance(&feats[i].x, &other.x))
            .collect::<Result<Vec<f64>>>()
    })
}

/// Index-level matching result. Pairs are `(p, q, distance)` with `p < q`,
/// sorted by `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched: Vec<usize>,
    /// Sum of pair distances, accumulated in pair order.
    pub total_weight: f64,
    /// Sum of quantized weights; the quantity both matchers maximize.
    pub quantized_weight: i64,
}

fn validate(d: &[Vec<f64>]) -> Result<()> {
    let n = d.len();
    if n < 2 {
        return Err(Error::invalid("matching needs at least two speakers"));
    }
    for (i, row) in d.iter().enumerate() {
        if row.len() != n {
            return Err(Error::invalid("distance matrix is not square"));
        }
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("distance ({i}, {j}) = {v} is not a finite non-negative value")));
            }
            if (v - d[j][i]).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "distance matrix is asymmetric at ({i}, {j}): {v} vs {}",
                    d[j][i]
                )));
            }
        }
    }
    Ok(())
}

/// Integer weights for every pair `i < j`.
pub fn quantize(d: &[Vec<f64>]) -> Vec<Vec<i64>> {
    let max = d.iter().flatten().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { WEIGHT_SCALE / max } else { 0.0 };
    d.iter()
        .map(|row| row.iter().map(|&v| (v * scale).round() as i64).collect())
        .collect()
}

fn finish(d: &[Vec<f64>], q: &[Vec<i64>], mut pairs: Vec<(usize, usize)>) -> Matching {
    pairs.sort_unstable();
    let matched: std::collections::BTreeSet<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let mut total = 0.0;
    let mut qtotal = 0;
    let pairs = pairs
        .into_iter()
        .map(|(p, r)| {
            total += d[p][r];
            qtotal += q[p][r];
            (p, r, d[p][r])
        })
        .collect();
    Matching {
        pairs,
        unmatched: (0..d.len()).filter(|i| !matched.contains(i)).collect(),
        total_weight: total,
        quantized_weight: qtotal,
    }
}

/// Exact maximum-weight matching on the complete graph over `d`.
///
/// Every pair is an edge, so with non-negative weights some maximum-weight
/// matching has maximum cardinality; the solver searches among those, which
/// leaves exactly one speaker unmatched when `n` is odd.
pub fn max_weight_matching(d: &[Vec<f64>]) -> Result<Matching> {
    validate(d)?;
    let q = quantize(d);
    let n = d.len();
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j, q[i][j]));
        }
    }
    let mates = blossom::max_weight_matching(n, &edges, true);
    let pairs = mates
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.filter(|&j| i < j).map(|j| (i, j)))
        .collect();
    Ok(finish(d, &q, pairs))
}

/// Exhaustive search over every matching of at most 12 speakers. Among
/// maximum-weight matchings it prefers more pairs, then the
/// lexicographically smallest sorted pair list.
pub fn brute_force_matching(d: &[Vec<f64>]) -> Result<Matching> {
    validate(d)?;
    let n = d.len();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::invalid(format!(
            "brute-force matching is limited to {BRUTE_FORCE_MAX} speakers, got {n}"
        )));
    }
    let q = quantize(d);
    let mut best: Option<(i64, Vec<(usize, usize)>)> = None;
    let mut current = Vec::new();
    search(&q, &mut vec![false; n], 0, 0, &mut current, &mut best);
    Ok(finish(d, &q, best.map(|b| b.1).unwrap_or_default()))
}

fn search(
    q: &[Vec<i64>],
    used: &mut Vec<bool>,
    start: usize,
    weight: i64,
    current: &mut Vec<(usize, usize)>,
    best: &mut Option<(i64, Vec<(usize, usize)>)>,
) {
    let n = q.len();
    let Some(i) = (start..n).find(|&i| !used[i]) else {
        let better = match best {
            None => true,
            Some((w, pairs)) => {
                weight > *w
                    || (weight == *w
                        && (current.len() > pairs.len()
                            || (current.len() == pairs.len() && *current < *pairs)))
            }
        };
        if better {
            *best = Some((weight, current.clone()));
        }
        return;
    };
    // `current` stays sorted because `i` is the smallest free vertex.
    used[i] = true;
    for j in i + 1..n {
        if !used[j] {
            used[j] = true;
            current.push((i, j));
            search(q, used, i + 1, weight + q[i][j], current, best);
            current.pop();
            used[j] = false;
        }
    }
    search(q, used, i + 1, weight, current, best);
    used[i] = false;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedPair {
    pub source: String,
    pub target: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directive {
    pub source_utterance: String,
    pub source_speaker: String,
    pub target_speaker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingPlan {
    pub pairs: Vec<PlannedPair>,
    pub unmatched: Vec<String>,
    pub total_weight: f64,
    #[serde(default)]
    pub directives: Vec<Directive>,
}

impl MatchingPlan {
    pub fn from_matching(feats: &[SpeakerFeatures], m: &Matching) -> MatchingPlan {
        MatchingPlan {
            pairs: m
                .pairs
                .iter()
                .map(|&(p, q, distance)| PlannedPair {
                    source: feats[p].subject_id.clone(),
                    target: feats[q].subject_id.clone(),
                    distance,
                })
                .collect(),
            unmatched: m.unmatched.iter().map(|&i| feats[i].subject_id.clone()).collect(),
            total_weight: m.total_weight,
            directives: Vec::new(),
        }
    }
}

/// Normalizes raw features, matches the most dissimilar speakers, and
/// returns the plan without directives.
pub fn plan_pairs(exec: Exec, raw: &[SpeakerFeatures], how: Normalization) -> Result<MatchingPlan> {
    let feats = normalize_features(raw, how)?;
    let d = distance_matrix_with(exec, &feats)?;
    let m = max_weight_matching(&d)?;
    Ok(MatchingPlan::from_matching(&feats, &m))
}

/// Bidirectional conversion directives: every utterance of each paired
/// speaker is converted toward the other speaker's voice.
pub fn conversion_plan(
    plan: &MatchingPlan,
    utterances: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<Directive>> {
    let mut out = Vec::new();
    for pair in &plan.pairs {
        for (src, tgt) in [(&pair.source, &pair.target), (&pair.target, &pair.source)] {
            let utts = utterances
                .get(src)
                .filter(|u| !u.is_empty())
                .ok_or_else(|| Error::invalid(format!("matched speaker {src} has no utterances")))?;
            for u in utts {
                out.push(Directive {
                    source_utterance: u.clone(),
                    source_speaker: src.clone(),
                    target_speaker: tgt.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Reads a `subject_id,utterance` CSV into an utterance index.
pub fn read_utterances<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let (Some(id), Some(utt)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::invalid("utterance rows need subject_id and utterance"));
        };
        out.entry(id.to_string()).or_default().push(utt.to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf(id: &str, x: [f64; 3]) -> SpeakerFeatures {
        SpeakerFeatures { subject_id: id.into(), x }
    }

    #[test]
    fn zscore_two_speakers() {
        let raw = vec![sf("a", [0.0, 1.0, 5.0]), sf("b", [2.0, 3.0, 9.0])];
        let z = normalize_features(&raw, Normalization::ZScore).unwrap();
        assert_eq!(z[0].x, [-1.0, -1.0, -1.0]);
        assert_eq!(z[1].x, [1.0, 1.0, 1.0]);
        let bad = vec![sf("a", [1.0, 1.0, 5.0]), sf("b", [1.0, 3.0, 9.0])];
        let err = normalize_features(&bad, Normalization::ZScore).unwrap_err();
        assert!(err.to_string().contains("voiced_segments_per_sec"));
        let mm = normalize_features(&raw, Normalization::MinMax).unwrap();
        assert_eq!(mm[1].x, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn cosine_examples() {
        assert!(cosine_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().abs() < 1e-15);
        assert_eq!(cosine_distance(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 1.0);
        let d = cosine_distance(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-12);
        assert!(cosine_distance(&[0.0; 3], &[1.0, 0.0, 0.0]).is_err());
    }

    fn four() -> Vec<Vec<f64>> {
        // vertices 1..4 of the worked example, zero-indexed
        let mut d = vec![vec![0.0; 4]; 4];
        let mut set = |i: usize, j: usize, v: f64| {
            d[i][j] = v;
            d[j][i] = v;
        };
        set(0, 1, 0.9);
        set(2, 3, 0.8);
        set(0, 2, 0.5);
        set(1, 3, 0.5);
        set(0, 3, 0.1);
        set(1, 2, 0.1);
        d
    }

    #[test]
    fn worked_example() {
        let m = max_weight_matching(&four()).unwrap();
        assert_eq!(m.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), vec![(0, 1), (2, 3)]);
        assert!((m.total_weight - 1.7).abs() < 1e-12);
        assert_eq!(brute_force_matching(&four()).unwrap(), m);
    }

    #[test]
    fn two_and_odd() {
        let d = vec![vec![0.0, 0.4], vec![0.4, 0.0]];
        assert_eq!(max_weight_matching(&d).unwrap().pairs, vec![(0, 1, 0.4)]);
        let d3 = vec![vec![0.0, 0.2, 0.5], vec![0.2, 0.0, 0.3], vec![0.5, 0.3, 0.0]];
        let m = max_weight_matching(&d3).unwrap();
        assert_eq!(m.unmatched, vec![1]);
        assert_eq!(m.pairs, vec![(0, 2, 0.5)]);
    }

    #[test]
    fn equal_weights_brute_force_is_lexicographic() {
        let d = vec![vec![1.0; 6]; 6];
        let m = brute_force_matching(&d).unwrap();
        assert_eq!(
            m.pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(),
            vec![(0, 1), (2, 3), (4, 5)]
        );
        assert_eq!(max_weight_matching(&d).unwrap().quantized_weight, m.quantized_weight);
    }

    #[test]
    fn rejects_bad_matrices() {
        assert!(max_weight_matching(&[vec![0.0]]).is_err());
        let asym = vec![vec![0.0, 0.4], vec![0.5, 0.0]];
        assert!(max_weight_matching(&asym).is_err());
        assert!(brute_force_matching(&vec![vec![0.0; 13]; 13]).is_err());
    }

    #[test]
    fn directives() {
        let plan = MatchingPlan {
            pairs: vec![PlannedPair { source: "a".into(), target: "b".into(), distance: 0.5 }],
            unmatched: vec![],
            total_weight: 0.5,
            directives: vec![],
        };
        let mut utt = BTreeMap::new();
        utt.insert("a".to_string(), vec!["a1".to_string()]);
        utt.insert("b".to_string(), vec!["b1".to_string()]);
        let d = conversion_plan(&plan, &utt).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].source_utterance, "b1");
        assert_eq!(d[1].target_speaker, "a");
        utt.remove("b");
        assert!(conversion_plan(&plan, &utt).is_err());
        let empty = MatchingPlan { pairs: vec![], ..plan };
        assert!(conversion_plan(&empty, &utt).unwrap().is_empty());
    }
}
