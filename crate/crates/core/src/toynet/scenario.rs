//! Synthetic two-modality data with controllable subgroup bias.
//!
//! Each class has a Gaussian cluster per modality. Every subgroup adds its
//! own small offset (so subgroup membership is learnable), and a bias entry
//! can inflate the noise or shrink the class separation of one modality for
//! one subgroup. Layer stacks for LWF are noisy rescaled copies of the
//! acoustic (encoder side) and linguistic (decoder side) vectors.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lwf::LAYERS;
use super::std_normal;
use crate::domain::{AgeGroup, Class, Education, Field, Gender, Language, SubjectRecord};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Linguistic,
    Acoustic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub label: Class,
    pub subgroup: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub subgroup: String,
    pub modality: Modality,
    /// Multiplies the noise standard deviation; at least 1.
    #[serde(default = "one")]
    pub noise_factor: f64,
    /// Multiplies the class-mean separation; in (0, 1].
    #[serde(default = "one")]
    pub separation_scale: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub linguistic: usize,
    pub acoustic: usize,
    /// Frames per layer before pooling.
    pub frames: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims {
            linguistic: 32,
            acoustic: 32,
            frames: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub attribute: Field,
    pub cells: Vec<CellSpec>,
    #[serde(default)]
    pub dims: Dims,
    /// Distance scale of the class means, per modality.
    pub separation_linguistic: f64,
    pub separation_acoustic: f64,
    /// Per-coordinate noise standard deviation.
    pub noise: f64,
    /// Norm of each subgroup's feature offset.
    pub subgroup_offset: f64,
    /// Per-frame noise in the layer stacks.
    pub frame_noise: f64,
    #[serde(default)]
    pub bias: Vec<BiasSpec>,
    pub seed: u64,
}

pub const PRESETS: &[&str] = &["age-bias-v1", "null"];

impl ScenarioConfig {
    /// Reference scenarios by name.
    pub fn preset(name: &str) -> Option<ScenarioConfig> {
        match name {
            "age-bias-v1" => Some(age_bias_v1()),
            "null" => Some(null_scenario()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.attribute.is_protected() {
            return Err(invalid(format!("`{}` cannot be a scenario attribute", self.attribute.as_str())));
        }
        if self.cells.is_empty() {
            return Err(invalid("scenario has no cells"));
        }
        let allowed = self.attribute.values();
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.cells {
            if !allowed.contains(&c.subgroup.as_str()) {
                return Err(invalid(format!(
                    "subgroup {:?} is not a value of `{}`",
                    c.subgroup,
                    self.attribute.as_str()
                )));
            }
            if c.n_train == 0 || c.n_val == 0 || c.n_test == 0 {
                return Err(invalid(format!(
                    "cell ({}, {}) needs at least one sample per split",
                    c.label, c.subgroup
                )));
            }
            if !seen.insert((c.label, c.subgroup.clone())) {
                return Err(invalid(format!("cell ({}, {}) listed twice", c.label, c.subgroup)));
            }
        }
        for b in &self.bias {
            if !allowed.contains(&b.subgroup.as_str()) {
                return Err(invalid(format!("bias subgroup {:?} is not a value of `{}`", b.subgroup, self.attribute.as_str())));
            }
            if !(b.noise_factor >= 1.0 && b.noise_factor.is_finite()) {
                return Err(invalid(format!("noise factor {} must be at least 1", b.noise_factor)));
            }
            if !(b.separation_scale > 0.0 && b.separation_scale <= 1.0) {
                return Err(invalid(format!("separation scale {} must be in (0, 1]", b.separation_scale)));
            }
        }
        let d = self.dims;
        if d.linguistic == 0 || d.acoustic == 0 || d.frames == 0 {
            return Err(invalid("scenario dimensions must be positive"));
        }
        for v in [self.separation_linguistic, self.separation_acoustic, self.noise, self.subgroup_offset, self.frame_noise] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid("scenario scales must be finite and non-negative"));
            }
        }
        Ok(())
    }

    /// Subgroups that occur in the cells, in the attribute's declared order.
    pub fn subgroups(&self) -> Vec<String> {
        self.attribute
            .values()
            .into_iter()
            .filter(|v| self.cells.iter().any(|c| c.subgroup == *v))
            .map(str::to_string)
            .collect()
    }
}

fn cells(attribute: Field, table: &[(&str, [[usize; 3]; 3])]) -> Vec<CellSpec> {
    let mut out = Vec::new();
    for (sub, rows) in table {
        for class in Class::ALL {
            let [n_train, n_val, n_test] = rows[class.index()];
            out.push(CellSpec {
                label: *class,
                subgroup: sub.to_string(),
                n_train,
                n_val,
                n_test,
            });
        }
    }
    debug_assert!(out.iter().all(|c| attribute.values().contains(&c.subgroup.as_str())));
    out
}

/// Oldest subgroup: acoustic noise tripled and a label mix skewed towards AD.
fn age_bias_v1() -> ScenarioConfig {
    ScenarioConfig {
        name: "age-bias-v1".into(),
        attribute: Field::Age,
        cells: cells(
            Field::Age,
            &[
                ("a46_65", [[120, 120, 150], [100, 100, 150], [60, 60, 150]]),
                ("a66_80", [[160, 160, 150], [140, 140, 150], [100, 100, 150]]),
                ("a80_plus", [[15, 15, 150], [25, 25, 150], [160, 160, 150]]),
            ],
        ),
        dims: Dims::default(),
        separation_linguistic: 0.9,
        separation_acoustic: 1.6,
        noise: 1.0,
        subgroup_offset: 3.0,
        frame_noise: 0.5,
        bias: vec![BiasSpec {
            subgroup: "a80_plus".into(),
            modality: Modality::Acoustic,
            noise_factor: 3.0,
            separation_scale: 1.0,
        }],
        seed: 20_240_601,
    }
}

fn null_scenario() -> ScenarioConfig {
    ScenarioConfig {
        name: "null".into(),
        attribute: Field::Age,
        cells: cells(
            Field::Age,
            &[
                ("a46_65", [[100, 50, 300], [100, 50, 300], [100, 50, 300]]),
                ("a66_80", [[100, 50, 300], [100, 50, 300], [100, 50, 300]]),
                ("a80_plus", [[100, 50, 300], [100, 50, 300], [100, 50, 300]]),
            ],
        ),
        dims: Dims::default(),
        separation_linguistic: 2.0,
        separation_acoustic: 2.0,
        noise: 1.0,
        subgroup_offset: 1.0,
        frame_noise: 0.5,
        bias: Vec::new(),
        seed: 7,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub record: SubjectRecord,
    /// Index into [`Dataset::subgroups`].
    pub subgroup: usize,
    pub x_l: Vec<f64>,
    pub x_a: Vec<f64>,
    /// Mean-pooled encoder layers (acoustic side).
    pub enc: Vec<Vec<f64>>,
    /// Mean-pooled decoder layers (linguistic side).
    pub dec: Vec<Vec<f64>>,
}

impl Sample {
    pub fn label(&self) -> Class {
        self.record.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub attribute: Field,
    pub subgroups: Vec<String>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Sample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn records(&self, s: Split) -> Vec<SubjectRecord> {
        self.split(s).iter().map(|x| x.record.clone()).collect()
    }

    pub fn linguistic_dim(&self) -> usize {
        self.train.first().map_or(0, |s| s.x_l.len())
    }

    pub fn acoustic_dim(&self) -> usize {
        self.train.first().map_or(0, |s| s.x_a.len())
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * std_normal(rng)).collect()
}

fn unit_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, n, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Per-layer signal strength of the stacks; later layers carry more signal.
pub fn layer_scale(i: usize) -> f64 {
    0.4 + 0.1 * i as f64
}

struct Modal {
    means: Vec<Vec<f64>>,
    offsets: BTreeMap<String, Vec<f64>>,
}

fn set_attribute(r: &mut SubjectRecord, field: Field, token: &str) -> Result<()> {
    let bad = |e: String| invalid(format!("{token:?}: {e}"));
    match field {
        Field::Gender => r.gender = token.parse::<Gender>().map_err(bad)?,
        Field::Age => {
            r.age_group = token.parse::<AgeGroup>().map_err(bad)?;
            r.age_years = Some(r.age_group.representative_age());
        }
        Field::Education => r.education = Some(token.parse::<Education>().map_err(bad)?),
        Field::Language => r.language = token.parse::<Language>().map_err(bad)?,
        Field::Label => return Err(invalid("label is not a subgroup attribute")),
    }
    Ok(())
}

/// Generates all three splits; deterministic in `config.seed`.
pub fn synth_scenario(config: &ScenarioConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let subgroups = config.subgroups();
    let d = config.dims;

    let modal = |dim: usize, sep: f64, rng: &mut ChaCha8Rng| Modal {
        means: Class::ALL.iter().map(|_| unit_vec(rng, dim).into_iter().map(|v| v * sep).collect()).collect(),
        offsets: subgroups
            .iter()
            .map(|s| {
                let u = unit_vec(rng, dim);
                (s.clone(), u.into_iter().map(|v| v * config.subgroup_offset).collect())
            })
            .collect(),
    };
    let ling = modal(d.linguistic, config.separation_linguistic, &mut rng);
    let acou = modal(d.acoustic, config.separation_acoustic, &mut rng);

    let bias_for = |sub: &str, m: Modality| -> (f64, f64) {
        config
            .bias
            .iter()
            .filter(|b| b.subgroup == sub && b.modality == m)
            .fold((1.0, 1.0), |(n, s), b| (n * b.noise_factor, s * b.separation_scale))
    };

    let draw = |rng: &mut ChaCha8Rng, m: &Modal, modality: Modality, label: Class, sub: &str| -> Vec<f64> {
        let (nf, ss) = bias_for(sub, modality);
        let off = &m.offsets[sub];
        m.means[label.index()]
            .iter()
            .zip(off)
            .map(|(mu, o)| mu * ss + o + config.noise * nf * std_normal(rng))
            .collect()
    };

    let stack = |rng: &mut ChaCha8Rng, x: &[f64]| -> Vec<Vec<f64>> {
        (0..LAYERS)
            .map(|i| {
                let s = layer_scale(i);
                let mut pooled = vec![0.0; x.len()];
                for _ in 0..d.frames {
                    for (p, v) in pooled.iter_mut().zip(x) {
                        *p += s * v + config.frame_noise * std_normal(rng);
                    }
                }
                pooled.iter_mut().for_each(|p| *p /= d.frames as f64);
                pooled
            })
            .collect()
    };

    let mut splits: Vec<Vec<Sample>> = Vec::new();
    for split in Split::ALL {
        let mut out = Vec::new();
        for cell in &config.cells {
            let n = match split {
                Split::Train => cell.n_train,
                Split::Val => cell.n_val,
                Split::Test => cell.n_test,
            };
            let sub_idx = subgroups.iter().position(|s| *s == cell.subgroup).expect("subgroup listed");
            for _ in 0..n {
                let mut record = SubjectRecord {
                    subject_id: String::new(),
                    gender: *Gender::ALL.choose(&mut rng).expect("non-empty"),
                    age_years: None,
                    age_group: *AgeGroup::ALL.choose(&mut rng).expect("non-empty"),
                    education: Some(*Education::ALL.choose(&mut rng).expect("non-empty")),
                    language: *Language::ALL.choose(&mut rng).expect("non-empty"),
                    label: cell.label,
                };
                record.age_years = Some(record.age_group.representative_age());
                set_attribute(&mut record, config.attribute, &cell.subgroup)?;
                let x_l = draw(&mut rng, &ling, Modality::Linguistic, cell.label, &cell.subgroup);
                let x_a = draw(&mut rng, &acou, Modality::Acoustic, cell.label, &cell.subgroup);
                let (enc, dec) = if d.linguistic == d.acoustic {
                    (stack(&mut rng, &x_a), stack(&mut rng, &x_l))
                } else {
                    (Vec::new(), Vec::new())
                };
                out.push(Sample {
                    record,
                    subgroup: sub_idx,
                    x_l,
                    x_a,
                    enc,
                    dec,
                });
            }
        }
        for (i, s) in out.iter_mut().enumerate() {
            s.record.subject_id = format!("{}-{i:05}", split.as_str());
        }
        splits.push(out);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset {
        name: config.name.clone(),
        attribute: config.attribute,
        subgroups,
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_are_deterministic() {
        for name in PRESETS {
            let cfg = ScenarioConfig::preset(name).unwrap();
            cfg.validate().unwrap();
        }
        let cfg = ScenarioConfig::preset("age-bias-v1").unwrap();
        let a = synth_scenario(&cfg).unwrap();
        let b = synth_scenario(&cfg).unwrap();
        assert_eq!(a, b);
        let n: usize = cfg.cells.iter().map(|c| c.n_train).sum();
        assert_eq!(a.train.len(), n);
        assert_eq!(a.subgroups, vec!["a46_65", "a66_80", "a80_plus"]);
        assert!(a.train.iter().all(|s| s.enc.len() == LAYERS && s.dec.len() == LAYERS));
    }

    #[test]
    fn one_per_cell_is_valid() {
        let mut cfg = ScenarioConfig::preset("null").unwrap();
        for c in &mut cfg.cells {
            c.n_train = 1;
            c.n_val = 1;
            c.n_test = 1;
        }
        let d = synth_scenario(&cfg).unwrap();
        assert_eq!(d.train.len(), 9);
        assert_eq!(d.test.len(), 9);
    }

    #[test]
    fn rejects_bad_bias() {
        let mut cfg = ScenarioConfig::preset("age-bias-v1").unwrap();
        cfg.bias[0].noise_factor = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = ScenarioConfig::preset("null").unwrap();
        cfg.cells[0].n_train = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attribute_and_ids() {
        let d = synth_scenario(&ScenarioConfig::preset("null").unwrap()).unwrap();
        for s in &d.test {
            assert_eq!(s.record.age_group.as_str(), d.subgroups[s.subgroup]);
            assert!(s.record.subject_id.starts_with("test-"));
        }
    }
}
