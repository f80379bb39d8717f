//! Minibatch gradient descent over a synthetic dataset.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::objective::{attach_adversary, batch_gradients, batch_losses, forward_sample, AdversaryConfig};
use super::scenario::{Dataset, Sample};
use super::{agf, lwf, ModelKind, ParamSet, Role};
use crate::domain::Probs;
use crate::error::{invalid, Error, Result};
use crate::ingest::{argmax_class, PredictionSet};
use crate::par::derive_seed;
use crate::reweight::{TprObservation, TprTracker, WeightVector, DEFAULT_TPR_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum Weighting {
    None,
    /// Fixed per-subject weights, e.g. from frequency reweighting.
    Static { weights: WeightVector },
    /// `1 / max(TPR, epsilon)` per (subgroup, class), refreshed every
    /// `update_period` batches (default: once per epoch).
    DynamicTpr {
        epsilon: f64,
        update_period: Option<usize>,
    },
}

impl Weighting {
    pub fn dynamic() -> Weighting {
        Weighting::DynamicTpr {
            epsilon: DEFAULT_TPR_FLOOR,
            update_period: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate of the linguistic projection (AGF only).
    pub lr_linguistic: f64,
    pub weighting: Weighting,
    pub adversary: Option<AdversaryConfig>,
    pub seed: u64,
}

impl TrainConfig {
    /// 15 epochs for AGF, 5 for LWF, batch size 4, hidden width 128.
    pub fn new(kind: ModelKind, seed: u64) -> TrainConfig {
        TrainConfig {
            kind,
            hidden: 128,
            epochs: match kind {
                ModelKind::Agf => 15,
                ModelKind::Lwf => 5,
            },
            batch_size: 4,
            lr: 0.005,
            lr_linguistic: 0.005,
            weighting: Weighting::None,
            adversary: None,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(invalid("hidden width and batch size must be positive"));
        }
        for lr in [self.lr, self.lr_linguistic] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(invalid(format!("learning rate {lr} must be finite and non-negative")));
            }
        }
        if let Some(a) = &self.adversary {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Losses over the whole training split after the epoch, in fixed order.
    pub cls_loss: f64,
    pub adv_loss: f64,
    pub total_loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamSet,
    pub history: Vec<EpochStats>,
    pub val: PredictionSet,
    pub test: PredictionSet,
}

/// Fresh parameters sized for `data`.
pub fn init_params(data: &Dataset, cfg: &TrainConfig) -> Result<ParamSet> {
    if data.train.is_empty() {
        return Err(invalid("training split is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0));
    let mut p = match cfg.kind {
        ModelKind::Agf => agf::init(
            agf::AgfDims {
                linguistic: data.linguistic_dim(),
                acoustic: data.acoustic_dim(),
                hidden: cfg.hidden,
            },
            &mut rng,
        ),
        ModelKind::Lwf => {
            let width = data.train[0].enc.first().map_or(0, Vec::len);
            if width == 0 {
                return Err(invalid("dataset has no layer stacks (linguistic and acoustic dims differ)"));
            }
            lwf::init(lwf::LwfDims { width, hidden: cfg.hidden }, &mut rng)
        }
    };
    if cfg.adversary.is_some() {
        attach_adversary(&mut p, data.subgroups.len(), &mut rng);
    }
    Ok(p)
}

fn static_weight(w: &WeightVector, s: &Sample) -> Result<f64> {
    w.get(&s.record.subject_id)
        .ok_or_else(|| invalid(format!("no weight for {}", s.record.subject_id)))
}

fn sample_weight(weighting: &Weighting, tracker: Option<&TprTracker>, data: &Dataset, s: &Sample) -> Result<f64> {
    match weighting {
        Weighting::None => Ok(1.0),
        Weighting::Static { weights } => static_weight(weights, s),
        Weighting::DynamicTpr { .. } => Ok(tracker
            .expect("tracker exists for dynamic weighting")
            .weight(&data.subgroups[s.subgroup], s.label())),
    }
}

pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    let params = init_params(data, cfg)?;
    train_from(data, cfg, params)
}

/// Trains starting from the given parameters.
pub fn train_from(data: &Dataset, cfg: &TrainConfig, mut params: ParamSet) -> Result<TrainOutput> {
    cfg.validate()?;
    if params.kind != cfg.kind {
        return Err(invalid("parameter kind does not match the training config"));
    }
    let ids = |v: &[Sample]| v.iter().map(|s| s.record.subject_id.clone()).collect::<std::collections::BTreeSet<_>>();
    let (tr, va, te) = (ids(&data.train), ids(&data.val), ids(&data.test));
    if !tr.is_disjoint(&va) || !tr.is_disjoint(&te) || !va.is_disjoint(&te) {
        return Err(invalid("scenario splits overlap"));
    }

    let lambda = cfg.adversary.map_or(0.0, |a| a.lambda);
    let n_batches = data.train.len().div_ceil(cfg.batch_size);
    let mut tracker = match &cfg.weighting {
        Weighting::DynamicTpr { epsilon, update_period } => Some(TprTracker::new(*epsilon, update_period.unwrap_or(n_batches))?),
        _ => None,
    };
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let weights = batch
                .iter()
                .map(|s| sample_weight(&cfg.weighting, tracker.as_ref(), data, s))
                .collect::<Result<Vec<_>>>()?;
            let out = batch_gradients(&params, &batch, &weights, lambda).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            for (t, g) in params.tensors.iter_mut().zip(&out.grads.tensors) {
                let lr = if t.role == Role::LinguisticEncoder { cfg.lr_linguistic } else { cfg.lr };
                for (v, d) in t.data.iter_mut().zip(&g.data) {
                    *v -= lr * d;
                }
            }
            if let Some(tr) = tracker.as_mut() {
                let obs: Vec<TprObservation> = batch
                    .iter()
                    .zip(&out.correct)
                    .map(|(s, &correct)| TprObservation {
                        subgroup: &data.subgroups[s.subgroup],
                        class: s.label(),
                        correct,
                    })
                    .collect();
                tr.update(&obs);
                tr.tick();
            }
        }
        if !params.all_finite() {
            return Err(Error::Numerical(format!("parameters diverged in epoch {epoch}")));
        }
        history.push(epoch_stats(&params, data, cfg, tracker.as_ref(), epoch, lambda)?);
    }

    let val = predict_set(&params, &data.val, cfg.seed)?;
    let test = predict_set(&params, &data.test, cfg.seed)?;
    Ok(TrainOutput { params, history, val, test })
}

fn epoch_stats(
    p: &ParamSet,
    data: &Dataset,
    cfg: &TrainConfig,
    tracker: Option<&TprTracker>,
    epoch: usize,
    lambda: f64,
) -> Result<EpochStats> {
    let all: Vec<&Sample> = data.train.iter().collect();
    let weights = all
        .iter()
        .map(|s| sample_weight(&cfg.weighting, tracker, data, s))
        .collect::<Result<Vec<_>>>()?;
    let losses = batch_losses(p, &all, &weights, lambda)?;
    if !losses.total.is_finite() {
        return Err(Error::Numerical(format!("training loss is {} after epoch {epoch}", losses.total)));
    }
    let probs = predict(p, &data.train)?;
    let correct = probs
        .iter()
        .zip(&data.train)
        .filter(|(pr, s)| argmax_class(pr) == s.label())
        .count();
    Ok(EpochStats {
        epoch,
        cls_loss: losses.cls,
        adv_loss: losses.adv,
        total_loss: losses.total,
        accuracy: correct as f64 / data.train.len() as f64,
    })
}

pub fn predict(p: &ParamSet, samples: &[Sample]) -> Result<Vec<Probs>> {
    samples.iter().map(|s| forward_sample(p, s).map(|f| *f.probs())).collect()
}

pub fn predict_set(p: &ParamSet, samples: &[Sample], seed: u64) -> Result<PredictionSet> {
    let mut set = PredictionSet::new(seed);
    for (s, probs) in samples.iter().zip(predict(p, samples)?) {
        set.insert(s.record.subject_id.clone(), &probs)?;
    }
    Ok(set)
}

pub const PARAMS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
}

/// Sidecar describing a parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub version: u32,
    pub kind: ModelKind,
    pub dtype: String,
    pub tensors: Vec<TensorMeta>,
}

/// Writes little-endian f64 values to `path` and metadata to `<path>.json`.
pub fn write_params(p: &ParamSet, path: &Path) -> Result<()> {
    let mut blob = Vec::with_capacity(p.len() * 8);
    for t in &p.tensors {
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&blob))
        .map_err(|e| Error::io(path, e))?;
    let meta = ParamsMeta {
        version: PARAMS_FORMAT_VERSION,
        kind: p.kind,
        dtype: "f64le".into(),
        tensors: p
            .tensors
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                role: t.role,
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    let side = sidecar(path);
    let json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(side, e))
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let side = sidecar(path);
    let meta: ParamsMeta = serde_json::from_str(&std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?)?;
    if meta.version != PARAMS_FORMAT_VERSION || meta.dtype != "f64le" {
        return Err(invalid(format!("unsupported parameter format v{} {}", meta.version, meta.dtype)));
    }
    let mut blob = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| Error::io(path, e))?;
    let total: usize = meta.tensors.iter().map(|t| t.rows * t.cols).sum();
    if blob.len() != total * 8 {
        return Err(invalid(format!("parameter blob has {} bytes, expected {}", blob.len(), total * 8)));
    }
    let mut values = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let tensors = meta
        .tensors
        .into_iter()
        .map(|m| super::Tensor {
            data: values.by_ref().take(m.rows * m.cols).collect(),
            name: m.name,
            role: m.role,
            rows: m.rows,
            cols: m.cols,
        })
        .collect();
    Ok(ParamSet { kind: meta.kind, tensors })
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
