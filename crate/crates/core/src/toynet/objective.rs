//! Losses, the subgroup adversary and minibatch gradients.
//!
//! The adversary is a linear layer from the shared representation to
//! subgroup logits. It minimizes its own cross-entropy; the encoder receives
//! that gradient reversed and scaled by `lambda`, so together they follow
//! `L_total = L_cls - lambda * L_adv`. The reversal is applied to the encoder
//! parameter gradients after backpropagation, which makes the reversed
//! gradient exactly `-lambda` times the unreversed one.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agf::{self, AgfForward};
use super::lwf::{self, LwfForward};
use super::scenario::Sample;
use super::{affine, affine_backward, grl_grad, softmax, ModelKind, ParamSet, Role, Tensor};
use crate::domain::{Class, Probs};
use crate::error::{invalid, Error, Result};
use crate::ingest::validate_probs;

pub const DEFAULT_LAMBDA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdversaryConfig {
    pub lambda: f64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig { lambda: DEFAULT_LAMBDA }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        Ok(())
    }
}

/// Width of the representation the adversary reads.
pub fn representation_dim(p: &ParamSet) -> usize {
    match p.kind {
        ModelKind::Agf => agf::dims(p).hidden,
        ModelKind::Lwf => lwf::dims(p).width,
    }
}

/// Appends a randomly initialized adversary with `n_subgroups` outputs.
pub fn attach_adversary<R: Rng + ?Sized>(p: &mut ParamSet, n_subgroups: usize, rng: &mut R) {
    let r = representation_dim(p);
    p.tensors.retain(|t| t.role != Role::Adversary);
    p.tensors.push(Tensor::random("w_adv", Role::Adversary, n_subgroups, r, rng));
    p.tensors.push(Tensor::zeros("b_adv", Role::Adversary, n_subgroups, 1));
}

fn adversary(p: &ParamSet) -> Option<(usize, usize)> {
    let n = p.tensors.len();
    (n >= 2 && p.tensors[n - 2].role == Role::Adversary).then(|| (n - 2, n - 1))
}

/// `-ln p`, floored so a zero probability gives a large finite loss.
pub fn cross_entropy(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).ln()
}

/// `mean_i w_i CE(class_i) - lambda * mean_i CE(adv_i)`.
///
/// Weights default to 1. Adversary rows may be omitted when `lambda` is 0.
pub fn total_loss(
    class_probs: &[Probs],
    labels: &[Class],
    adv_probs: Option<&[Vec<f64>]>,
    subgroups: &[usize],
    lambda: f64,
    sample_weights: Option<&[f64]>,
) -> Result<f64> {
    let n = class_probs.len();
    if labels.len() != n || sample_weights.is_some_and(|w| w.len() != n) {
        return Err(invalid("class probabilities, labels and weights must have equal length"));
    }
    if n == 0 {
        return Err(invalid("empty batch"));
    }
    let mut cls = 0.0;
    for (i, p) in class_probs.iter().enumerate() {
        validate_probs(p)?;
        let w = sample_weights.map_or(1.0, |w| w[i]);
        cls += w * cross_entropy(p[labels[i].index()]);
    }
    let cls = cls / n as f64;
    let adv = match adv_probs {
        None if lambda == 0.0 => 0.0,
        None => return Err(invalid("adversary probabilities required when lambda > 0")),
        Some(rows) => {
            if rows.len() != n || subgroups.len() != n {
                return Err(invalid("adversary rows and subgroups must match the batch"));
            }
            let mut s = 0.0;
            for (row, &g) in rows.iter().zip(subgroups) {
                let sum: f64 = row.iter().sum();
                if g >= row.len() || row.iter().any(|v| !(0.0..=1.0).contains(v)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(invalid(format!("invalid adversary probability row {row:?}")));
                }
                s += cross_entropy(row[g]);
            }
            s / n as f64
        }
    };
    Ok(cls - lambda * adv)
}

/// Forward state for one sample of either architecture.
#[derive(Debug, Clone)]
pub enum Pass {
    Agf(AgfForward),
    Lwf(LwfForward),
}

impl Pass {
    pub fn probs(&self) -> &Probs {
        match self {
            Pass::Agf(f) => &f.probs,
            Pass::Lwf(f) => &f.probs,
        }
    }

    /// The representation an adversary sees.
    pub fn representation(&self) -> &[f64] {
        match self {
            Pass::Agf(f) => &f.z,
            Pass::Lwf(f) => &f.h,
        }
    }
}

pub fn forward_sample(p: &ParamSet, s: &Sample) -> Result<Pass> {
    Ok(match p.kind {
        ModelKind::Agf => Pass::Agf(agf::forward(p, &s.x_l, &s.x_a)?),
        ModelKind::Lwf => Pass::Lwf(lwf::forward(p, &s.enc, &s.dec)?),
    })
}

/// Adversary subgroup probabilities for one representation.
pub fn adversary_probs(p: &ParamSet, rep: &[f64]) -> Option<Vec<f64>> {
    let (w, b) = adversary(p)?;
    Some(softmax(&affine(&p.tensors[w], &p.tensors[b], rep)))
}

/// Class head and encoder backward for a gradient on the class logits.
fn class_backward(p: &ParamSet, pass: &Pass, g_logits: &[f64], grads: &mut ParamSet) {
    match pass {
        Pass::Agf(f) => {
            let up = agf::head_backward(p, f, g_logits, grads);
            agf::encoder_backward(p, f, &up, grads);
        }
        Pass::Lwf(f) => {
            let g_h = lwf::head_backward(p, f, g_logits, grads);
            lwf::encoder_backward(f, &g_h, grads);
        }
    }
}

/// Encoder backward for a gradient on the representation.
fn representation_backward(p: &ParamSet, pass: &Pass, g_rep: &[f64], grads: &mut ParamSet) {
    match pass {
        Pass::Agf(f) => agf::encoder_backward(p, f, &agf::Upstream::from_z(f, g_rep), grads),
        Pass::Lwf(f) => lwf::encoder_backward(f, g_rep, grads),
    }
}

fn one_hot_delta(probs: &[f64], target: usize, scale: f64) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(k, p)| scale * (p - if k == target { 1.0 } else { 0.0 }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct BatchGradients {
    /// What the optimizer applies: class-loss gradients everywhere, plus the
    /// reversed adversary gradient on encoder tensors and the plain adversary
    /// gradient on adversary tensors.
    pub grads: ParamSet,
    /// `dL_adv/dtheta` on the encoder tensors, before reversal.
    pub adversary_encoder: Option<ParamSet>,
    /// The reversed version actually added to `grads`.
    pub reversed_encoder: Option<ParamSet>,
    pub cls_loss: f64,
    pub adv_loss: f64,
    pub total_loss: f64,
    /// Whether each sample's argmax matched its label.
    pub correct: Vec<bool>,
}

/// Gradients of one minibatch.
///
/// `weights` are per-sample class-loss weights; `lambda` is ignored when
/// the parameters carry no adversary.
pub fn batch_gradients(p: &ParamSet, batch: &[&Sample], weights: &[f64], lambda: f64) -> Result<BatchGradients> {
    if batch.is_empty() || weights.len() != batch.len() {
        return Err(invalid("minibatch and weights must be non-empty and of equal length"));
    }
    let bsz = batch.len() as f64;
    let adv = adversary(p);
    let mut grads = p.zeros_like();
    let mut adv_enc = adv.map(|_| p.zeros_like());
    let (mut cls_loss, mut adv_loss) = (0.0, 0.0);
    let mut correct = Vec::with_capacity(batch.len());

    for (s, &w) in batch.iter().zip(weights) {
        let pass = forward_sample(p, s)?;
        let probs = *pass.probs();
        let y = s.label().index();
        cls_loss += w * cross_entropy(probs[y]);
        correct.push(crate::ingest::argmax_class(&probs).index() == y);
        class_backward(p, &pass, &one_hot_delta(&probs, y, w / bsz), &mut grads);

        if let (Some((wi, bi)), Some(enc)) = (adv, adv_enc.as_mut()) {
            let rep = pass.representation();
            let q = adversary_probs(p, rep).expect("adversary present");
            if s.subgroup >= q.len() {
                return Err(invalid(format!("subgroup index {} outside adversary range", s.subgroup)));
            }
            adv_loss += cross_entropy(q[s.subgroup]);
            let g = one_hot_delta(&q, s.subgroup, 1.0 / bsz);
            let (lo, hi) = grads.tensors.split_at_mut(bi);
            let g_rep = affine_backward(&p.tensors[wi], rep, &g, &mut lo[wi], &mut hi[0]);
            representation_backward(p, &pass, &g_rep, enc);
        }
    }
    cls_loss /= bsz;
    adv_loss /= bsz;

    let reversed = adv_enc.as_ref().map(|enc| reverse(enc, lambda));
    if let Some(rev) = &reversed {
        for (t, r) in grads.tensors.iter_mut().zip(&rev.tensors) {
            if t.role.is_encoder() {
                for (g, v) in t.data.iter_mut().zip(&r.data) {
                    *g += v;
                }
            }
        }
    }
    let effective_lambda = if adv.is_some() { lambda } else { 0.0 };
    let total = cls_loss - effective_lambda * adv_loss;
    if !total.is_finite() || !grads.all_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss or gradient (class loss {cls_loss}, adversary loss {adv_loss})"
        )));
    }
    Ok(BatchGradients {
        grads,
        adversary_encoder: adv_enc,
        reversed_encoder: reversed,
        cls_loss,
        adv_loss,
        total_loss: total,
        correct,
    })
}

/// The gradient reversal layer applied to encoder tensors; other tensors zero.
pub fn reverse(g: &ParamSet, lambda: f64) -> ParamSet {
    let mut out = g.zeros_like();
    for (o, t) in out.tensors.iter_mut().zip(&g.tensors) {
        if t.role.is_encoder() {
            o.data = grl_grad(&t.data, lambda);
        }
    }
    out
}

/// `dL_adv/dtheta` for the encoder tensors alone, without any reversal.
pub fn adversary_encoder_gradient(p: &ParamSet, batch: &[&Sample]) -> Result<ParamSet> {
    let (wi, bi) = adversary(p).ok_or_else(|| invalid("parameters carry no adversary"))?;
    let bsz = batch.len() as f64;
    let mut enc = p.zeros_like();
    let mut scratch = p.zeros_like();
    for s in batch {
        let pass = forward_sample(p, s)?;
        let rep = pass.representation();
        let q = adversary_probs(p, rep).expect("adversary present");
        let g = one_hot_delta(&q, s.subgroup, 1.0 / bsz);
        let (lo, hi) = scratch.tensors.split_at_mut(bi);
        let g_rep = affine_backward(&p.tensors[wi], rep, &g, &mut lo[wi], &mut hi[0]);
        representation_backward(p, &pass, &g_rep, &mut enc);
    }
    for t in &mut enc.tensors {
        if !t.role.is_encoder() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(enc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Losses {
    pub cls: f64,
    pub adv: f64,
    pub total: f64,
}

/// Forward-only losses matching [`batch_gradients`].
pub fn batch_losses(p: &ParamSet, batch: &[&Sample], weights: &[f64], lambda: f64) -> Result<Losses> {
    if batch.is_empty() || weights.len() != batch.len() {
        return Err(invalid("minibatch and weights must be non-empty and of equal length"));
    }
    let (mut cls, mut adv) = (0.0, 0.0);
    for (s, w) in batch.iter().zip(weights) {
        let pass = forward_sample(p, s)?;
        cls += w * cross_entropy(pass.probs()[s.label().index()]);
        if let Some(q) = adversary_probs(p, pass.representation()) {
            adv += cross_entropy(q[s.subgroup]);
        }
    }
    let n = batch.len() as f64;
    let (cls, adv) = (cls / n, adv / n);
    let lambda = if adversary(p).is_some() { lambda } else { 0.0 };
    Ok(Losses {
        cls,
        adv,
        total: cls - lambda * adv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_zero_is_weighted_ce() {
        let p = [[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]];
        let y = [Class::Control, Class::Ad];
        let w = [2.0, 0.5];
        let got = total_loss(&p, &y, None, &[0, 1], 0.0, Some(&w)).unwrap();
        let want = (2.0 * -(0.7f64).ln() + 0.5 * -(0.6f64).ln()) / 2.0;
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_zero_loss() {
        let p = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let y = [Class::Control, Class::Ad];
        assert_eq!(total_loss(&p, &y, None, &[0, 0], 0.0, None).unwrap(), 0.0);
    }

    #[test]
    fn two_sample_hand_case() {
        let p = [[0.5, 0.25, 0.25], [0.2, 0.6, 0.2]];
        let y = [Class::Mci, Class::Mci];
        let q = vec![vec![0.9, 0.1], vec![0.4, 0.6]];
        let g = [0, 1];
        let got = total_loss(&p, &y, Some(&q), &g, 0.3, None).unwrap();
        let cls = (-(0.25f64).ln() - (0.6f64).ln()) / 2.0;
        let adv = (-(0.9f64).ln() - (0.6f64).ln()) / 2.0;
        assert!((got - (cls - 0.3 * adv)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_rows() {
        let p = [[0.5, 0.6, 0.25]];
        assert!(total_loss(&p, &[Class::Ad], None, &[0], 0.0, None).is_err());
        assert!(total_loss(&[[0.5, 0.25, 0.25]], &[Class::Ad], None, &[0], 0.1, None).is_err());
    }
}
