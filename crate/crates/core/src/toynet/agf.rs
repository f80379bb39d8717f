//! Adaptive gating fusion.
//!
//! `h_m = tanh(W_m x_m + b_m)`, gate `alpha = softmax(W_g [h_L; h_A] + b_g)`,
//! shared scorer `o_m = W_o h_m + b_o`, output `softmax(alpha_L o_L + alpha_A o_A)`.

use rand::Rng;

use super::{affine, affine_backward, probs3, softmax, softmax_backward, tanh_vec, ModelKind, ParamSet, Role, Tensor};
use crate::domain::{Probs, NUM_CLASSES};
use crate::error::{invalid, Result};

pub const W_L: usize = 0;
pub const B_L: usize = 1;
pub const W_A: usize = 2;
pub const B_A: usize = 3;
pub const W_G: usize = 4;
pub const B_G: usize = 5;
pub const W_O: usize = 6;
pub const B_O: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgfDims {
    pub linguistic: usize,
    pub acoustic: usize,
    pub hidden: usize,
}

/// Random projections and scorer, gate at zero (so `alpha` starts at 0.5).
pub fn init<R: Rng + ?Sized>(dims: AgfDims, rng: &mut R) -> ParamSet {
    let h = dims.hidden;
    ParamSet {
        kind: ModelKind::Agf,
        tensors: vec![
            Tensor::random("w_l", Role::LinguisticEncoder, h, dims.linguistic, rng),
            Tensor::zeros("b_l", Role::LinguisticEncoder, h, 1),
            Tensor::random("w_a", Role::Encoder, h, dims.acoustic, rng),
            Tensor::zeros("b_a", Role::Encoder, h, 1),
            Tensor::zeros("w_g", Role::Encoder, 2, 2 * h),
            Tensor::zeros("b_g", Role::Encoder, 2, 1),
            Tensor::random("w_o", Role::ClassHead, NUM_CLASSES, h, rng),
            Tensor::zeros("b_o", Role::ClassHead, NUM_CLASSES, 1),
        ],
    }
}

pub fn dims(p: &ParamSet) -> AgfDims {
    AgfDims {
        linguistic: p.tensors[W_L].cols,
        acoustic: p.tensors[W_A].cols,
        hidden: p.tensors[W_L].rows,
    }
}

#[derive(Debug, Clone)]
pub struct AgfCache {
    pub x_l: Vec<f64>,
    pub x_a: Vec<f64>,
    pub h_l: Vec<f64>,
    pub h_a: Vec<f64>,
    pub o_l: Vec<f64>,
    pub o_a: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AgfForward {
    pub probs: Probs,
    /// `(alpha_L, alpha_A)`.
    pub alpha: [f64; 2],
    /// Gate-weighted hidden state, the representation seen by an adversary.
    pub z: Vec<f64>,
    pub cache: AgfCache,
}

pub fn forward(p: &ParamSet, x_l: &[f64], x_a: &[f64]) -> Result<AgfForward> {
    if p.kind != ModelKind::Agf {
        return Err(invalid("agf_forward called with non-AGF parameters"));
    }
    let d = dims(p);
    if x_l.len() != d.linguistic || x_a.len() != d.acoustic {
        return Err(invalid(format!(
            "AGF input dims ({}, {}) do not match parameters ({}, {})",
            x_l.len(),
            x_a.len(),
            d.linguistic,
            d.acoustic
        )));
    }
    let t = &p.tensors;
    let mut h_l = affine(&t[W_L], &t[B_L], x_l);
    tanh_vec(&mut h_l);
    let mut h_a = affine(&t[W_A], &t[B_A], x_a);
    tanh_vec(&mut h_a);
    let cat: Vec<f64> = h_l.iter().chain(&h_a).copied().collect();
    let gate = softmax(&affine(&t[W_G], &t[B_G], &cat));
    let alpha = [gate[0], gate[1]];
    let o_l = affine(&t[W_O], &t[B_O], &h_l);
    let o_a = affine(&t[W_O], &t[B_O], &h_a);
    let mixed: Vec<f64> = o_l.iter().zip(&o_a).map(|(l, a)| alpha[0] * l + alpha[1] * a).collect();
    let probs = probs3(&softmax(&mixed));
    let z = h_l.iter().zip(&h_a).map(|(l, a)| alpha[0] * l + alpha[1] * a).collect();
    Ok(AgfForward {
        probs,
        alpha,
        z,
        cache: AgfCache {
            x_l: x_l.to_vec(),
            x_a: x_a.to_vec(),
            h_l,
            h_a,
            o_l,
            o_a,
        },
    })
}

/// Gradient arriving at the encoder outputs: both hidden states and the gate.
#[derive(Debug, Clone)]
pub struct Upstream {
    pub g_h_l: Vec<f64>,
    pub g_h_a: Vec<f64>,
    pub g_alpha: [f64; 2],
}

impl Upstream {
    /// Pulls a gradient on `z = alpha_L h_L + alpha_A h_A` back to its inputs.
    pub fn from_z(fwd: &AgfForward, g_z: &[f64]) -> Upstream {
        let c = &fwd.cache;
        Upstream {
            g_h_l: g_z.iter().map(|g| fwd.alpha[0] * g).collect(),
            g_h_a: g_z.iter().map(|g| fwd.alpha[1] * g).collect(),
            g_alpha: [dot(g_z, &c.h_l), dot(g_z, &c.h_a)],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backward through the class scorer given `dL/dlogits` of the mixed scores.
pub fn head_backward(p: &ParamSet, fwd: &AgfForward, g_logits: &[f64], grads: &mut ParamSet) -> Upstream {
    let c = &fwd.cache;
    let g_o_l: Vec<f64> = g_logits.iter().map(|g| fwd.alpha[0] * g).collect();
    let g_o_a: Vec<f64> = g_logits.iter().map(|g| fwd.alpha[1] * g).collect();
    let g_alpha = [dot(g_logits, &c.o_l), dot(g_logits, &c.o_a)];
    let (gw, gb) = pair_mut(&mut grads.tensors, W_O, B_O);
    let g_h_l = affine_backward(&p.tensors[W_O], &c.h_l, &g_o_l, gw, gb);
    let g_h_a = affine_backward(&p.tensors[W_O], &c.h_a, &g_o_a, gw, gb);
    Upstream { g_h_l, g_h_a, g_alpha }
}

/// Backward through the gate and both projections.
pub fn encoder_backward(p: &ParamSet, fwd: &AgfForward, up: &Upstream, grads: &mut ParamSet) {
    let c = &fwd.cache;
    let h = c.h_l.len();
    let gate = [fwd.alpha[0], fwd.alpha[1]];
    let g_s = softmax_backward(&gate, &up.g_alpha);
    let cat: Vec<f64> = c.h_l.iter().chain(&c.h_a).copied().collect();
    let g_cat = {
        let (gw, gb) = pair_mut(&mut grads.tensors, W_G, B_G);
        affine_backward(&p.tensors[W_G], &cat, &g_s, gw, gb)
    };
    let g_pre_l: Vec<f64> = (0..h)
        .map(|i| (up.g_h_l[i] + g_cat[i]) * (1.0 - c.h_l[i] * c.h_l[i]))
        .collect();
    let g_pre_a: Vec<f64> = (0..h)
        .map(|i| (up.g_h_a[i] + g_cat[h + i]) * (1.0 - c.h_a[i] * c.h_a[i]))
        .collect();
    {
        let (gw, gb) = pair_mut(&mut grads.tensors, W_L, B_L);
        affine_backward(&p.tensors[W_L], &c.x_l, &g_pre_l, gw, gb);
    }
    let (gw, gb) = pair_mut(&mut grads.tensors, W_A, B_A);
    affine_backward(&p.tensors[W_A], &c.x_a, &g_pre_a, gw, gb);
}

pub(crate) fn pair_mut(t: &mut [Tensor], w: usize, b: usize) -> (&mut Tensor, &mut Tensor) {
    debug_assert!(w < b);
    let (lo, hi) = t.split_at_mut(b);
    (&mut lo[w], &mut hi[0])
}
