//! Desk-scale fusion heads with hand-written gradients.
//!
//! Two architectures stand in for the full models: adaptive gating fusion
//! (AGF), which mixes per-modality class scores with a per-sample softmax
//! gate, and layer-weighted fusion (LWF), which blends softmax-weighted
//! encoder and decoder layer stacks with one learnable coefficient. Both
//! share a parameter container whose tensors carry a [`Role`], so training,
//! gradient reversal and finite-difference checks can treat them uniformly.

pub mod agf;
pub mod experiment;
pub mod gradcheck;
pub mod lwf;
pub mod objective;
pub mod report;
pub mod scenario;
pub mod train;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Agf,
    Lwf,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "agf" => Ok(ModelKind::Agf),
            "lwf" => Ok(ModelKind::Lwf),
            other => Err(format!("unknown model kind {other:?} (expected agf or lwf)")),
        }
    }
}

/// Which part of the network a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Linguistic projection; trained with its own learning rate.
    LinguisticEncoder,
    /// Everything upstream of the shared representation.
    Encoder,
    ClassHead,
    Adversary,
}

impl Role {
    /// Parameters that receive the reversed adversarial gradient.
    pub fn is_encoder(self) -> bool {
        matches!(self, Role::LinguisticEncoder | Role::Encoder)
    }
}

/// A named row-major matrix (vectors have one column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, role: Role, rows: usize, cols: usize) -> Tensor {
        Tensor {
            name: name.to_string(),
            role,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Normal entries scaled by `sqrt(1 / cols)`.
    pub fn random<R: Rng + ?Sized>(name: &str, role: Role, rows: usize, cols: usize, rng: &mut R) -> Tensor {
        let scale = (1.0 / cols as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| scale * std_normal(rng))
            .collect();
        Tensor {
            name: name.to_string(),
            role,
            rows,
            cols,
            data,
        }
    }
}

/// All parameters of one network, in a fixed tensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub kind: ModelKind,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            kind: self.kind,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(&t.name, t.role, t.rows, t.cols))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_adversary(&self) -> bool {
        self.tensors.iter().any(|t| t.role == Role::Adversary)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Every scalar coordinate as `(tensor index, element index)`.
    pub fn coordinates(&self) -> Vec<(usize, usize)> {
        self.tensors
            .iter()
            .enumerate()
            .flat_map(|(ti, t)| (0..t.data.len()).map(move |e| (ti, e)))
            .collect()
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient reversal: the identity going forward, `-lambda * g` going back.
pub fn grl_forward(x: &[f64]) -> Vec<f64> {
    x.to_vec()
}

pub fn grl_grad(upstream: &[f64], lambda: f64) -> Vec<f64> {
    upstream.iter().map(|g| -lambda * g).collect()
}

pub(crate) fn tanh_vec(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// `W x + b` for row-major `W`.
pub(crate) fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(w.cols, x.len());
    (0..w.rows)
        .map(|r| {
            let row = &w.data[r * w.cols..(r + 1) * w.cols];
            b.data[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// Accumulates `g x^T` into `gw` and `g` into `gb`; returns `W^T g`.
pub(crate) fn affine_backward(
    w: &Tensor,
    x: &[f64],
    g: &[f64],
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Vec<f64> {
    let mut gx = vec![0.0; w.cols];
    for r in 0..w.rows {
        let gr = g[r];
        gb.data[r] += gr;
        let row = &w.data[r * w.cols..(r + 1) * w.cols];
        let grow = &mut gw.data[r * w.cols..(r + 1) * w.cols];
        for c in 0..w.cols {
            grow[c] += gr * x[c];
            gx[c] += row[c] * gr;
        }
    }
    gx
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Backward through softmax: `p * (g - <p, g>)`.
pub(crate) fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    p.iter().zip(g).map(|(pi, gi)| pi * (gi - dot)).collect()
}

pub(crate) fn probs3(v: &[f64]) -> [f64; NUM_CLASSES] {
    [v[0], v[1], v[2]]
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
