//! Central finite differences against the analytic gradients.
//!
//! Encoder and class-head coordinates are compared with the derivative of
//! `L_total`; adversary coordinates with the derivative of the adversary's
//! own loss, which is what it descends.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::objective::{batch_gradients, batch_losses};
use super::scenario::Sample;
use super::{ParamSet, Role};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Mismatch>,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Checks every coordinate, or a seeded sample of `max_coords` of them.
pub fn finite_diff_check(
    params: &ParamSet,
    batch: &[&Sample],
    weights: &[f64],
    lambda: f64,
    h: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheck> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(invalid(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let analytic = batch_gradients(params, batch, weights, lambda)?.grads;
    let mut coords = params.coordinates();
    if let Some(k) = max_coords {
        if k < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, coords.len(), k).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let mut p = params.clone();
    let mut out = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for (ti, ei) in coords {
        let adversary = p.tensors[ti].role == Role::Adversary;
        let orig = p.tensors[ti].data[ei];
        let mut eval = |v: f64| -> Result<f64> {
            p.tensors[ti].data[ei] = v;
            let l = batch_losses(&p, batch, weights, lambda)?;
            Ok(if adversary { l.adv } else { l.total })
        };
        let plus = eval(orig + h)?;
        let minus = eval(orig - h)?;
        p.tensors[ti].data[ei] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.tensors[ti].data[ei];
        let err = relative_error(a, numeric);
        out.checked += 1;
        if err > out.max_rel_error || out.worst.is_none() {
            out.max_rel_error = out.max_rel_error.max(err);
            out.worst = Some(Mismatch {
                tensor: p.tensors[ti].name.clone(),
                index: ei,
                analytic: a,
                numeric,
            });
        }
    }
    Ok(out)
}
