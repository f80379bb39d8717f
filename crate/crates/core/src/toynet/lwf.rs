//! Layer-weighted fusion.
//!
//! Softmax-weighted sums of seven encoder and seven decoder layers are mean
//! pooled over frames, blended as `H = alpha E + (1 - alpha) D` with
//! `alpha = sigmoid(a)`, then classified by a tanh hidden layer.
//!
//! Pooling commutes with the layer weighting, so samples can be stored as
//! per-layer pooled vectors; [`forward_layers`] accepts raw frame matrices.

use rand::Rng;

use super::agf::pair_mut;
use super::{affine, affine_backward, probs3, sigmoid, softmax, softmax_backward, tanh_vec, ModelKind, ParamSet, Role, Tensor};
use crate::domain::{Probs, NUM_CLASSES};
use crate::error::{invalid, Result};

pub const LAYERS: usize = 7;

pub const W_E: usize = 0;
pub const W_D: usize = 1;
pub const A: usize = 2;
pub const W_H: usize = 3;
pub const B_H: usize = 4;
pub const W_C: usize = 5;
pub const B_C: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LwfDims {
    /// Width of each layer's output.
    pub width: usize,
    pub hidden: usize,
}

/// Uniform layer weights, `alpha = 0.5`, random head.
pub fn init<R: Rng + ?Sized>(dims: LwfDims, rng: &mut R) -> ParamSet {
    ParamSet {
        kind: ModelKind::Lwf,
        tensors: vec![
            Tensor::zeros("w_e", Role::Encoder, LAYERS, 1),
            Tensor::zeros("w_d", Role::Encoder, LAYERS, 1),
            Tensor::zeros("a", Role::Encoder, 1, 1),
            Tensor::random("w_h", Role::ClassHead, dims.hidden, dims.width, rng),
            Tensor::zeros("b_h", Role::ClassHead, dims.hidden, 1),
            Tensor::random("w_c", Role::ClassHead, NUM_CLASSES, dims.hidden, rng),
            Tensor::zeros("b_c", Role::ClassHead, NUM_CLASSES, 1),
        ],
    }
}

pub fn dims(p: &ParamSet) -> LwfDims {
    LwfDims {
        width: p.tensors[W_H].cols,
        hidden: p.tensors[W_H].rows,
    }
}

pub fn layer_weights(p: &ParamSet) -> ([f64; LAYERS], [f64; LAYERS]) {
    let e = softmax(&p.tensors[W_E].data);
    let d = softmax(&p.tensors[W_D].data);
    let mut we = [0.0; LAYERS];
    let mut wd = [0.0; LAYERS];
    we.copy_from_slice(&e);
    wd.copy_from_slice(&d);
    (we, wd)
}

pub fn alpha(p: &ParamSet) -> f64 {
    sigmoid(p.tensors[A].data[0])
}

#[derive(Debug, Clone)]
pub struct LwfCache {
    pub enc: Vec<Vec<f64>>,
    pub dec: Vec<Vec<f64>>,
    pub e: Vec<f64>,
    pub d: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LwfForward {
    pub probs: Probs,
    pub enc_weights: [f64; LAYERS],
    pub dec_weights: [f64; LAYERS],
    pub alpha: f64,
    /// Fused representation `H`, the input of the head and of any adversary.
    pub h: Vec<f64>,
    pub cache: LwfCache,
}

fn mean_pool(frames: &[Vec<f64>], width: usize) -> Result<Vec<f64>> {
    if frames.is_empty() {
        return Err(invalid("layer has no frames"));
    }
    let mut out = vec![0.0; width];
    for f in frames {
        if f.len() != width {
            return Err(invalid(format!("frame width {} does not match {width}", f.len())));
        }
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    let n = frames.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Forward pass from raw per-layer frame matrices (`frames x width` each).
pub fn forward_layers(p: &ParamSet, enc: &[Vec<Vec<f64>>], dec: &[Vec<Vec<f64>>]) -> Result<LwfForward> {
    let w = dims(p).width;
    let pool = |side: &[Vec<Vec<f64>>]| side.iter().map(|l| mean_pool(l, w)).collect::<Result<Vec<_>>>();
    if enc.len() != LAYERS || dec.len() != LAYERS {
        return Err(invalid(format!(
            "LWF expects {LAYERS} encoder and {LAYERS} decoder layers, got {} and {}",
            enc.len(),
            dec.len()
        )));
    }
    forward(p, &pool(enc)?, &pool(dec)?)
}

/// Forward pass from mean-pooled layers.
pub fn forward(p: &ParamSet, enc: &[Vec<f64>], dec: &[Vec<f64>]) -> Result<LwfForward> {
    if p.kind != ModelKind::Lwf {
        return Err(invalid("lwf_forward called with non-LWF parameters"));
    }
    if enc.len() != LAYERS || dec.len() != LAYERS {
        return Err(invalid(format!(
            "LWF expects {LAYERS} encoder and {LAYERS} decoder layers, got {} and {}",
            enc.len(),
            dec.len()
        )));
    }
    let width = dims(p).width;
    if enc.iter().chain(dec).any(|l| l.len() != width) {
        return Err(invalid(format!("LWF layer width must be {width}")));
    }
    let (we, wd) = layer_weights(p);
    let mut e = vec![0.0; width];
    let mut d = vec![0.0; width];
    for i in 0..LAYERS {
        for j in 0..width {
            e[j] += we[i] * enc[i][j];
            d[j] += wd[i] * dec[i][j];
        }
    }
    let al = alpha(p);
    let h: Vec<f64> = e.iter().zip(&d).map(|(a, b)| al * a + (1.0 - al) * b).collect();
    let t = &p.tensors;
    let mut z = affine(&t[W_H], &t[B_H], &h);
    tanh_vec(&mut z);
    let probs = probs3(&softmax(&affine(&t[W_C], &t[B_C], &z)));
    Ok(LwfForward {
        probs,
        enc_weights: we,
        dec_weights: wd,
        alpha: al,
        h,
        cache: LwfCache {
            enc: enc.to_vec(),
            dec: dec.to_vec(),
            e,
            d,
            z,
        },
    })
}

/// Backward through the classification head; returns `dL/dH`.
pub fn head_backward(p: &ParamSet, fwd: &LwfForward, g_logits: &[f64], grads: &mut ParamSet) -> Vec<f64> {
    let c = &fwd.cache;
    let g_z = {
        let (gw, gb) = pair_mut(&mut grads.tensors, W_C, B_C);
        affine_backward(&p.tensors[W_C], &c.z, g_logits, gw, gb)
    };
    let g_pre: Vec<f64> = g_z.iter().zip(&c.z).map(|(g, z)| g * (1.0 - z * z)).collect();
    let (gw, gb) = pair_mut(&mut grads.tensors, W_H, B_H);
    affine_backward(&p.tensors[W_H], &fwd.h, &g_pre, gw, gb)
}

/// Backward from `dL/dH` into the layer logits and the fusion logit.
pub fn encoder_backward(fwd: &LwfForward, g_h: &[f64], grads: &mut ParamSet) {
    let c = &fwd.cache;
    let al = fwd.alpha;
    let g_alpha: f64 = g_h.iter().zip(c.e.iter().zip(&c.d)).map(|(g, (e, d))| g * (e - d)).sum();
    grads.tensors[A].data[0] += g_alpha * al * (1.0 - al);
    let side = |layers: &[Vec<f64>], weights: &[f64; LAYERS], scale: f64| -> Vec<f64> {
        let g_w: Vec<f64> = layers
            .iter()
            .map(|l| scale * l.iter().zip(g_h).map(|(x, g)| x * g).sum::<f64>())
            .collect();
        softmax_backward(weights, &g_w)
    };
    let ge = side(&c.enc, &fwd.enc_weights, al);
    let gd = side(&c.dec, &fwd.dec_weights, 1.0 - al);
    for i in 0..LAYERS {
        grads.tensors[W_E].data[i] += ge[i];
        grads.tensors[W_D].data[i] += gd[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::toynet::std_normal;
    
    fn stack(rng: &mut ChaCha8Rng, frames: usize, width: usize) -> Vec<Vec<Vec<f64>>> {
        (0..LAYERS)
            .map(|_| {
                (0..frames)
                    .map(|_| (0..width).map(|_| std_normal(rng)).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn uniform_layer_weights_and_half_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init(LwfDims { width: 4, hidden: 6 }, &mut rng);
        let (enc, dec) = (stack(&mut rng, 3, 4), stack(&mut rng, 5, 4));
        let f = forward_layers(&p, &enc, &dec).unwrap();
        for w in f.enc_weights.iter().chain(&f.dec_weights) {
            assert!((w - 1.0 / 7.0).abs() < 1e-15);
        }
        assert_eq!(f.alpha, 0.5);
        for j in 0..4 {
            assert!((f.h[j] - 0.5 * (f.cache.e[j] + f.cache.d[j])).abs() < 1e-15);
        }
        assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_stacks_make_alpha_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = init(LwfDims { width: 5, hidden: 4 }, &mut rng);
        let s = stack(&mut rng, 2, 5);
        let base = forward_layers(&p, &s, &s).unwrap();
        for a in [-3.0, -0.2, 1.7, 6.0] {
            p.tensors[A].data[0] = a;
            let f = forward_layers(&p, &s, &s).unwrap();
            for j in 0..5 {
                assert!((f.h[j] - base.h[j]).abs() < 1e-12);
            }
            for c in 0..3 {
                assert!((f.probs[c] - base.probs[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_commutes_with_layer_weighting() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = init(LwfDims { width: 4, hidden: 3 }, &mut rng);
        for v in p.tensors.iter_mut().flat_map(|t| t.data.iter_mut()) {
            *v += rng.gen_range(-1.0..1.0);
        }
        let (enc, dec) = (stack(&mut rng, 6, 4), stack(&mut rng, 6, 4));
        let f = forward_layers(&p, &enc, &dec).unwrap();
        // Weight the layers frame by frame, then pool.
        for (side, weights, pooled) in [(&enc, &f.enc_weights, &f.cache.e), (&dec, &f.dec_weights, &f.cache.d)] {
            for j in 0..4 {
                let per_frame: f64 = (0..6)
                    .map(|t| (0..LAYERS).map(|l| weights[l] * side[l][t][j]).sum::<f64>())
                    .sum::<f64>()
                    / 6.0;
                assert!((per_frame - pooled[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_layer_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init(LwfDims { width: 3, hidden: 2 }, &mut rng);
        let mut s = stack(&mut rng, 2, 3);
        let d = s.clone();
        s.pop();
        assert!(forward_layers(&p, &s, &d).is_err());
    }
}
