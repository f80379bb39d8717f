//! How much each modality contributes after training.

use serde::{Deserialize, Serialize};

use super::lwf::{self, LAYERS};
use super::scenario::Sample;
use super::{agf, ModelKind, ParamSet};
use crate::error::Result;

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgfModalityReport {
    pub n: usize,
    pub mean_alpha_linguistic: f64,
    pub mean_alpha_acoustic: f64,
    /// Population variance of the per-sample linguistic weight.
    pub variance: f64,
    /// Counts of `alpha_L` in equal-width bins over [0, 1].
    pub histogram: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwfModalityReport {
    /// The single encoder/decoder mixing coefficient.
    pub alpha: f64,
    pub encoder_layer_weights: [f64; LAYERS],
    pub decoder_layer_weights: [f64; LAYERS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum ModalityReport {
    Agf(AgfModalityReport),
    Lwf(LwfModalityReport),
}

pub fn modality_weight_report(p: &ParamSet, samples: &[Sample]) -> Result<ModalityReport> {
    match p.kind {
        ModelKind::Agf => {
            let alphas = samples
                .iter()
                .map(|s| agf::forward(p, &s.x_l, &s.x_a).map(|f| f.alpha[0]))
                .collect::<Result<Vec<_>>>()?;
            let n = alphas.len();
            let mean = if n == 0 { 0.0 } else { alphas.iter().sum::<f64>() / n as f64 };
            let variance = if n == 0 {
                0.0
            } else {
                alphas.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64
            };
            let mut histogram = vec![0u64; HISTOGRAM_BINS];
            for a in &alphas {
                let bin = ((a * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
                histogram[bin] += 1;
            }
            Ok(ModalityReport::Agf(AgfModalityReport {
                n,
                mean_alpha_linguistic: mean,
                mean_alpha_acoustic: if n == 0 { 0.0 } else { 1.0 - mean },
                variance,
                histogram,
            }))
        }
        ModelKind::Lwf => {
            let (e, d) = lwf::layer_weights(p);
            Ok(ModalityReport::Lwf(LwfModalityReport {
                alpha: lwf::alpha(p),
                encoder_layer_weights: e,
                decoder_layer_weights: d,
            }))
        }
    }
}
