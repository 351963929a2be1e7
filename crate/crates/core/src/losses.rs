//! Lung-masked training losses: weighted binary cross-entropy and Dice.
//!
//! Only voxels inside the ROI (`roi == 1`) contribute; every gradient entry
//! outside the ROI is exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dice,
    #[serde(alias = "wBCE")]
    Wbce,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Wbce => "wBCE",
        }
    }
}

/// Prediction, truth and ROI over the same voxels.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub prob: &'a [f32],
    pub truth: &'a [f32],
    pub roi: &'a [f32],
    pub epsilon: f64,
}

impl<'a> LossBatch<'a> {
    pub fn new(prob: &'a [f32], truth: &'a [f32], roi: &'a [f32], epsilon: f64) -> Result<Self> {
        if prob.len() != truth.len() || prob.len() != roi.len() {
            return Err(Error::shape(format!(
                "loss inputs differ in size: {}, {}, {}",
                prob.len(),
                truth.len(),
                roi.len()
            )));
        }
        if truth.iter().chain(roi).any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::domain("truth and roi must be binary"));
        }
        Ok(LossBatch {
            prob,
            truth,
            roi,
            epsilon,
        })
    }

    fn roi_voxels(&self) -> Result<usize> {
        let n = self.roi.iter().filter(|&&r| r != 0.0).count();
        if n == 0 {
            return Err(Error::domain("empty ROI: loss undefined"));
        }
        Ok(n)
    }
}

/// Per-class weights and the class sizes they were derived from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub background: f64,
    pub airway: f64,
    /// `airway` as an exact fraction (numerator, denominator).
    pub airway_ratio: (usize, usize),
    /// |N_A|: truth = 1 inside the ROI.
    pub n_airway: usize,
    /// |N_B|: truth = 0 inside the ROI.
    pub n_background: usize,
}

/// `w_B = 1`, `w_A = |N_B| / |N_A|`; with no airway voxels `w_A = 0`, with no
/// background voxels `w_A = 1`.
pub fn class_weights(b: &LossBatch) -> ClassWeights {
    let (mut na, mut nb) = (0usize, 0usize);
    for (&g, &r) in b.truth.iter().zip(b.roi) {
        if r != 0.0 {
            if g != 0.0 {
                na += 1;
            } else {
                nb += 1;
            }
        }
    }
    let airway_ratio = if na == 0 {
        (0, 1)
    } else if nb == 0 {
        (1, 1)
    } else {
        (nb, na)
    };
    ClassWeights {
        background: 1.0,
        airway: airway_ratio.0 as f64 / airway_ratio.1 as f64,
        airway_ratio,
        n_airway: na,
        n_background: nb,
    }
}

/// Scalar loss value and its gradient w.r.t. `prob`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f32>,
}

/// `-(w_B Σ_B log(1-p) + w_A Σ_A log p) / |N_L|`.
pub fn wbce_loss(b: &LossBatch) -> Result<LossOutput> {
    let n_roi = b.roi_voxels()? as f64;
    let w = class_weights(b);
    let (lo, hi) = (PROB_CLAMP, 1.0 - PROB_CLAMP);
    let mut sum = 0f64;
    let mut grad = vec![0f32; b.prob.len()];
    for (i, ((&p, &g), &r)) in b.prob.iter().zip(b.truth).zip(b.roi).enumerate() {
        if r == 0.0 {
            continue;
        }
        let p = p as f64;
        let pc = p.clamp(lo, hi);
        let inside = p > lo && p < hi;
        if g != 0.0 {
            sum += w.airway * pc.ln();
            if inside {
                grad[i] = (-w.airway / (pc * n_roi)) as f32;
            }
        } else {
            sum += w.background * (1.0 - pc).ln();
            if inside {
                grad[i] = (w.background / ((1.0 - pc) * n_roi)) as f32;
            }
        }
    }
    Ok(LossOutput {
        value: -sum / n_roi,
        grad,
    })
}

/// Soft Dice coefficient `2Σpg / (Σp + Σg + ε)` over the ROI.
pub fn dice_coefficient_soft(b: &LossBatch) -> Result<f64> {
    b.roi_voxels()?;
    let (spg, sp, sg) = dice_sums(b);
    Ok(2.0 * spg / (sp + sg + b.epsilon))
}

fn dice_sums(b: &LossBatch) -> (f64, f64, f64) {
    let (mut spg, mut sp, mut sg) = (0f64, 0f64, 0f64);
    for ((&p, &g), &r) in b.prob.iter().zip(b.truth).zip(b.roi) {
        if r != 0.0 {
            let (p, g) = (p as f64, g as f64);
            spg += p * g;
            sp += p;
            sg += g;
        }
    }
    (spg, sp, sg)
}

/// `1 - D` with `D` the soft Dice coefficient.
pub fn dice_loss(b: &LossBatch) -> Result<LossOutput> {
    b.roi_voxels()?;
    let (spg, sp, sg) = dice_sums(b);
    let den = sp + sg + b.epsilon;
    let d = 2.0 * spg / den;
    let grad = b
        .prob
        .iter()
        .zip(b.truth)
        .zip(b.roi)
        .map(|((_, &g), &r)| {
            if r == 0.0 {
                0.0
            } else {
                (-(2.0 * g as f64 * den - 2.0 * spg) / (den * den)) as f32
            }
        })
        .collect();
    Ok(LossOutput {
        value: 1.0 - d,
        grad,
    })
}

pub fn loss(kind: LossKind, b: &LossBatch) -> Result<LossOutput> {
    match kind {
        LossKind::Dice => dice_loss(b),
        LossKind::Wbce => wbce_loss(b),
    }
}

/// Appends the loss of `prob` against `truth` inside `roi` to the graph.
pub fn graph_loss(
    g: &mut Graph,
    prob: Var,
    truth: &[f32],
    roi: &[f32],
    kind: LossKind,
    epsilon: f64,
) -> Result<Var> {
    let out = {
        let p = g.value(prob).data();
        let batch = LossBatch::new(p, truth, roi, epsilon)?;
        loss(kind, &batch)?
    };
    g.scalar_loss(prob, out.value as f32, out.grad)
}
