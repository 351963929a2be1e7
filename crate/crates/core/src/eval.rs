//! Overlap metrics, FROC sweeps, and connected components.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume_io::{Mask, Volume};

/// Dice `2|P∩G| / (|P|+|G|)` over voxels where `exclude == 0`.
/// Both sets empty after exclusion counts as perfect agreement.
pub fn dice_coefficient(pred: &Mask, truth: &Mask, exclude: &Mask) -> Result<f64> {
    if pred.dims() != truth.dims() || pred.dims() != exclude.dims() {
        return Err(Error::shape(format!(
            "dice dims differ: pred {:?}, truth {:?}, exclude {:?}",
            pred.dims(),
            truth.dims(),
            exclude.dims()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for ((&a, &b), &e) in pred.data().iter().zip(truth.data()).zip(exclude.data()) {
        if e != 0 {
            continue;
        }
        p += a as usize;
        g += b as usize;
        inter += (a & b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub tp: usize,
    /// Voxelwise false positives inside the ROI.
    pub fp: usize,
    pub fn_: usize,
    pub sensitivity: f64,
    /// Dice inside the ROI at this threshold (no exclusion region).
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocCurve {
    pub points: Vec<FrocPoint>,
    /// Largest FP count on the curve; scales the FP axis to [0, 1].
    pub normalization: usize,
}

/// 0.05, 0.10, ..., 0.95. Contains 0.5 exactly.
pub fn default_thresholds() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).map(|t| (t * 100.0).round() / 100.0).collect()
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.is_empty() {
        return Err(Error::domain("no thresholds given"));
    }
    for w in thresholds.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::domain(format!(
                "thresholds must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
    }
    if thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::domain("thresholds must lie in (0, 1)"));
    }
    Ok(())
}

/// Sensitivity and FP count per threshold, with `P = {prob >= t} ∩ roi` and
/// truth restricted to the ROI.
pub fn froc(prob: &Volume, truth: &Mask, roi: &Mask, thresholds: &[f64]) -> Result<FrocCurve> {
    if prob.dims() != truth.dims() || prob.dims() != roi.dims() {
        return Err(Error::shape("froc inputs must share dims"));
    }
    check_thresholds(thresholds)?;
    let positives = truth
        .data()
        .iter()
        .zip(roi.data())
        .filter(|(&g, &r)| g != 0 && r != 0)
        .count();
    if positives == 0 {
        return Err(Error::domain("truth has no foreground voxels inside the ROI"));
    }
    let points = par::map_slice(thresholds, |&t| {
        let (mut tp, mut fp) = (0usize, 0usize);
        for ((&p, &g), &r) in prob.data().iter().zip(truth.data()).zip(roi.data()) {
            if r != 0 && p as f64 >= t {
                if g != 0 {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        let fn_ = positives - tp;
        FrocPoint {
            threshold: t,
            tp,
            fp,
            fn_,
            sensitivity: tp as f64 / positives as f64,
            dice: 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
        }
    });
    let normalization = points.iter().map(|p| p.fp).max().unwrap_or(0);
    Ok(FrocCurve {
        points,
        normalization,
    })
}

/// Squared distance of a point to the (FP = 0, sensitivity = 1) corner.
pub fn corner_distance(p: &FrocPoint, fp_max: usize) -> f64 {
    let fp = if fp_max == 0 {
        0.0
    } else {
        p.fp as f64 / fp_max as f64
    };
    fp * fp + (1.0 - p.sensitivity).powi(2)
}

/// Threshold of the curve point closest to the upper-left corner; ties go to
/// the lower threshold.
pub fn optimal_threshold(c: &FrocCurve) -> Result<f64> {
    let fp_max = c.points.iter().map(|p| p.fp).max().unwrap_or(0);
    let mut best: Option<(f64, f64)> = None;
    for p in &c.points {
        let d = corner_distance(p, fp_max);
        match best {
            Some((bd, bt)) if d > bd || (d == bd && p.threshold >= bt) => {}
            _ => best = Some((d, p.threshold)),
        }
    }
    best.map(|(_, t)| t)
        .ok_or_else(|| Error::domain("empty FROC curve"))
}

fn neighbours(connectivity: u8) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let manhattan = dz.abs() + dy.abs() + dx.abs();
                let keep = match connectivity {
                    6 => manhattan == 1,
                    18 => manhattan == 1 || manhattan == 2,
                    _ => manhattan >= 1,
                };
                if keep {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Labels foreground components (`6`, `18` or `26` connectivity). Labels start
/// at 1 in order of each component's lowest voxel index; 0 is background.
/// Returns the label volume and the size of each component.
pub fn label_components(m: &Mask, connectivity: u8) -> (Vec<u32>, Vec<usize>) {
    let [d, h, w] = m.dims();
    let offsets = neighbours(connectivity);
    let mut labels = vec![0u32; m.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..m.len() {
        if m.data()[start] == 0 || labels[start] != 0 {
            continue;
        }
        let label = sizes.len() as u32 + 1;
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            for o in &offsets {
                let (nz, ny, nx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                if nz < 0 || ny < 0 || nx < 0 || nz >= d as isize || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = (nz as usize * h + ny as usize) * w + nx as usize;
                if m.data()[j] != 0 && labels[j] == 0 {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest connected component (ties: the one found first).
pub fn largest_component(m: &Mask, connectivity: u8) -> Mask {
    let (labels, sizes) = label_components(m, connectivity);
    let mut out = Mask::like(m, 0);
    let mut best: Option<(usize, usize)> = None;
    for (k, &s) in sizes.iter().enumerate() {
        if best.map_or(true, |(_, bs)| s > bs) {
            best = Some((k, s));
        }
    }
    if let Some((k, _)) = best {
        let label = k as u32 + 1;
        for (o, &l) in out.data_mut().iter_mut().zip(&labels) {
            *o = (l == label) as u8;
        }
    }
    out
}
