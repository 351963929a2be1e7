//! Axial sliding windows, border tapering, and overlap-normalized reconstruction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::volume_io::Volume;

/// Axial window layout over a source volume. In-plane, every window spans the
/// full source extent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub axial_extent: usize,
    pub patch_depth: usize,
    pub axial_offsets: Vec<usize>,
    pub overlap_fraction: f64,
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.axial_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axial_offsets.is_empty()
    }

    pub fn stride(&self) -> usize {
        stride_for(self.patch_depth, self.overlap_fraction)
    }

    /// Number of windows covering each axial slice.
    pub fn coverage(&self) -> Vec<usize> {
        let mut c = vec![0; self.axial_extent];
        for &o in &self.axial_offsets {
            for v in &mut c[o..o + self.patch_depth] {
                *v += 1;
            }
        }
        c
    }
}

fn stride_for(depth: usize, overlap: f64) -> usize {
    ((depth as f64 * (1.0 - overlap)).round() as usize).max(1)
}

pub fn plan_windows(axial_extent: usize, patch_depth: usize, overlap_fraction: f64) -> Result<WindowPlan> {
    if patch_depth == 0 || patch_depth > axial_extent {
        return Err(Error::domain(format!(
            "patch depth {patch_depth} does not fit axial extent {axial_extent}"
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::domain(format!(
            "overlap fraction {overlap_fraction} outside [0, 1)"
        )));
    }
    let stride = stride_for(patch_depth, overlap_fraction);
    let last = axial_extent - patch_depth;
    let mut offsets: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o < last).collect();
    offsets.push(last);
    offsets.dedup();
    Ok(WindowPlan {
        axial_extent,
        patch_depth,
        axial_offsets: offsets,
        overlap_fraction,
    })
}

/// Window `index` of `v`: slices `[offset, offset + depth)`, full in-plane extent.
pub fn extract_patch(v: &Volume, plan: &WindowPlan, index: usize) -> Result<Volume> {
    let &offset = plan.axial_offsets.get(index).ok_or_else(|| {
        Error::domain(format!(
            "window index {index} out of range ({} windows)",
            plan.len()
        ))
    })?;
    let [d, h, w] = v.dims();
    if d != plan.axial_extent {
        return Err(Error::shape(format!(
            "volume depth {d} != planned extent {}",
            plan.axial_extent
        )));
    }
    v.sub_block([offset, 0, 0], [plan.patch_depth, h, w])
}

/// One axis of the border taper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisTaper {
    pub x_l: f64,
    pub x_r: f64,
    pub x_m: usize,
    /// `f` at voxel centres `i + 0.5`.
    pub weights: Vec<f32>,
}

/// Separable 3D taper; the per-voxel weight is the product of the axis weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaperProfile {
    pub axes: [AxisTaper; 3],
}

/// Quadratic ramp up to `x_l`, flat 1 on `[x_l, x_r]`, quadratic ramp down to `x_m`.
pub fn taper_value(x: f64, x_l: f64, x_r: f64, x_m: f64) -> f64 {
    if x < x_l {
        (x / x_l).powi(2)
    } else if x <= x_r {
        1.0
    } else {
        ((x_m - x) / (x_m - x_r)).powi(2)
    }
}

impl AxisTaper {
    pub fn new(x_l: f64, x_r: f64, x_m: usize) -> Result<Self> {
        let m = x_m as f64;
        if !(0.0 <= x_l && x_l <= x_r && x_r <= m) {
            return Err(Error::domain(format!(
                "taper needs 0 <= x_l <= x_r <= x_m, got {x_l}, {x_r}, {x_m}"
            )));
        }
        let weights = (0..x_m)
            .map(|i| taper_value(i as f64 + 0.5, x_l, x_r, m) as f32)
            .collect();
        Ok(AxisTaper { x_l, x_r, x_m, weights })
    }

    /// Flat interior `[inset, x_m - inset]`, with `inset` capped at `x_m / 2`.
    pub fn symmetric(inset: f64, x_m: usize) -> Result<Self> {
        let inset = inset.min(x_m as f64 / 2.0);
        Self::new(inset, x_m as f64 - inset, x_m)
    }
}

/// `bounds[a] = (x_l, x_r, x_m)` per axis (depth, height, width).
pub fn taper_profile(bounds: [(f64, f64, usize); 3]) -> Result<TaperProfile> {
    Ok(TaperProfile {
        axes: [
            AxisTaper::new(bounds[0].0, bounds[0].1, bounds[0].2)?,
            AxisTaper::new(bounds[1].0, bounds[1].1, bounds[1].2)?,
            AxisTaper::new(bounds[2].0, bounds[2].1, bounds[2].2)?,
        ],
    })
}

impl TaperProfile {
    /// All-ones taper for a patch shape.
    pub fn flat(shape: [usize; 3]) -> Self {
        let axis = |m: usize| AxisTaper::new(0.0, m as f64, m).expect("valid flat taper");
        TaperProfile {
            axes: [axis(shape[0]), axis(shape[1]), axis(shape[2])],
        }
    }

    /// Symmetric taper with per-axis inset (e.g. valid-convolution shrinkage).
    pub fn from_insets(shape: [usize; 3], insets: [f64; 3]) -> Result<Self> {
        Ok(TaperProfile {
            axes: [
                AxisTaper::symmetric(insets[0], shape[0])?,
                AxisTaper::symmetric(insets[1], shape[1])?,
                AxisTaper::symmetric(insets[2], shape[2])?,
            ],
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.axes[0].x_m, self.axes[1].x_m, self.axes[2].x_m]
    }

    #[inline]
    pub fn weight(&self, z: usize, y: usize, x: usize) -> f32 {
        self.axes[0].weights[z] * self.axes[1].weights[y] * self.axes[2].weights[x]
    }
}

/// Taper-weighted mean of overlapping window outputs:
/// `out(v) = Σ w_i(v) p_i(v) / Σ w_i(v)`.
pub fn reconstruct(
    patch_outputs: &[Volume],
    plan: &WindowPlan,
    taper: &TaperProfile,
    full_dims: [usize; 3],
) -> Result<Volume> {
    if patch_outputs.len() != plan.len() {
        return Err(Error::domain(format!(
            "{} patch outputs for {} windows",
            patch_outputs.len(),
            plan.len()
        )));
    }
    let [d, h, w] = full_dims;
    let shape = [plan.patch_depth, h, w];
    if d != plan.axial_extent {
        return Err(Error::shape(format!(
            "full depth {d} != planned extent {}",
            plan.axial_extent
        )));
    }
    if taper.shape() != shape {
        return Err(Error::shape(format!(
            "taper shape {:?} != patch shape {shape:?}",
            taper.shape()
        )));
    }
    if let Some(p) = patch_outputs.iter().find(|p| p.dims() != shape) {
        return Err(Error::shape(format!(
            "patch output dims {:?} != patch shape {shape:?}",
            p.dims()
        )));
    }
    let spacing = patch_outputs[0].spacing();
    let slice = h * w;
    let mut out = vec![0f32; d * slice];
    par::for_each_chunk_mut(&mut out, slice, |z, dst| {
        let mut num = vec![0f64; slice];
        let mut den = vec![0f64; slice];
        for (p, &off) in patch_outputs.iter().zip(&plan.axial_offsets) {
            if z < off || z >= off + plan.patch_depth {
                continue;
            }
            let lz = z - off;
            let src = &p.data()[lz * slice..(lz + 1) * slice];
            for y in 0..h {
                for x in 0..w {
                    let wt = taper.weight(lz, y, x) as f64;
                    let i = y * w + x;
                    num[i] += wt * src[i] as f64;
                    den[i] += wt;
                }
            }
        }
        for i in 0..slice {
            dst[i] = (num[i] / den[i]) as f32;
        }
    });
    Volume::new(full_dims, spacing, out)
}
