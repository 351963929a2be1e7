//! On-the-fly rigid and elastic augmentation of image patches and masks.
//!
//! Both transforms use backward warping: each output voxel samples the input at
//! a mapped coordinate. Images are interpolated, masks use nearest neighbour so
//! they stay binary, and samples falling outside the input read as 0.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::rng::Rng;
use crate::volume_io::{Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmentation {
    None,
    Rigid,
    Elastic,
}

impl Augmentation {
    pub fn name(self) -> &'static str {
        match self {
            Augmentation::None => "None",
            Augmentation::Rigid => "Rigid",
            Augmentation::Elastic => "Elastic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub max_angle_deg: f64,
    /// Standard deviation of coarse displacement vectors, in voxels.
    pub elastic_sigma: f64,
    pub elastic_grid: [usize; 2],
    /// Axes (depth, height, width) that may be flipped.
    pub flip_axes: [bool; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_angle_deg: 10.0,
            elastic_sigma: 25.0,
            elastic_grid: [3, 3],
            flip_axes: [true; 3],
        }
    }
}

/// Flips and rotation angles for (depth, height, width) axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub flips: [bool; 3],
    pub angles_deg: [f64; 3],
}

impl RigidParams {
    pub fn identity() -> Self {
        RigidParams {
            flips: [false; 3],
            angles_deg: [0.0; 3],
        }
    }
}

pub fn sample_rigid(rng: &mut Rng, max_angle: f64) -> RigidParams {
    let max_angle = max_angle.max(0.0);
    let mut flips = [false; 3];
    let mut angles_deg = [0.0; 3];
    for a in 0..3 {
        flips[a] = rng.gen_bool(0.5);
        angles_deg[a] = if max_angle > 0.0 {
            rng.gen_range(-max_angle..=max_angle)
        } else {
            0.0
        };
    }
    RigidParams { flips, angles_deg }
}

type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Rotation acting on (z, y, x) coordinates, composed as Rz · Ry · Rx where
/// Rz turns the axial plane.
fn rotation(angles_deg: [f64; 3]) -> Mat3 {
    let [az, ay, ax] = angles_deg.map(f64::to_radians);
    let (sz, cz) = az.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sx, cx) = ax.sin_cos();
    let rz = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
    let ry = [[cy, 0.0, -sy], [0.0, 1.0, 0.0], [sy, 0.0, cy]];
    let rx = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
    matmul(&rz, &matmul(&ry, &rx))
}

#[inline]
fn inside(c: f64, n: usize) -> bool {
    c >= -0.5 && c <= n as f64 - 0.5
}

fn sample_nearest(m: &Mask, p: [f64; 3]) -> u8 {
    let dims = m.dims();
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if r < 0.0 || r > (dims[a] - 1) as f64 {
            return 0;
        }
        idx[a] = r as usize;
    }
    m.get(idx[0], idx[1], idx[2])
}

fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let dims = v.dims();
    let mut i0 = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        if !inside(p[a], dims[a]) {
            return 0.0;
        }
        let c = p[a].clamp(0.0, (dims[a] - 1) as f64);
        let fl = c.floor();
        i0[a] = fl as usize;
        f[a] = c - fl;
    }
    if f == [0.0; 3] {
        return v.get(i0[0], i0[1], i0[2]);
    }
    let mut acc = 0f64;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - f[0] } else { f[0] };
        if wz == 0.0 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - f[1] } else { f[1] };
            if wy == 0.0 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - f[2] } else { f[2] };
                if wx == 0.0 {
                    continue;
                }
                let z = (i0[0] + dz).min(dims[0] - 1);
                let y = (i0[1] + dy).min(dims[1] - 1);
                let x = (i0[2] + dx).min(dims[2] - 1);
                acc += wz * wy * wx * v.get(z, y, x) as f64;
            }
        }
    }
    acc as f32
}

fn check_dims(img: &Volume, masks: &[&Mask]) -> Result<()> {
    match masks.iter().find(|m| m.dims() != img.dims()) {
        Some(m) => Err(Error::shape(format!(
            "mask dims {:?} != image dims {:?}",
            m.dims(),
            img.dims()
        ))),
        None => Ok(()),
    }
}

/// Applies `map` (output voxel -> input coordinate) to the image with `img_sample`
/// and to every mask with nearest neighbour.
fn warp<M, S>(img: &Volume, masks: &[&Mask], map: M, img_sample: S) -> (Volume, Vec<Mask>)
where
    M: Fn(usize, usize, usize) -> [f64; 3] + Sync + Send,
    S: Fn(&Volume, [f64; 3]) -> f32 + Sync + Send,
{
    let [_, h, w] = img.dims();
    let slice = h * w;
    let mut out = Volume::like(img, 0.0);
    par::for_each_chunk_mut(out.data_mut(), slice, |z, dst| {
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = img_sample(img, map(z, y, x));
            }
        }
    });
    let masks = masks
        .iter()
        .map(|m| {
            let mut o = Mask::like(img, 0);
            par::for_each_chunk_mut(o.data_mut(), slice, |z, dst| {
                for y in 0..h {
                    for x in 0..w {
                        dst[y * w + x] = sample_nearest(m, map(z, y, x));
                    }
                }
            });
            o
        })
        .collect();
    (out, masks)
}

/// Rigid transform of an image and any number of aligned masks.
pub fn apply_rigid_all(img: &Volume, masks: &[&Mask], p: &RigidParams) -> Result<(Volume, Vec<Mask>)> {
    check_dims(img, masks)?;
    let dims = img.dims();
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let r = rotation(p.angles_deg);
    let identity_rotation = p.angles_deg == [0.0; 3];
    let map = move |z: usize, y: usize, x: usize| {
        let q = [z as f64, y as f64, x as f64];
        let mut s = if identity_rotation {
            q
        } else {
            let d = [q[0] - c[0], q[1] - c[1], q[2] - c[2]];
            // inverse rotation = transpose
            let mut s = [0f64; 3];
            for a in 0..3 {
                s[a] = c[a] + r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2];
            }
            s
        };
        for a in 0..3 {
            if p.flips[a] {
                s[a] = (dims[a] - 1) as f64 - s[a];
            }
        }
        s
    };
    Ok(warp(img, masks, map, sample_trilinear))
}

pub fn apply_rigid(img: &Volume, lbl: &Mask, p: &RigidParams) -> Result<(Volume, Mask)> {
    let (v, mut m) = apply_rigid_all(img, &[lbl], p)?;
    Ok((v, m.remove(0)))
}

/// In-plane displacement field shared by every axial slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticField {
    pub grid: [usize; 2],
    /// Coarse (dy, dx) vectors, row-major over the grid.
    pub coarse: Vec<[f64; 2]>,
    pub sigma: f64,
    /// (height, width) of the dense field.
    pub dims: [usize; 2],
    /// Dense (dy, dx) per in-plane voxel, row-major.
    pub dense: Vec<[f32; 2]>,
}

/// Keys cubic convolution kernel (a = -0.5), interpolating at integer nodes.
fn cubic_weights(t: f64) -> [f64; 4] {
    let a = -0.5;
    let w = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
        } else if x < 2.0 {
            a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
        } else {
            0.0
        }
    };
    [w(1.0 + t), w(t), w(1.0 - t), w(2.0 - t)]
}

/// Grid-unit coordinate of dense position `i` when `g` nodes span `n` voxels.
fn to_grid(i: usize, n: usize, g: usize) -> f64 {
    if g <= 1 || n <= 1 {
        0.0
    } else {
        i as f64 * (g - 1) as f64 / (n - 1) as f64
    }
}

fn bicubic_coarse(coarse: &[[f64; 2]], grid: [usize; 2], u: f64, v: f64) -> [f64; 2] {
    let (iu, iv) = (u.floor() as isize, v.floor() as isize);
    let (wu, wv) = (cubic_weights(u - iu as f64), cubic_weights(v - iv as f64));
    let mut out = [0.0; 2];
    for (a, wa) in wu.iter().enumerate() {
        if *wa == 0.0 {
            continue;
        }
        let r = (iu + a as isize - 1).clamp(0, grid[0] as isize - 1) as usize;
        for (b, wb) in wv.iter().enumerate() {
            if *wb == 0.0 {
                continue;
            }
            let c = (iv + b as isize - 1).clamp(0, grid[1] as isize - 1) as usize;
            let node = coarse[r * grid[1] + c];
            out[0] += wa * wb * node[0];
            out[1] += wa * wb * node[1];
        }
    }
    out
}

impl ElasticField {
    pub fn from_coarse(coarse: Vec<[f64; 2]>, grid: [usize; 2], sigma: f64, dims: [usize; 2]) -> Result<Self> {
        if grid[0] == 0 || grid[1] == 0 || coarse.len() != grid[0] * grid[1] {
            return Err(Error::domain(format!(
                "coarse field of {} vectors does not match grid {grid:?}",
                coarse.len()
            )));
        }
        let [h, w] = dims;
        let mut dense = Vec::with_capacity(h * w);
        for y in 0..h {
            let u = to_grid(y, h, grid[0]);
            for x in 0..w {
                let v = to_grid(x, w, grid[1]);
                let d = bicubic_coarse(&coarse, grid, u, v);
                dense.push([d[0] as f32, d[1] as f32]);
            }
        }
        Ok(ElasticField {
            grid,
            coarse,
            sigma,
            dims,
            dense,
        })
    }

    /// In-plane position of coarse node (r, c).
    pub fn node_position(&self, r: usize, c: usize) -> [usize; 2] {
        let pos = |i: usize, g: usize, n: usize| {
            if g <= 1 {
                (n - 1) / 2
            } else {
                (i as f64 * (n - 1) as f64 / (g - 1) as f64).round() as usize
            }
        };
        [pos(r, self.grid[0], self.dims[0]), pos(c, self.grid[1], self.dims[1])]
    }
}

/// Coarse displacement vectors drawn i.i.d. from N(0, sigma²), bicubically
/// interpolated over an in-plane extent of `dims` = (height, width).
pub fn sample_elastic(rng: &mut Rng, sigma: f64, grid: [usize; 2], dims: [usize; 2]) -> Result<ElasticField> {
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("elastic sigma {sigma} must be >= 0")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
    let coarse = (0..grid[0] * grid[1])
        .map(|_| [normal.sample(rng), normal.sample(rng)])
        .collect();
    ElasticField::from_coarse(coarse, grid, sigma, dims)
}

fn value_range(v: &Volume) -> (f32, f32) {
    v.data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Bicubic in-plane sample on slice `z`, clamped to `[lo, hi]`.
fn sample_bicubic(v: &Volume, z: usize, y: f64, x: f64, lo: f32, hi: f32) -> f32 {
    let [_, h, w] = v.dims();
    if !inside(y, h) || !inside(x, w) {
        return 0.0;
    }
    let (iy, ix) = (y.floor() as isize, x.floor() as isize);
    let (fy, fx) = (y - iy as f64, x - ix as f64);
    if fy == 0.0 && fx == 0.0 {
        let yy = iy.clamp(0, h as isize - 1) as usize;
        let xx = ix.clamp(0, w as isize - 1) as usize;
        return v.get(z, yy, xx);
    }
    let (wy, wx) = (cubic_weights(fy), cubic_weights(fx));
    let mut acc = 0f64;
    for (a, wa) in wy.iter().enumerate() {
        let yy = (iy + a as isize - 1).clamp(0, h as isize - 1) as usize;
        for (b, wb) in wx.iter().enumerate() {
            let xx = (ix + b as isize - 1).clamp(0, w as isize - 1) as usize;
            acc += wa * wb * v.get(z, yy, xx) as f64;
        }
    }
    // bounds are unordered when the slice holds no finite value; let NaN
    // through to the non-finite loss check
    if lo <= hi {
        (acc as f32).clamp(lo, hi)
    } else {
        acc as f32
    }
}

/// Elastic warp of an image and any number of aligned masks.
pub fn apply_elastic_all(img: &Volume, masks: &[&Mask], f: &ElasticField) -> Result<(Volume, Vec<Mask>)> {
    check_dims(img, masks)?;
    let [_, h, w] = img.dims();
    if f.dims != [h, w] {
        return Err(Error::shape(format!(
            "elastic field dims {:?} != image in-plane dims {:?}",
            f.dims,
            [h, w]
        )));
    }
    let (lo, hi) = value_range(img);
    let map = |z: usize, y: usize, x: usize| {
        let d = f.dense[y * w + x];
        [z as f64, y as f64 + d[0] as f64, x as f64 + d[1] as f64]
    };
    let sample = move |v: &Volume, p: [f64; 3]| sample_bicubic(v, p[0] as usize, p[1], p[2], lo, hi);
    Ok(warp(img, masks, map, sample))
}

pub fn apply_elastic(img: &Volume, lbl: &Mask, f: &ElasticField) -> Result<(Volume, Mask)> {
    let (v, mut m) = apply_elastic_all(img, &[lbl], f)?;
    Ok((v, m.remove(0)))
}

/// Draws and applies the augmentation `kind` to an image and its masks.
pub fn augment(
    kind: Augmentation,
    cfg: &AugmentConfig,
    rng: &mut Rng,
    img: &Volume,
    masks: &[&Mask],
) -> Result<(Volume, Vec<Mask>)> {
    match kind {
        Augmentation::None => {
            check_dims(img, masks)?;
            Ok((img.clone(), masks.iter().map(|m| (*m).clone()).collect()))
        }
        Augmentation::Rigid => {
            let mut p = sample_rigid(rng, cfg.max_angle_deg);
            for (f, &allowed) in p.flips.iter_mut().zip(&cfg.flip_axes) {
                *f &= allowed;
            }
            apply_rigid_all(img, masks, &p)
        }
        Augmentation::Elastic => {
            let [_, h, w] = img.dims();
            let f = sample_elastic(rng, cfg.elastic_sigma, cfg.elastic_grid, [h, w])?;
            apply_elastic_all(img, masks, &f)
        }
    }
}
