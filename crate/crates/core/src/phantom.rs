//! Synthetic chest-like phantoms: an ellipsoidal lung holding a binary tree of
//! tubes, with matching image, lung, ground-truth and trachea-exclusion masks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::label_components;
use crate::rng::{self, Stream};
use crate::volume_io::{Mask, Volume};

/// Smallest rasterization radius that keeps a tube 26-connected: every axis
/// point lies within this distance of the centre of the voxel containing it.
const MIN_RASTER_RADIUS: f64 = 0.8661;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    /// Branching generations; 1 is a single straight tube.
    pub depth: usize,
    pub root_radius: f64,
    pub radius_decay: f64,
    pub root_length: f64,
    pub length_decay: f64,
    pub branch_angle_deg: f64,
    /// Uniform per-branch perturbation of angle (degrees) and, scaled, of length.
    pub jitter_deg: f64,
    /// Uniform rotation of each branching plane about its parent axis (degrees).
    pub azimuth_jitter_deg: f64,
    pub parenchyma: f32,
    /// Tube lumen intensity is `parenchyma - contrast`.
    pub contrast: f32,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        TreeSpec {
            depth: 3,
            root_radius: 2.2,
            radius_decay: 0.7,
            root_length: 11.0,
            length_decay: 0.75,
            branch_angle_deg: 35.0,
            jitter_deg: 8.0,
            azimuth_jitter_deg: 0.0,
            parenchyma: 0.0,
            contrast: 1.0,
            noise_sd: 0.35,
            seed: 0,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::domain("tree depth must be >= 1"));
        }
        if !(self.radius_decay > 0.0 && self.radius_decay < 1.0) {
            return Err(Error::domain("radius_decay must lie in (0, 1)"));
        }
        let thinnest = self.root_radius * self.radius_decay.powi(self.depth as i32 - 1);
        if thinnest < 0.7 {
            return Err(Error::domain(format!(
                "generation {} radius {thinnest:.3} is below 0.7 voxel",
                self.depth
            )));
        }
        if !(self.root_length > 0.0 && self.length_decay > 0.0) || self.noise_sd < 0.0 {
            return Err(Error::domain("lengths must be > 0 and noise_sd >= 0"));
        }
        Ok(())
    }
}

/// One capsule of the tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
    pub generation: usize,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub lung: Mask,
    pub truth: Mask,
    pub exclude: Mask,
    pub segments: Vec<Segment>,
}

fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Rotates `v` about the unit axis `k` by `phi` (Rodrigues).
fn rotate_about(v: [f64; 3], k: [f64; 3], phi: f64) -> [f64; 3] {
    let kxv = [
        k[1] * v[2] - k[2] * v[1],
        k[2] * v[0] - k[0] * v[2],
        k[0] * v[1] - k[1] * v[0],
    ];
    let (c, s) = (phi.cos(), phi.sin());
    let kv = dot(k, v) * (1.0 - c);
    [0, 1, 2].map(|i| v[i] * c + kxv[i] * s + k[i] * kv)
}

/// Turns `d` by `angle` towards `axis` (within the plane they span).
fn turn(d: [f64; 3], axis: [f64; 3], angle: f64) -> [f64; 3] {
    let e = normalize(add(axis, d, -dot(axis, d)));
    normalize(add([d[0] * angle.cos(), d[1] * angle.cos(), d[2] * angle.cos()], e, angle.sin()))
}

fn grow_tree(spec: &TreeSpec, dims: [usize; 3], rng: &mut rng::Rng) -> Vec<Segment> {
    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let semi = dims.map(|n| n as f64 / 2.0 - 1.0);
    let mut jitter = |scale: f64| {
        if scale != 0.0 {
            rng.gen_range(-1.0..=1.0) * scale
        } else {
            0.0
        }
    };
    let tilt = jitter(spec.jitter_deg.to_radians() * 0.5);
    let root_dir = turn([1.0, 0.0, 0.0], [0.0, 1.0, 1.0], tilt);
    let start = [c[0] - 0.85 * semi[0], c[1], c[2]];
    let mut segments = vec![Segment {
        start,
        end: add(start, root_dir, spec.root_length),
        radius: spec.root_radius,
        generation: 0,
    }];
    let mut frontier = vec![(0usize, root_dir)];
    for gen in 1..spec.depth {
        let plane = if gen % 2 == 1 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
        let mut next = Vec::new();
        for &(parent, dir) in &frontier {
            let p = segments[parent];
            let plane = if spec.azimuth_jitter_deg > 0.0 {
                rotate_about(plane, dir, jitter(spec.azimuth_jitter_deg.to_radians()))
            } else {
                plane
            };
            for side in [-1.0, 1.0] {
                let angle = (spec.branch_angle_deg + jitter(spec.jitter_deg)).to_radians() * side;
                let d = turn(dir, plane, angle);
                let len = spec.root_length
                    * spec.length_decay.powi(gen as i32)
                    * (1.0 + jitter(spec.jitter_deg / 60.0));
                segments.push(Segment {
                    start: p.end,
                    end: add(p.end, d, len),
                    radius: spec.root_radius * spec.radius_decay.powi(gen as i32),
                    generation: gen,
                });
                next.push((segments.len() - 1, d));
            }
        }
        frontier = next;
    }
    segments
}

fn distance_to_segment(p: [f64; 3], s: &Segment) -> f64 {
    let ab = add(s.end, s.start, -1.0);
    let ap = add(p, s.start, -1.0);
    let t = (dot(ap, ab) / dot(ab, ab)).clamp(0.0, 1.0);
    let q = add(s.start, ab, t);
    let d = add(p, q, -1.0);
    dot(d, d).sqrt()
}

fn rasterize(m: &mut Mask, s: &Segment, radius: f64) {
    let dims = m.dims();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let mn = s.start[a].min(s.end[a]) - radius - 1.0;
        let mx = s.start[a].max(s.end[a]) + radius + 1.0;
        lo[a] = mn.floor().max(0.0) as usize;
        hi[a] = (mx.ceil().max(0.0) as usize).min(dims[a] - 1);
    }
    for z in lo[0]..=hi[0] {
        for y in lo[1]..=hi[1] {
            for x in lo[2]..=hi[2] {
                if distance_to_segment([z as f64, y as f64, x as f64], s) <= radius {
                    m.set(z, y, x, 1);
                }
            }
        }
    }
}

/// Chebyshev dilation by `steps` voxels.
pub fn dilate(m: &Mask, steps: usize) -> Mask {
    let [d, h, w] = m.dims();
    let mut cur = m.clone();
    for _ in 0..steps {
        let mut next = cur.clone();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if cur.get(z, y, x) == 0 {
                        continue;
                    }
                    for zz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                        for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                            for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                                next.set(zz, yy, xx, 1);
                            }
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Generates a phantom of `dims` = (depth, height, width) voxels.
pub fn generate(spec: &TreeSpec, dims: [usize; 3]) -> Result<Phantom> {
    spec.validate()?;
    if dims.iter().any(|&n| n < 8) {
        return Err(Error::domain(format!("phantom dims {dims:?} too small (min 8)")));
    }
    let spacing = [1.0; 3];
    let mut rng = rng::stream(spec.seed, Stream::Phantom, 0, 0);
    let segments = grow_tree(spec, dims, &mut rng);

    let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
    let semi = dims.map(|n| n as f64 / 2.0 - 1.0);
    let mut lung = Mask::filled(dims, spacing, 0)?;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z as f64, y as f64, x as f64];
                let r: f64 = (0..3).map(|a| ((p[a] - c[a]) / semi[a]).powi(2)).sum();
                if r <= 1.0 {
                    lung.set(z, y, x, 1);
                }
            }
        }
    }

    let mut truth = Mask::filled(dims, spacing, 0)?;
    let mut root = Mask::filled(dims, spacing, 0)?;
    for s in &segments {
        for a in 0..3 {
            let lim = dims[a] as f64 - 1.0;
            if s.end[a] - s.radius < 0.0 || s.end[a] + s.radius > lim {
                return Err(Error::domain(format!(
                    "tree exceeds phantom dims {dims:?} (generation {})",
                    s.generation
                )));
            }
        }
        rasterize(&mut truth, s, s.radius.max(MIN_RASTER_RADIUS));
        if s.generation == 0 {
            rasterize(&mut root, s, s.radius.max(MIN_RASTER_RADIUS));
        }
    }
    if truth.data().iter().zip(lung.data()).any(|(&t, &l)| t != 0 && l == 0) {
        return Err(Error::domain(format!(
            "tree leaves the lung ellipsoid for dims {dims:?}"
        )));
    }
    let exclude = dilate(&root, 2);

    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::domain(e.to_string()))?;
    let lumen = spec.parenchyma - spec.contrast;
    let data = truth
        .data()
        .iter()
        .map(|&t| {
            let base = if t != 0 { lumen } else { spec.parenchyma };
            if spec.noise_sd > 0.0 {
                base + noise.sample(&mut rng) as f32
            } else {
                base
            }
        })
        .collect();
    let image = Volume::new(dims, spacing, data)?;
    Ok(Phantom {
        image,
        lung,
        truth,
        exclude,
        segments,
    })
}

/// True when `m` is a single 26-connected component.
pub fn is_single_component(m: &Mask) -> bool {
    label_components(m, 26).1.len() == 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_tube_volume_matches_cylinder() {
        let spec = TreeSpec {
            depth: 1,
            root_radius: 3.0,
            root_length: 20.0,
            jitter_deg: 0.0,
            noise_sd: 0.0,
            ..Default::default()
        };
        let p = generate(&spec, [40, 32, 32]).unwrap();
        let n = p.truth.count() as f64;
        // capsule = cylinder + sphere
        let cyl = std::f64::consts::PI * 9.0 * 20.0;
        let capsule = cyl + 4.0 / 3.0 * std::f64::consts::PI * 27.0;
        assert!((n - capsule).abs() / capsule < 0.15, "{n} vs {capsule}");
        assert!(is_single_component(&p.truth));
    }

    #[test]
    fn noiseless_image_has_two_levels() {
        let spec = TreeSpec {
            noise_sd: 0.0,
            ..Default::default()
        };
        let p = generate(&spec, [40, 32, 32]).unwrap();
        let mut levels: Vec<f32> = p.image.data().to_vec();
        levels.sort_by(f32::total_cmp);
        levels.dedup();
        assert_eq!(levels, vec![-1.0, 0.0]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = TreeSpec {
            seed: 42,
            ..Default::default()
        };
        let a = generate(&spec, [40, 32, 32]).unwrap();
        let b = generate(&spec, [40, 32, 32]).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.truth, b.truth);
        let c = generate(&TreeSpec { seed: 43, ..spec }, [40, 32, 32]).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn masks_nest_and_tree_is_connected() {
        for seed in 0..6 {
            let p = generate(&TreeSpec { seed, ..Default::default() }, [40, 32, 32]).unwrap();
            let t = p.truth.data();
            assert!(t.iter().zip(p.lung.data()).all(|(&a, &l)| a <= l));
            let d2 = dilate(&p.truth, 2);
            assert!(p.exclude.data().iter().zip(d2.data()).all(|(&e, &d)| e <= d));
            assert!(is_single_component(&p.truth), "seed {seed}");
            let na = p.truth.count();
            let nb = p.lung.count() - na;
            assert!(nb >= 20 * na, "imbalance {nb}/{na}");
        }
    }

    #[test]
    fn oversized_tree_is_rejected() {
        let spec = TreeSpec {
            root_length: 60.0,
            ..Default::default()
        };
        assert!(matches!(generate(&spec, [40, 32, 32]), Err(Error::Domain(_))));
        let thin = TreeSpec {
            depth: 6,
            ..Default::default()
        };
        assert!(thin.validate().is_err());
    }
}
