//! Volumes, masks, their on-disk format, and lung-centred cropping.
//!
//! File layout: a compact JSON header padded with spaces to a multiple of 128
//! bytes and terminated by `\n`, followed by the raw little-endian payload,
//! depth outermost:
//!
//! ```text
//! {"dims":[d,h,w],"spacing":[sz,sy,sx],"dtype":"f32","byte_order":"little"}<spaces>\n<payload>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::label_components;

pub const HEADER_BLOCK: usize = 128;

/// Element type storable in a volume file.
pub trait Voxel: Copy + Default + PartialEq + Send + Sync + 'static {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn validate(_data: &[Self]) -> Result<()> {
        Ok(())
    }
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
    fn validate(data: &[Self]) -> Result<()> {
        match data.iter().position(|&v| v > 1) {
            Some(i) => Err(Error::Format(format!(
                "mask value {} at index {i} is not 0 or 1",
                data[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Dense 3D grid, row-major with depth outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// CT image or probability map.
pub type Volume = Grid<f32>;
/// Binary mask, one byte per voxel in {0, 1}.
pub type Mask = Grid<u8>;

impl<T: Voxel> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::domain(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::domain(format!(
                "spacing must be finite and > 0, got {spacing:?}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::Length {
                expected: n * T::SIZE,
                found: data.len() * T::SIZE,
            });
        }
        T::validate(&data)?;
        Ok(Grid {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Grid with the same dims/spacing as `other`, filled with `value`.
    pub fn like<U>(other: &Grid<U>, value: T) -> Self {
        Grid {
            dims: other.dims,
            spacing: other.spacing,
            data: vec![value; other.data.len()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the raw buffer. For masks the caller keeps values binary.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Copy of the block `[origin, origin + size)`.
    pub fn sub_block(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::domain(format!(
                    "block origin {origin:?} size {size:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
        for z in 0..size[0] {
            for y in 0..size[1] {
                let start = self.index(origin[0] + z, origin[1] + y, origin[2]);
                data.extend_from_slice(&self.data[start..start + size[2]]);
            }
        }
        Ok(Grid {
            dims: size,
            spacing: self.spacing,
            data,
        })
    }

    /// Writes `block` into `self` at `origin`.
    pub fn embed(&mut self, block: &Grid<T>, origin: [usize; 3]) -> Result<()> {
        self.embed_with(block, origin, |_, new| new)
    }

    /// Like [`embed`](Self::embed) but combines old and new values with `f`.
    pub fn embed_with(
        &mut self,
        block: &Grid<T>,
        origin: [usize; 3],
        f: impl Fn(T, T) -> T,
    ) -> Result<()> {
        for a in 0..3 {
            if origin[a] + block.dims[a] > self.dims[a] {
                return Err(Error::domain(format!(
                    "block {:?} at {origin:?} exceeds dims {:?}",
                    block.dims, self.dims
                )));
            }
        }
        let [bd, bh, bw] = block.dims;
        for z in 0..bd {
            for y in 0..bh {
                let dst = self.index(origin[0] + z, origin[1] + y, origin[2]);
                let src = block.index(z, y, 0);
                for x in 0..bw {
                    self.data[dst + x] = f(self.data[dst + x], block.data[src + x]);
                }
            }
        }
        Ok(())
    }
}

impl Mask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Mask from a predicate over another grid.
    pub fn from_fn<U: Copy>(src: &Grid<U>, pred: impl Fn(U) -> bool) -> Mask {
        Grid {
            dims: src.dims,
            spacing: src.spacing,
            data: src.data.iter().map(|&v| pred(v) as u8).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    byte_order: String,
}

pub fn encode_grid<T: Voxel>(g: &Grid<T>) -> Vec<u8> {
    let header = Header {
        dims: g.dims,
        spacing: g.spacing,
        dtype: T::DTYPE.to_string(),
        byte_order: "little".to_string(),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    let padded = (text.len() + 1).div_ceil(HEADER_BLOCK) * HEADER_BLOCK;
    while text.len() + 1 < padded {
        text.push(' ');
    }
    text.push('\n');
    let mut out = text.into_bytes();
    out.reserve(g.data.len() * T::SIZE);
    for &v in &g.data {
        v.write_le(&mut out);
    }
    out
}

pub fn decode_grid<T: Voxel>(bytes: &[u8]) -> Result<Grid<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let header_len = nl + 1;
    if header_len % HEADER_BLOCK != 0 {
        return Err(Error::Format(format!(
            "header length {header_len} is not a multiple of {HEADER_BLOCK}"
        )));
    }
    let text = std::str::from_utf8(&bytes[..nl])
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let header: Header = serde_json::from_str(text.trim_end())
        .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "expected dtype {}, file has {}",
            T::DTYPE,
            header.dtype
        )));
    }
    if header.byte_order != "little" {
        return Err(Error::Format(format!(
            "unsupported byte order {}",
            header.byte_order
        )));
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::Format(format!("zero dim in {:?}", header.dims)));
    }
    let n = header.dims.iter().product::<usize>();
    let payload = &bytes[header_len..];
    if payload.len() != n * T::SIZE {
        return Err(Error::Length {
            expected: n * T::SIZE,
            found: payload.len(),
        });
    }
    let data = payload.chunks_exact(T::SIZE).map(T::read_le).collect();
    Grid::new(header.dims, header.spacing, data).map_err(|e| match e {
        Error::Domain(m) => Error::Format(m),
        other => other,
    })
}

pub fn read_grid<T: Voxel>(path: impl AsRef<Path>) -> Result<Grid<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes)
}

pub fn write_grid<T: Voxel>(g: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_grid(g)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    read_grid(path)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_grid(v, path)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask> {
    read_grid(path)
}

pub fn write_mask(m: &Mask, path: impl AsRef<Path>) -> Result<()> {
    write_grid(m, path)
}

/// Fixed-size lung-centred crop window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    /// (height, width) of the in-plane window in voxels.
    pub in_plane: [usize; 2],
    /// Voxels added above and below the lung's axial range.
    pub margin: usize,
    /// (y, x) centre; `None` means "use the lung centroid". Filled in on return.
    pub center: Option<[f64; 2]>,
    /// Realized region, set by [`crop_to_lung`].
    pub region: Option<CropRegion>,
}

impl CropSpec {
    pub fn new(in_plane: [usize; 2], margin: usize) -> Self {
        CropSpec {
            in_plane,
            margin,
            center: None,
            region: None,
        }
    }
}

/// Offsets and size of a crop inside its source volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRegion {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

fn window_start(center: f64, size: usize, extent: usize) -> (usize, usize) {
    if size >= extent {
        return (0, extent);
    }
    // voxel i spans [i, i+1); centre the window on the continuous centroid
    let start = (center + 0.5 - size as f64 / 2.0).floor();
    let start = start.clamp(0.0, (extent - size) as f64) as usize;
    (start, size)
}

/// Region of the crop for `lung`, with the axial range grown to at least
/// `min_axial` slices (when the volume allows).
pub fn crop_region(lung: &Mask, spec: &CropSpec, min_axial: usize) -> Result<(CropRegion, [f64; 2])> {
    let [d, h, w] = lung.dims();
    let (mut zmin, mut zmax) = (usize::MAX, 0usize);
    let (mut sy, mut sx, mut n) = (0f64, 0f64, 0usize);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if lung.get(z, y, x) != 0 {
                    zmin = zmin.min(z);
                    zmax = zmax.max(z);
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        return Err(Error::domain("lung mask has no foreground voxels"));
    }
    let center = spec
        .center
        .unwrap_or([sy / n as f64, sx / n as f64]);
    let (y0, hh) = window_start(center[0], spec.in_plane[0], h);
    let (x0, ww) = window_start(center[1], spec.in_plane[1], w);

    let mut lo = zmin.saturating_sub(spec.margin);
    let mut hi = (zmax + spec.margin).min(d - 1);
    let min_axial = min_axial.min(d);
    while hi + 1 - lo < min_axial {
        if lo > 0 {
            lo -= 1;
        }
        if hi + 1 - lo < min_axial && hi + 1 < d {
            hi += 1;
        }
    }
    Ok((
        CropRegion {
            origin: [lo, y0, x0],
            size: [hi + 1 - lo, hh, ww],
        },
        center,
    ))
}

/// Crops `ct` and `lung` to the fixed in-plane window centred on the lung and
/// the lung's axial range extended by `spec.margin`. The window is shifted to
/// stay inside the volume; it shrinks only when the volume is smaller.
pub fn crop_to_lung(ct: &Volume, lung: &Mask, spec: &CropSpec) -> Result<(Volume, Mask, CropSpec)> {
    crop_to_lung_min_depth(ct, lung, spec, 1)
}

pub fn crop_to_lung_min_depth(
    ct: &Volume,
    lung: &Mask,
    spec: &CropSpec,
    min_axial: usize,
) -> Result<(Volume, Mask, CropSpec)> {
    if ct.dims() != lung.dims() {
        return Err(Error::shape(format!(
            "ct dims {:?} != lung dims {:?}",
            ct.dims(),
            lung.dims()
        )));
    }
    let (region, center) = crop_region(lung, spec, min_axial)?;
    let img = ct.sub_block(region.origin, region.size)?;
    let roi = lung.sub_block(region.origin, region.size)?;
    let realized = CropSpec {
        in_plane: spec.in_plane,
        margin: spec.margin,
        center: Some(center),
        region: Some(region),
    };
    Ok((img, roi, realized))
}

/// One crop per connected lung component (26-connectivity). Components smaller
/// than 10% of the largest are treated as segmentation debris and skipped.
/// Each returned ROI mask holds only its own component.
pub fn lung_crops(
    ct: &Volume,
    lung: &Mask,
    spec: &CropSpec,
    min_axial: usize,
) -> Result<Vec<(Volume, Mask, CropSpec)>> {
    let (labels, sizes) = label_components(lung, 26);
    let largest = sizes.iter().copied().max().unwrap_or(0);
    if largest == 0 {
        return Err(Error::domain("lung mask has no foreground voxels"));
    }
    let mut out = Vec::new();
    for (k, &size) in sizes.iter().enumerate() {
        if size * 10 < largest {
            continue;
        }
        let label = k as u32 + 1;
        let mut comp = Mask::like(lung, 0);
        for (dst, &l) in comp.data_mut().iter_mut().zip(&labels) {
            *dst = (l == label) as u8;
        }
        out.push(crop_to_lung_min_depth(ct, &comp, spec, min_axial)?);
    }
    Ok(out)
}
