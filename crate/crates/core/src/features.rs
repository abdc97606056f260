//! Patch meshing around interest points, the built-in patch descriptor and
//! the binary feature file.
//!
//! Deep features computed outside this crate enter the pipeline through the
//! feature file: any extractor that writes the same layout can replace the
//! built-in descriptor.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corners::{image_gradients, CornerPoint};
use crate::error::{Error, Result};
use crate::image::{rgb_to_gray, Image};

pub const DEFAULT_PATCH_SIZE: usize = 40;
pub const DEFAULT_FEATURE_DIM: usize = 1000;

pub const FEATURE_MAGIC: &[u8; 4] = b"PDLF";
pub const FEATURE_VERSION: u32 = 1;

const INTENSITY_BINS: usize = 16;
const ORIENTATION_BINS: usize = 18;
const GRID_CELLS: usize = 4;
/// Length of the descriptor before tiling.
pub const BASE_LEN: usize = INTENSITY_BINS + ORIENTATION_BINS + 2 * GRID_CELLS * GRID_CELLS;

/// A square crop of the source image.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub pixels: Image,
    pub center: CornerPoint,
    /// Top-left corner of the crop in the source image, `(row, col)`.
    pub origin: (usize, usize),
}

/// A feature vector attached to an image location.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub x: f64,
    pub y: f64,
    pub vector: Vec<f32>,
}

/// Turns a patch into a fixed-length vector. Implementations must be
/// deterministic in the patch pixels alone.
pub trait Extractor: Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, patch: &Patch) -> FeatureRecord;
}

/// Histogram and cell-statistics descriptor, tiled to `dim` values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuiltinExtractor {
    pub dim: usize,
}

impl Default for BuiltinExtractor {
    fn default() -> Self {
        BuiltinExtractor {
            dim: DEFAULT_FEATURE_DIM,
        }
    }
}

impl Extractor for BuiltinExtractor {
    fn name(&self) -> &str {
        "builtin"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, patch: &Patch) -> FeatureRecord {
        extract_builtin(patch, self.dim)
    }
}

/// Start of a `size`-long window centered on `c`, shifted to fit in `len`.
fn clamped_start(c: usize, size: usize, len: usize) -> usize {
    c.saturating_sub(size / 2).min(len - size)
}

/// Crops a `size × size` patch centered on each point. Windows that would
/// leave the image are shifted inward, so every patch has the full size.
pub fn mesh_patches(img: &Image, points: &[CornerPoint], size: usize) -> Result<Vec<Patch>> {
    if size == 0 || size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size must be even, got {size}"
        )));
    }
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    if size > h || size > w {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than the {size}-pixel patch"
        )));
    }
    points
        .iter()
        .map(|p| {
            if p.x >= w || p.y >= h {
                return Err(Error::InvalidArgument(format!(
                    "point ({}, {}) lies outside the {h}x{w} image",
                    p.x, p.y
                )));
            }
            let r0 = clamped_start(p.y, size, h);
            let c0 = clamped_start(p.x, size, w);
            let mut data = Vec::with_capacity(ch * size * size);
            for c in 0..ch {
                let plane = img.plane(c);
                for r in r0..r0 + size {
                    data.extend_from_slice(&plane[r * w + c0..r * w + c0 + size]);
                }
            }
            Ok(Patch {
                pixels: Image::from_planar(size, size, ch, data)?,
                center: *p,
                origin: (r0, c0),
            })
        })
        .collect()
}

/// The untiled descriptor: intensity histogram, magnitude-weighted gradient
/// orientation histogram, then mean and standard deviation on a 4×4 grid.
pub fn base_descriptor(patch: &Patch) -> [f32; BASE_LEN] {
    let gray = rgb_to_gray(&patch.pixels);
    let (h, w) = (gray.height(), gray.width());
    let px = gray.plane(0);
    let n = (h * w) as f32;
    let mut out = [0.0f32; BASE_LEN];

    let (hist, rest) = out.split_at_mut(INTENSITY_BINS);
    let (orient, grid) = rest.split_at_mut(ORIENTATION_BINS);

    for &v in px {
        let bin = ((v * INTENSITY_BINS as f32) as usize).min(INTENSITY_BINS - 1);
        hist[bin] += 1.0;
    }
    for v in hist.iter_mut() {
        *v /= n;
    }

    if let Ok((ix, iy)) = image_gradients(&gray) {
        for (&gx, &gy) in ix.data().iter().zip(iy.data()) {
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(std::f32::consts::TAU);
            let bin = ((angle / std::f32::consts::TAU * ORIENTATION_BINS as f32) as usize)
                .min(ORIENTATION_BINS - 1);
            orient[bin] += mag;
        }
        for v in orient.iter_mut() {
            *v /= n;
        }
    }

    for cy in 0..GRID_CELLS {
        let (y0, y1) = (cy * h / GRID_CELLS, (cy + 1) * h / GRID_CELLS);
        for cx in 0..GRID_CELLS {
            let (x0, x1) = (cx * w / GRID_CELLS, (cx + 1) * w / GRID_CELLS);
            let count = ((y1 - y0) * (x1 - x0)).max(1) as f64;
            let (mut s, mut s2) = (0.0f64, 0.0f64);
            for y in y0..y1 {
                for &v in &px[y * w + x0..y * w + x1] {
                    s += v as f64;
                    s2 += v as f64 * v as f64;
                }
            }
            let mean = s / count;
            let var = (s2 / count - mean * mean).max(0.0);
            let k = 2 * (cy * GRID_CELLS + cx);
            grid[k] = mean as f32;
            grid[k + 1] = var.sqrt() as f32;
        }
    }
    out
}

/// Fixed modulation applied to component `j` of tile `t`; tile 0 is
/// left as is.
#[inline]
fn tile_modulation(tile: usize, j: usize) -> f32 {
    1.0 + 0.5 * (0.618_034 * (tile * (j + 1)) as f32).sin()
}

/// Built-in stand-in for a deep patch descriptor: the base descriptor tiled
/// with a fixed per-tile modulation up to `dim` values, then L2-normalized.
pub fn extract_builtin(patch: &Patch, dim: usize) -> FeatureRecord {
    let base = base_descriptor(patch);
    let mut vector: Vec<f32> = (0..dim)
        .map(|i| base[i % BASE_LEN] * tile_modulation(i / BASE_LEN, i % BASE_LEN))
        .collect();
    let norm = vector
        .iter()
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for v in &mut vector {
            *v = (*v as f64 / norm) as f32;
        }
    }
    FeatureRecord {
        x: patch.center.x as f64,
        y: patch.center.y as f64,
        vector,
    }
}

/// Meshes patches around `points` and extracts one record per point, in
/// point order.
pub fn extract_features(
    img: &Image,
    points: &[CornerPoint],
    patch_size: usize,
    extractor: &dyn Extractor,
) -> Result<Vec<FeatureRecord>> {
    let patches = mesh_patches(img, points, patch_size)?;
    Ok(patches.par_iter().map(|p| extractor.extract(p)).collect())
}

/// Serializes records: magic, version, count, dim, then per record
/// `x: f64, y: f64, dim × f32`, all little-endian.
pub fn encode_features(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot export an empty feature list".into()))?;
    let dim = first.vector.len();
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.vector.len() != dim)
    {
        return Err(Error::Shape(format!(
            "record {i} has dimension {}, expected {dim}",
            r.vector.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + records.len() * (16 + 4 * dim));
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        buf.extend_from_slice(&r.x.to_le_bytes());
        buf.extend_from_slice(&r.y.to_le_bytes());
        for v in &r.vector {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut rd = Reader { bytes, pos: 0 };
    if rd.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected \"PDLF\""));
    }
    let version = rd.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = rd.u32("count")? as usize;
    let dim = rd.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::format(12, "dimension is zero"));
    }
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let x = rd.f64("x")?;
        let y = rd.f64("y")?;
        let at = rd.pos;
        let raw = rd.take(4 * dim, &format!("vector of record {i} (dim {dim})"))?;
        let vector: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = vector.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                (at + 4 * k) as u64,
                format!("record {i} has a non-finite value"),
            ));
        }
        records.push(FeatureRecord { x, y, vector });
    }
    if rd.pos != bytes.len() {
        return Err(Error::format(
            rd.pos as u64,
            format!(
                "{} trailing bytes after {count} records",
                bytes.len() - rd.pos
            ),
        ));
    }
    Ok(records)
}

pub fn export_features(records: &[FeatureRecord], path: &Path) -> Result<()> {
    let buf = encode_features(records)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn import_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}
