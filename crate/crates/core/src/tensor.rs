//! Row-major `f32` arrays and the few numeric operations the pipeline needs.

use crate::error::{Error, Result};

/// N-dimensional row-major array of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "shape {shape:?} has a zero or missing dimension"
            )));
        }
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value at `(row, col)` of a 2-D tensor.
    #[inline]
    pub fn at2(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    #[inline]
    pub fn set2(&mut self, row: usize, col: usize, value: f32) {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        self.data[row * w + col] = value;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, k: f32) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }
}

/// Source coordinate sampled by destination index `i` under corner-aligned
/// sampling. A single destination sample maps to the source center.
#[inline]
fn source_coord(i: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len == 1 {
        (src_len - 1) as f64 / 2.0
    } else {
        i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

/// Interpolation taps `(lo, hi, frac)` for every destination index.
fn taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f32)> {
    (0..dst_len)
        .map(|i| {
            let s = source_coord(i, src_len, dst_len);
            let lo = (s.floor() as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, (s - lo as f64) as f32)
        })
        .collect()
}

/// Resizes a row-major `src_h × src_w` plane into `dst`, which must hold
/// `dst_h × dst_w` values.
pub fn resize_plane(
    src: &[f32],
    src_h: usize,
    src_w: usize,
    dst: &mut [f32],
    dst_h: usize,
    dst_w: usize,
) {
    debug_assert_eq!(src.len(), src_h * src_w);
    debug_assert_eq!(dst.len(), dst_h * dst_w);
    let rows = taps(src_h, dst_h);
    let cols = taps(src_w, dst_w);
    for (r, &(y0, y1, fy)) in rows.iter().enumerate() {
        let top = &src[y0 * src_w..(y0 + 1) * src_w];
        let bottom = &src[y1 * src_w..(y1 + 1) * src_w];
        let out = &mut dst[r * dst_w..(r + 1) * dst_w];
        for (o, &(x0, x1, fx)) in out.iter_mut().zip(&cols) {
            let t = top[x0] + (top[x1] - top[x0]) * fx;
            let b = bottom[x0] + (bottom[x1] - bottom[x0]) * fx;
            *o = t + (b - t) * fy;
        }
    }
}

/// Bilinear resize of a 2-D tensor with corner-aligned sampling.
pub fn resize_bilinear(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if t.ndim() != 2 {
        return Err(Error::Shape(format!(
            "resize expects a 2-D tensor, got {:?}",
            t.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "resize target {out_h}x{out_w} has a zero dimension"
        )));
    }
    let (h, w) = (t.shape[0], t.shape[1]);
    if (h, w) == (out_h, out_w) {
        return Ok(t.clone());
    }
    let mut out = Tensor::zeros(&[out_h, out_w]);
    resize_plane(&t.data, h, w, &mut out.data, out_h, out_w);
    Ok(out)
}
