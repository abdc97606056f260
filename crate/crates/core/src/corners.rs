//! Minimum-eigenvalue (Shi-Tomasi) corner detection.
//!
//! Gradients come from 3×3 Sobel kernels with replicated borders. The
//! second-moment matrix is accumulated over a uniform square window that is
//! clipped at the image border, and the corner score is the smaller
//! eigenvalue of that matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{rgb_to_gray, Image};
use crate::tensor::Tensor;

/// A detected interest point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerPoint {
    pub x: usize,
    pub y: usize,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    /// Upper bound on returned points.
    pub max_points: usize,
    /// Callers warn when fewer points than this are found.
    pub min_points_warn: usize,
    /// Score threshold as a fraction of the strongest response.
    pub quality: f32,
    /// Minimum Euclidean distance between accepted points, in pixels.
    pub min_distance: f32,
    /// Side of the square accumulation window; odd.
    pub window: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            max_points: 15,
            min_points_warn: 10,
            quality: 0.01,
            min_distance: 10.0,
            window: 5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_points == 0 {
            return Err(Error::Config(
                "detector.max_points must be at least 1".into(),
            ));
        }
        if !(self.quality > 0.0 && self.quality < 1.0) {
            return Err(Error::Config(format!(
                "detector.quality must lie in (0, 1), got {}",
                self.quality
            )));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "detector.window must be odd and at least 3, got {}",
                self.window
            )));
        }
        if !(self.min_distance >= 0.0) {
            return Err(Error::Config(
                "detector.min_distance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Window sums of the gradient products at every pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureField {
    pub height: usize,
    pub width: usize,
    pub sum_ix2: Vec<f64>,
    pub sum_iy2: Vec<f64>,
    pub sum_ixiy: Vec<f64>,
}

/// Sobel derivatives `(Ix, Iy)` of a single-channel image.
pub fn image_gradients(gray: &Image) -> Result<(Tensor, Tensor)> {
    if gray.channels() != 1 {
        return Err(Error::InvalidArgument(
            "gradients need a single-channel image".into(),
        ));
    }
    let (h, w) = (gray.height(), gray.width());
    if h < 3 || w < 3 {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} is smaller than 3x3"
        )));
    }
    let p = gray.plane(0);
    let px = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        p[yy * w + xx]
    };
    let mut ix = Tensor::zeros(&[h, w]);
    let mut iy = Tensor::zeros(&[h, w]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            ix.set2(y as usize, x as usize, gx);
            iy.set2(y as usize, x as usize, gy);
        }
    }
    Ok((ix, iy))
}

/// Summed-area table with one row and column of leading zeros.
fn integral(values: impl Iterator<Item = f64>, h: usize, w: usize) -> Vec<f64> {
    let mut table = vec![0.0; (h + 1) * (w + 1)];
    let mut it = values;
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += it.next().expect("h*w values");
            table[(y + 1) * (w + 1) + x + 1] = table[y * (w + 1) + x + 1] + row;
        }
    }
    table
}

fn window_sums(table: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let stride = w + 1;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(radius), (y + radius + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(radius), (x + radius + 1).min(w));
            let s = table[y1 * stride + x1] - table[y0 * stride + x1] - table[y1 * stride + x0]
                + table[y0 * stride + x0];
            out.push(s);
        }
    }
    out
}

/// Uniform-window sums of `Ix²`, `Iy²` and `Ix·Iy`. The window is centered
/// on each pixel and clipped at the image border.
pub fn structure_field(ix: &Tensor, iy: &Tensor, window: usize) -> Result<StructureField> {
    if ix.shape() != iy.shape() || ix.ndim() != 2 {
        return Err(Error::Shape(format!(
            "gradient shapes {:?} and {:?} differ",
            ix.shape(),
            iy.shape()
        )));
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "window must be odd, got {window}"
        )));
    }
    let (h, w) = (ix.shape()[0], ix.shape()[1]);
    let (gx, gy) = (ix.data(), iy.data());
    let r = window / 2;
    let xx = integral(gx.iter().map(|&v| v as f64 * v as f64), h, w);
    let yy = integral(gy.iter().map(|&v| v as f64 * v as f64), h, w);
    let xy = integral(gx.iter().zip(gy).map(|(&a, &b)| a as f64 * b as f64), h, w);
    Ok(StructureField {
        height: h,
        width: w,
        sum_ix2: window_sums(&xx, h, w, r),
        sum_iy2: window_sums(&yy, h, w, r),
        sum_ixiy: window_sums(&xy, h, w, r),
    })
}

/// Smaller eigenvalue of the symmetric matrix `[[a, c], [c, b]]`, floored at 0.
#[inline]
pub fn min_eigenvalue(a: f64, b: f64, c: f64) -> f64 {
    let mean = 0.5 * (a + b);
    let half_diff = 0.5 * (a - b);
    (mean - (half_diff * half_diff + c * c).sqrt()).max(0.0)
}

/// Per-pixel Shi-Tomasi score `min(λ1, λ2)`.
pub fn shi_tomasi_score(field: &StructureField) -> Tensor {
    let data = field
        .sum_ix2
        .iter()
        .zip(&field.sum_iy2)
        .zip(&field.sum_ixiy)
        .map(|((&a, &b), &c)| min_eigenvalue(a, b, c) as f32)
        .collect();
    Tensor::from_vec(&[field.height, field.width], data).expect("field dimensions are consistent")
}

/// Score map for an image of any channel count.
pub fn score_map(img: &Image, window: usize) -> Result<Tensor> {
    let gray = rgb_to_gray(img);
    let (ix, iy) = image_gradients(&gray)?;
    let field = structure_field(&ix, &iy, window)?;
    Ok(shi_tomasi_score(&field))
}

/// Detects up to `cfg.max_points` corners, strongest first.
///
/// Candidates score at least `cfg.quality` times the strongest response and
/// are accepted greedily while they stay `cfg.min_distance` away from every
/// point already taken. Equal scores keep row-major order. A flat image
/// yields no points.
pub fn detect_corners(img: &Image, cfg: &DetectorConfig) -> Result<Vec<CornerPoint>> {
    cfg.validate()?;
    if img.height() < cfg.window || img.width() < cfg.window {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {}-pixel window",
            img.height(),
            img.width(),
            cfg.window
        )));
    }
    let score = score_map(img, cfg.window)?;
    let best = score.max();
    if !(best > 0.0) {
        return Ok(Vec::new());
    }
    let threshold = cfg.quality * best;
    let w = img.width();
    let mut candidates: Vec<(usize, f32)> = score
        .data()
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s >= threshold && s > 0.0)
        .map(|(i, &s)| (i, s))
        .collect();
    // Stable: ties stay in row-major order.
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1));

    let min_d2 = (cfg.min_distance as f64).powi(2);
    let mut picked: Vec<CornerPoint> = Vec::with_capacity(cfg.max_points);
    for (i, s) in candidates {
        let (y, x) = (i / w, i % w);
        let clear = picked.iter().all(|p| {
            let dx = p.x as f64 - x as f64;
            let dy = p.y as f64 - y as f64;
            dx * dx + dy * dy >= min_d2
        });
        if clear {
            picked.push(CornerPoint { x, y, score: s });
            if picked.len() == cfg.max_points {
                break;
            }
        }
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Transform;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::gray(h, w, (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn square_image() -> Image {
        let (h, w) = (64, 64);
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                ((20..44).contains(&y) && (20..44).contains(&x)) as u8 as f32
            })
            .collect();
        Image::gray(h, w, data).unwrap()
    }

    #[test]
    fn constant_image_has_zero_gradients() {
        let img = Image::filled(6, 7, 1, 0.3).unwrap();
        let (ix, iy) = image_gradients(&img).unwrap();
        assert!(ix.data().iter().chain(iy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_edge() {
        let (h, w) = (8, 10);
        let img = Image::gray(
            h,
            w,
            (0..h * w).map(|i| (i % w >= 5) as u8 as f32).collect(),
        )
        .unwrap();
        let (ix, iy) = image_gradients(&img).unwrap();
        assert!(iy.data().iter().all(|&v| v == 0.0));
        let peak = ix.max();
        for y in 0..h {
            assert_eq!(ix.at2(y, 4), peak);
            assert_eq!(ix.at2(y, 5), peak);
            assert_eq!(ix.at2(y, 2), 0.0);
        }
    }

    #[test]
    fn ramp_has_constant_interior_derivative() {
        let (h, w) = (6, 12);
        let img = Image::gray(
            h,
            w,
            (0..h * w).map(|i| (i % w) as f32 / w as f32).collect(),
        )
        .unwrap();
        let (ix, iy) = image_gradients(&img).unwrap();
        for y in 0..h {
            for x in 1..w - 1 {
                assert!((ix.at2(y, x) - 8.0 / w as f32).abs() < 1e-6);
                assert_eq!(iy.at2(y, x), 0.0);
            }
        }
    }

    #[test]
    fn tiny_image_is_rejected() {
        let img = Image::filled(2, 5, 1, 0.0).unwrap();
        assert!(image_gradients(&img).is_err());
    }

    #[test]
    fn structure_field_counts_window() {
        let ix = Tensor::full(&[6, 6], 1.0);
        let iy = Tensor::zeros(&[6, 6]);
        let f = structure_field(&ix, &iy, 3).unwrap();
        assert_eq!(f.sum_ix2[2 * 6 + 3], 9.0);
        assert_eq!(f.sum_ix2[0], 4.0);
        assert!(f.sum_iy2.iter().chain(&f.sum_ixiy).all(|&v| v == 0.0));

        let zero = structure_field(&iy, &iy, 5).unwrap();
        assert!(zero.sum_ix2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn structure_field_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w, win) = (8, 8, 5usize);
        let gx: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gy: Vec<f32> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ix = Tensor::from_vec(&[h, w], gx.clone()).unwrap();
        let iy = Tensor::from_vec(&[h, w], gy.clone()).unwrap();
        let f = structure_field(&ix, &iy, win).unwrap();
        let r = (win / 2) as isize;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                            continue;
                        }
                        let k = yy as usize * w + xx as usize;
                        a += (gx[k] * gx[k]) as f64;
                        b += (gy[k] * gy[k]) as f64;
                        c += (gx[k] * gy[k]) as f64;
                    }
                }
                let k = y as usize * w + x as usize;
                assert!((f.sum_ix2[k] - a).abs() < 1e-5);
                assert!((f.sum_iy2[k] - b).abs() < 1e-5);
                assert!((f.sum_ixiy[k] - c).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn structure_field_is_cauchy_schwarz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 12, 12);
        let (ix, iy) = image_gradients(&img).unwrap();
        let f = structure_field(&ix, &iy, 5).unwrap();
        for k in 0..f.sum_ix2.len() {
            let (a, b, c) = (f.sum_ix2[k], f.sum_iy2[k], f.sum_ixiy[k]);
            assert!(a >= 0.0 && b >= 0.0);
            assert!(a * b >= c * c - 1e-6 * (1.0 + a * b));
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(min_eigenvalue(4.0, 9.0, 0.0), 4.0);
        assert_eq!(min_eigenvalue(5.0, 5.0, 5.0), 0.0);
        assert_eq!(min_eigenvalue(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn uniform_image_has_no_corners() {
        let img = Image::filled(32, 32, 1, 0.5).unwrap();
        assert!(detect_corners(&img, &DetectorConfig::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn square_yields_its_four_corners() {
        let img = square_image();
        let cfg = DetectorConfig::default();
        let pts = detect_corners(&img, &cfg).unwrap();
        assert_eq!(pts.len(), 4, "{pts:?}");
        let truth = [(20.0, 20.0), (20.0, 43.0), (43.0, 20.0), (43.0, 43.0)];
        for (ty, tx) in truth {
            let near = pts.iter().any(|p| {
                let d = ((p.y as f64 - ty).powi(2) + (p.x as f64 - tx).powi(2)).sqrt();
                d < cfg.min_distance as f64
            });
            assert!(near, "no point near ({ty}, {tx}) in {pts:?}");
        }

        // Brute-force eigenvalues put the global maxima at the same corners.
        let (ix, iy) = image_gradients(&img).unwrap();
        let (h, w) = (64usize, 64usize);
        let mut best = 0.0f64;
        let mut brute = vec![0.0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        let (gx, gy) = (ix.at2(yy, xx) as f64, iy.at2(yy, xx) as f64);
                        a += gx * gx;
                        b += gy * gy;
                        c += gx * gy;
                    }
                }
                // Roots of λ² − (a+b)λ + (ab − c²).
                let tr = a + b;
                let det = a * b - c * c;
                let lam = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
                brute[y * w + x] = lam;
                best = best.max(lam);
            }
        }
        for p in &pts {
            assert!((brute[p.y * w + p.x] - best).abs() <= 1e-3 * best);
        }
    }

    #[test]
    fn cap_and_spacing_are_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 48, 48);
        let one = DetectorConfig {
            max_points: 1,
            ..Default::default()
        };
        assert!(detect_corners(&img, &one).unwrap().len() <= 1);

        let cfg = DetectorConfig::default();
        let pts = detect_corners(&img, &cfg).unwrap();
        assert!(pts.len() <= cfg.max_points);
        for (i, p) in pts.iter().enumerate() {
            assert!(p.x < 48 && p.y < 48);
            for q in &pts[i + 1..] {
                let d2 = (p.x as f32 - q.x as f32).powi(2) + (p.y as f32 - q.y as f32).powi(2);
                assert!(d2 >= cfg.min_distance.powi(2));
            }
        }
        for pair in pts.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
    }

    #[test]
    fn rotation_covariance() {
        // A few isolated bright rectangles give well-separated, distinct corners.
        let (h, w) = (40, 56);
        let rects = [(4, 9, 6, 15), (20, 31, 30, 37), (8, 14, 40, 51)];
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let hit = rects
                    .iter()
                    .position(|&(y0, y1, x0, x1)| (y0..y1).contains(&y) && (x0..x1).contains(&x));
                match hit {
                    Some(k) => 0.3 + 0.25 * k as f32,
                    None => 0.0,
                }
            })
            .collect();
        let img = Image::gray(h, w, data).unwrap();
        let cfg = DetectorConfig {
            min_distance: 0.0,
            max_points: 100_000,
            ..Default::default()
        };
        let base = detect_corners(&img, &cfg).unwrap();
        let rot = detect_corners(&img.transformed(Transform::Rot90), &cfg).unwrap();
        assert_eq!(base.len(), rot.len());
        let mut expected: Vec<(usize, usize)> = base
            .iter()
            .map(|p| {
                let (y, x) = Transform::Rot90.forward_point(p.y as f64, p.x as f64, h, w);
                (y as usize, x as usize)
            })
            .collect();
        let mut got: Vec<(usize, usize)> = rot.iter().map(|p| (p.y, p.x)).collect();
        expected.sort();
        got.sort();
        assert_eq!(expected, got);
        for (a, b) in base.iter().zip(&rot) {
            assert!((a.score - b.score).abs() <= 1e-4 * a.score.max(1.0));
        }
        assert!(!base.is_empty());
    }
}
