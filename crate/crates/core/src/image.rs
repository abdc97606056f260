//! Float images, binary masks, PNG I/O and the dihedral transforms used for
//! augmentation.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (`channels × height × width`) float image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar data. Values are clamped into `[0, 1]`;
    /// non-finite values are rejected.
    pub fn from_planar(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image has a zero dimension".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "image contains non-finite values".into(),
            ));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_planar(height, width, 1, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::from_planar(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Row-major plane of one channel.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// The image as a `channels × height × width` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.clone())
            .expect("image dimensions are non-zero")
    }

    /// Grayscale plane as an `H × W` tensor.
    pub fn gray_tensor(&self) -> Tensor {
        let g = rgb_to_gray(self);
        Tensor::from_vec(&[self.height, self.width], g.data).expect("image dimensions are non-zero")
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let is_gray = matches!(
            img.color(),
            image::ColorType::L8
                | image::ColorType::L16
                | image::ColorType::La8
                | image::ColorType::La16
        );
        if is_gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let data = g.pixels().map(|p| p[0] as f32 / 255.0).collect();
            Image::from_planar(h as usize, w as usize, 1, data)
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let n = (w * h) as usize;
            let mut data = vec![0.0; 3 * n];
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * n + i] = p[c] as f32 / 255.0;
                }
            }
            Image::from_planar(h as usize, w as usize, 3, data)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let n = self.height * self.width;
        let res = if self.channels == 1 {
            let buf: GrayImage =
                ImageBuffer::from_fn(w, h, |x, y| Luma([to_u8(self.data[(y * w + x) as usize])]));
            buf.save(path)
        } else {
            let buf: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
                let i = (y * w + x) as usize;
                Rgb([
                    to_u8(self.data[i]),
                    to_u8(self.data[n + i]),
                    to_u8(self.data[2 * n + i]),
                ])
            });
            buf.save(path)
        };
        res.map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    fn map_planes(&self, f: impl Fn(&[f32]) -> (Vec<f32>, usize, usize)) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        let mut dims = (self.height, self.width);
        for c in 0..self.channels {
            let (p, h, w) = f(self.plane(c));
            dims = (h, w);
            data.extend(p);
        }
        Image {
            height: dims.0,
            width: dims.1,
            channels: self.channels,
            data,
        }
    }

    pub fn transformed(&self, t: Transform) -> Image {
        self.map_planes(|p| t.apply(p, self.height, self.width))
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary segmentation mask; every value is 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{height}x{width} mask needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "mask value {bad} is not binary"
            )));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Mask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn foreground(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// Reads a grayscale PNG; pixels above mid-gray are foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| (p[0] > 127) as u8).collect();
        Mask::new(h as usize, w as usize, data)
    }

    /// Writes the mask as a 0/255 grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let w = self.width as u32;
        let buf: GrayImage = ImageBuffer::from_fn(w, self.height as u32, |x, y| {
            Luma([self.data[(y * w + x) as usize] * 255])
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn transformed(&self, t: Transform) -> Mask {
        let (data, height, width) = t.apply(&self.data, self.height, self.width);
        Mask {
            height,
            width,
            data,
        }
    }
}

/// Converts RGB to luminance with weights 0.299/0.587/0.114. Single-channel
/// images are returned unchanged.
pub fn rgb_to_gray(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let n = img.height * img.width;
    let (r, g, b) = (&img.data[..n], &img.data[n..2 * n], &img.data[2 * n..]);
    let data = (0..n)
        .map(|i| (0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i]).clamp(0.0, 1.0))
        .collect();
    Image {
        height: img.height,
        width: img.width,
        channels: 1,
        data,
    }
}

/// Pixel-permuting transforms of the dihedral group used for augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    /// Clockwise quarter turn.
    Rot90,
    Rot180,
    Rot270,
    /// Mirror left-right.
    FlipH,
    /// Mirror top-bottom.
    FlipV,
}

impl Transform {
    pub const AUGMENTATIONS: [Transform; 6] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::FlipH,
        Transform::FlipV,
    ];

    pub fn suffix(self) -> &'static str {
        match self {
            Transform::Identity => "orig",
            Transform::Rot90 => "rot90",
            Transform::Rot180 => "rot180",
            Transform::Rot270 => "rot270",
            Transform::FlipH => "hflip",
            Transform::FlipV => "vflip",
        }
    }

    /// Output dimensions for an `h × w` input.
    pub fn output_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Rot90 | Transform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Maps output pixel `(y, x)` to the source pixel it is copied from.
    #[inline]
    pub fn source_of(self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Transform::Identity => (y, x),
            Transform::Rot90 => (h - 1 - x, y),
            Transform::Rot180 => (h - 1 - y, w - 1 - x),
            Transform::Rot270 => (x, w - 1 - y),
            Transform::FlipH => (y, w - 1 - x),
            Transform::FlipV => (h - 1 - y, x),
        }
    }

    /// Where source pixel `(y, x)` lands in the output.
    pub fn forward_point(self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
        match self {
            Transform::Identity => (y, x),
            Transform::Rot90 => (x, hm - y),
            Transform::Rot180 => (hm - y, wm - x),
            Transform::Rot270 => (wm - x, y),
            Transform::FlipH => (y, wm - x),
            Transform::FlipV => (hm - y, x),
        }
    }

    pub fn apply<T: Copy>(self, src: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let (oh, ow) = self.output_dims(h, w);
        let mut out = Vec::with_capacity(src.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = self.source_of(y, x, h, w);
                out.push(src[sy * w + sx]);
            }
        }
        (out, oh, ow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(r: f32, g: f32, b: f32) -> Image {
        Image::from_planar(1, 1, 3, vec![r, g, b]).unwrap()
    }

    #[test]
    fn gray_weights() {
        assert_eq!(rgb_to_gray(&rgb(1.0, 1.0, 1.0)).data()[0], 1.0);
        assert_eq!(rgb_to_gray(&rgb(0.0, 0.0, 0.0)).data()[0], 0.0);
        assert!((rgb_to_gray(&rgb(1.0, 0.0, 0.0)).data()[0] - 0.299).abs() < 1e-7);
    }

    #[test]
    fn gray_input_passes_through() {
        let g = Image::gray(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(rgb_to_gray(&g), g);
    }

    #[test]
    fn rejects_bad_channel_count() {
        assert!(Image::from_planar(1, 1, 2, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(Mask::new(1, 2, vec![0, 2]).is_err());
    }

    #[test]
    fn rot90_moves_top_left_to_top_right() {
        // 2x3 source, values are indices.
        let src: Vec<u8> = (0..6).collect();
        let (out, h, w) = Transform::Rot90.apply(&src, 2, 3);
        assert_eq!((h, w), (3, 2));
        assert_eq!(out, vec![3, 0, 4, 1, 5, 2]);
    }

    #[test]
    fn forward_point_agrees_with_apply() {
        let (h, w) = (4, 7);
        let src: Vec<usize> = (0..h * w).collect();
        for t in Transform::AUGMENTATIONS {
            let (out, _, ow) = t.apply(&src, h, w);
            for y in 0..h {
                for x in 0..w {
                    let (ny, nx) = t.forward_point(y as f64, x as f64, h, w);
                    assert_eq!(out[ny as usize * ow + nx as usize], y * w + x, "{t:?}");
                }
            }
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_fn(5, 4, |y, x| (y + x) % 3 == 0);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);

        let img = Image::from_planar(2, 2, 3, (0..12).map(|i| i as f32 / 255.0).collect()).unwrap();
        let p = dir.path().join("i.png");
        img.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back.channels(), 3);
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
