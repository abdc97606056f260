//! Sample pairs on disk, augmentation, grouped splitting, resizing and the
//! synthetic low-contrast generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask, Transform};
use crate::tensor::resize_plane;

/// An image with its ground-truth mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: Image,
    pub gt: Mask,
    pub id: String,
    pub class_tag: String,
    /// Id of the un-augmented sample this pair derives from.
    pub origin: String,
}

impl SamplePair {
    pub fn new(image: Image, gt: Mask, id: &str, class_tag: &str) -> Result<Self> {
        if (image.height(), image.width()) != (gt.height(), gt.width()) {
            return Err(Error::Shape(format!(
                "sample {id}: image {}x{} vs mask {}x{}",
                image.height(),
                image.width(),
                gt.height(),
                gt.width()
            )));
        }
        Ok(SamplePair {
            image,
            gt,
            id: id.to_string(),
            class_tag: class_tag.to_string(),
            origin: id.to_string(),
        })
    }
}

/// The original plus three rotations and two mirrors, with image and mask
/// transformed together.
pub fn augment(s: &SamplePair) -> Vec<SamplePair> {
    Transform::AUGMENTATIONS
        .iter()
        .map(|&t| SamplePair {
            image: s.image.transformed(t),
            gt: s.gt.transformed(t),
            id: format!("{}_{}", s.id, t.suffix()),
            class_tag: s.class_tag.clone(),
            origin: s.origin.clone(),
        })
        .collect()
}

pub fn augment_all(samples: &[SamplePair]) -> Vec<SamplePair> {
    samples.iter().flat_map(augment).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    /// Relative train, validation and test shares.
    pub ratios: [u32; 3],
    pub seed: u64,
    /// Shuffle individual samples instead of keeping every variant of an
    /// original in the same part. This lets rotated copies of one image land
    /// in different parts.
    pub ungrouped: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [1, 1, 2],
            seed: 0,
            ungrouped: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Val,
    Test,
}

/// Sizes of the three parts for `units` items, by largest remainder.
fn part_sizes(units: usize, ratios: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    let exact: Vec<f64> = ratios
        .iter()
        .map(|&r| units as f64 * r as f64 / total as f64)
        .collect();
    let mut sizes = [0usize; 3];
    for k in 0..3 {
        sizes[k] = exact[k].floor() as usize;
    }
    let mut left = units - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for k in order {
        if left == 0 {
            break;
        }
        if ratios[k] > 0 {
            sizes[k] += 1;
            left -= 1;
        }
    }
    sizes
}

/// Part assignment for every sample, in input order.
///
/// Samples are split per class. Within a class the groups (originals, or
/// single samples when `ungrouped`) are shuffled with the seed and cut by the
/// ratios.
pub fn assign_parts(samples: &[SamplePair], spec: &SplitSpec) -> Result<Vec<Part>> {
    if spec.ratios.iter().all(|&r| r == 0) {
        return Err(Error::InvalidArgument("split ratios are all zero".into()));
    }
    let mut classes: BTreeMap<&str, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = if spec.ungrouped {
            s.id.clone()
        } else {
            s.origin.clone()
        };
        classes
            .entry(&s.class_tag)
            .or_default()
            .entry(key)
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts = vec![Part::Train; samples.len()];
    for (class, groups) in classes {
        let mut keys: Vec<&String> = groups.keys().collect();
        keys.shuffle(&mut rng);
        let sizes = part_sizes(keys.len(), spec.ratios);
        for (k, &size) in sizes.iter().enumerate() {
            if spec.ratios[k] > 0 && size == 0 {
                return Err(Error::InvalidArgument(format!(
                    "class {class}: {} groups cannot fill ratios {:?}",
                    keys.len(),
                    spec.ratios
                )));
            }
        }
        let labels = [Part::Train, Part::Val, Part::Test];
        let mut it = keys.into_iter();
        for (k, &size) in sizes.iter().enumerate() {
            for key in it.by_ref().take(size) {
                for &i in &groups[key] {
                    parts[i] = labels[k];
                }
            }
        }
    }
    Ok(parts)
}

pub struct Split {
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

pub fn split(samples: Vec<SamplePair>, spec: &SplitSpec) -> Result<Split> {
    let parts = assign_parts(&samples, spec)?;
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (s, p) in samples.into_iter().zip(parts) {
        match p {
            Part::Train => out.train.push(s),
            Part::Val => out.val.push(s),
            Part::Test => out.test.push(s),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    /// Blob intensity above background, in `(0, 0.5]`.
    pub contrast: f32,
    pub noise_sigma: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            count: 20,
            height: 96,
            width: 128,
            contrast: 0.1,
            noise_sigma: 0.05,
        }
    }
}

/// An ellipse whose radius is modulated by a sinusoid around its center.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    lobes: f64,
    amp: f64,
    phase: f64,
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f64;
        Blob {
            cy: rng.random_range(0.25..0.75) * h as f64,
            cx: rng.random_range(0.25..0.75) * w as f64,
            ry: rng.random_range(0.12..0.28) * side,
            rx: rng.random_range(0.12..0.28) * side,
            angle: rng.random_range(0.0..std::f64::consts::PI),
            lobes: rng.random_range(2..=6) as f64,
            amp: rng.random_range(0.0..0.2),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let r = (u * u + v * v).sqrt();
        let phi = v.atan2(u);
        r <= 1.0 + self.amp * (self.lobes * phi + self.phase).sin()
    }
}

/// Low-contrast images of one or two smooth blobs on a flat background with
/// Gaussian pixel noise. The mask is the exact blob indicator.
pub fn synth_weak(cfg: &SynthConfig) -> Result<Vec<SamplePair>> {
    if !(cfg.contrast > 0.0 && cfg.contrast <= 0.5) {
        return Err(Error::InvalidArgument(format!(
            "contrast must lie in (0, 0.5], got {}",
            cfg.contrast
        )));
    }
    if !(cfg.noise_sigma >= 0.0) || cfg.height < 8 || cfg.width < 8 {
        return Err(Error::InvalidArgument(
            "noise must be non-negative and images at least 8x8".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    (0..cfg.count)
        .map(|i| {
            let background = rng.random_range(0.25..0.45f32);
            let n_blobs = rng.random_range(1..=2);
            let blobs: Vec<Blob> = (0..n_blobs).map(|_| Blob::random(&mut rng, h, w)).collect();
            let gt = Mask::from_fn(h, w, |y, x| {
                blobs.iter().any(|b| b.contains(y as f64, x as f64))
            });
            let data: Vec<f32> = gt
                .data()
                .iter()
                .map(|&m| {
                    let noise = if cfg.noise_sigma > 0.0 {
                        Normal::new(0.0, cfg.noise_sigma).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    };
                    background + cfg.contrast * m as f32 + noise
                })
                .collect();
            SamplePair::new(
                Image::gray(h, w, data)?,
                gt,
                &format!("synth{i:04}"),
                "synth",
            )
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "percent", rename_all = "snake_case")]
pub enum Perturbation {
    /// Additive Gaussian noise with sigma `p / 100`.
    Gauss(f32),
    /// Replace `p` percent of pixels with black or white.
    SaltPepper(f32),
    /// Scale intensities by `1 + p / 100`.
    Brightness(f32),
}

impl Perturbation {
    pub fn parse(kind: &str, percent: f32) -> Result<Self> {
        match kind {
            "gauss" => Ok(Perturbation::Gauss(percent)),
            "salt_pepper" | "salt-pepper" => Ok(Perturbation::SaltPepper(percent)),
            "brightness" => Ok(Perturbation::Brightness(percent)),
            other => Err(Error::InvalidArgument(format!(
                "unknown perturbation {other:?}"
            ))),
        }
    }
}

/// Seeded noise or brightness change; results are clamped to `[0, 1]`.
pub fn perturb(img: &Image, kind: Perturbation, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        Perturbation::Gauss(p) => {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "gauss percent {p} outside [0, 100]"
                )));
            }
            if p == 0.0 {
                return Ok(img.clone());
            }
            let normal = Normal::new(0.0, p / 100.0).unwrap();
            let data = img
                .data()
                .iter()
                .map(|&v| v + normal.sample(&mut rng))
                .collect();
            Image::from_planar(img.height(), img.width(), img.channels(), data)
        }
        Perturbation::SaltPepper(p) => {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "salt-pepper percent {p} outside [0, 100]"
                )));
            }
            let (h, w, c) = (img.height(), img.width(), img.channels());
            let mut data = img.data().to_vec();
            for i in 0..h * w {
                if rng.random::<f32>() * 100.0 < p {
                    let v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    for ch in 0..c {
                        data[ch * h * w + i] = v;
                    }
                }
            }
            Image::from_planar(h, w, c, data)
        }
        Perturbation::Brightness(p) => {
            if !(-100.0..=100.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "brightness percent {p} outside [-100, 100]"
                )));
            }
            let k = 1.0 + p / 100.0;
            Ok(img.map(|v| v * k))
        }
    }
}

/// Bilinear resize of every channel.
pub fn resize_image(img: &Image, h: usize, w: usize) -> Result<Image> {
    if (img.height(), img.width()) == (h, w) {
        return Ok(img.clone());
    }
    let mut data = vec![0.0f32; img.channels() * h * w];
    for c in 0..img.channels() {
        resize_plane(
            img.plane(c),
            img.height(),
            img.width(),
            &mut data[c * h * w..(c + 1) * h * w],
            h,
            w,
        );
    }
    Image::from_planar(h, w, img.channels(), data)
}

/// Nearest-neighbour resize with corner-aligned sampling.
pub fn resize_mask(m: &Mask, h: usize, w: usize) -> Mask {
    if (m.height(), m.width()) == (h, w) {
        return m.clone();
    }
    let pick = |i: usize, src: usize, dst: usize| -> usize {
        if dst == 1 {
            (src - 1) / 2
        } else {
            ((i as f64 * (src - 1) as f64 / (dst - 1) as f64).round() as usize).min(src - 1)
        }
    };
    Mask::from_fn(h, w, |y, x| {
        m.at(pick(y, m.height(), h), pick(x, m.width(), w)) == 1
    })
}

#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period);
    if k >= n {
        k = period - k;
    }
    k as usize
}

/// Pads to `h × w` by mirroring, keeping the original centered. Returns the
/// padded image and the `(top, left)` offset of the original.
pub fn letterbox(img: &Image, h: usize, w: usize) -> Result<(Image, (usize, usize))> {
    let (ih, iw) = (img.height(), img.width());
    if ih > h || iw > w {
        return Err(Error::InvalidArgument(format!(
            "cannot letterbox {ih}x{iw} into {h}x{w}"
        )));
    }
    let (top, left) = ((h - ih) / 2, (w - iw) / 2);
    let mut data = Vec::with_capacity(img.channels() * h * w);
    for c in 0..img.channels() {
        let plane = img.plane(c);
        for y in 0..h {
            let sy = reflect(y as isize - top as isize, ih);
            for x in 0..w {
                let sx = reflect(x as isize - left as isize, iw);
                data.push(plane[sy * iw + sx]);
            }
        }
    }
    Ok((Image::from_planar(h, w, img.channels(), data)?, (top, left)))
}

pub fn crop_mask(m: &Mask, top: usize, left: usize, h: usize, w: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| m.at(y + top, x + left) == 1)
}

/// Manifest row describing one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub class_tag: String,
    pub origin: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<Part>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn part_of(&self, id: &str) -> Option<Part> {
        self.samples
            .iter()
            .find(|e| e.id == id)
            .and_then(|e| e.split)
    }
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `<root>/<class>/{images,gt}/<id>.png` and a manifest.
pub fn save_dataset(
    root: &Path,
    samples: &[SamplePair],
    parts: Option<&[Part]>,
) -> Result<Manifest> {
    let mut manifest = Manifest::default();
    for (i, s) in samples.iter().enumerate() {
        let class_dir = root.join(&s.class_tag);
        mkdir(&class_dir.join("images"))?;
        mkdir(&class_dir.join("gt"))?;
        s.image
            .save_png(&class_dir.join("images").join(format!("{}.png", s.id)))?;
        s.gt.save_png(&class_dir.join("gt").join(format!("{}.png", s.id)))?;
        manifest.samples.push(ManifestEntry {
            id: s.id.clone(),
            class_tag: s.class_tag.clone(),
            origin: s.origin.clone(),
            split: parts.map(|p| p[i]),
        });
    }
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn sorted_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads a dataset tree. Samples follow the manifest when present, otherwise
/// classes and ids in sorted order.
pub fn load_dataset(root: &Path) -> Result<(Vec<SamplePair>, Manifest)> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
    } else {
        let mut m = Manifest::default();
        let mut classes = Vec::new();
        for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
            let path = entry.map_err(|e| Error::io(root, e))?.path();
            if path.join("images").is_dir() {
                if let Some(name) = path.file_name().and_then(|s| s.to_str()) {
                    classes.push(name.to_string());
                }
            }
        }
        classes.sort();
        for class in classes {
            for id in sorted_pngs(&root.join(&class).join("images"))? {
                m.samples.push(ManifestEntry {
                    id: id.clone(),
                    class_tag: class.clone(),
                    origin: id,
                    split: None,
                });
            }
        }
        m
    };
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let dir = root.join(&e.class_tag);
            let image = Image::load_png(&dir.join("images").join(format!("{}.png", e.id)))?;
            let gt = Mask::load_png(&dir.join("gt").join(format!("{}.png", e.id)))?;
            let mut s = SamplePair::new(image, gt, &e.id, &e.class_tag)?;
            s.origin = e.origin.clone();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((samples, manifest))
}
