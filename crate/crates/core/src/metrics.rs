//! Confusion-matrix segmentation metrics and the Otsu baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{rgb_to_gray, Image, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    pub iou: f64,
    pub dice: f64,
    pub voe: f64,
    pub sens: f64,
    pub prec: f64,
    pub spec: f64,
}

/// Pixelwise counts with 1 as the foreground label.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// `num / den`, or `empty` when the denominator is zero.
fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, IoU, Dice, VOE, sensitivity, precision and specificity.
///
/// A zero denominator scores 1 when the ground-truth set it refers to is
/// empty (nothing to find, nothing found) and 0 otherwise.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    let gt_pos = c.tp + c.fn_;
    let gt_neg = c.tn + c.fp;
    let union = c.tp + c.fp + c.fn_;
    let empty_gt = if gt_pos == 0 { 1.0 } else { 0.0 };
    let iou = ratio(c.tp, union, empty_gt);
    MetricsReport {
        acc: ratio(c.tp + c.tn, c.total(), 1.0),
        iou,
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, empty_gt),
        voe: if union == 0 {
            1.0 - iou
        } else {
            (c.fp + c.fn_) as f64 / union as f64
        },
        sens: ratio(c.tp, gt_pos, empty_gt),
        prec: ratio(c.tp, c.tp + c.fp, empty_gt),
        spec: ratio(c.tn, gt_neg, if gt_neg == 0 { 1.0 } else { 0.0 }),
    }
}

/// Arithmetic mean of per-image reports.
pub fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    if reports.is_empty() {
        return MetricsReport::default();
    }
    let n = reports.len() as f64;
    let mut m = MetricsReport::default();
    for r in reports {
        m.acc += r.acc;
        m.iou += r.iou;
        m.dice += r.dice;
        m.voe += r.voe;
        m.sens += r.sens;
        m.prec += r.prec;
        m.spec += r.spec;
    }
    MetricsReport {
        acc: m.acc / n,
        iou: m.iou / n,
        dice: m.dice / n,
        voe: m.voe / n,
        sens: m.sens / n,
        prec: m.prec / n,
        spec: m.spec / n,
    }
}

/// 8-bit level of a `[0, 1]` intensity.
#[inline]
pub fn to_level(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn histogram256(img: &Image) -> [u64; 256] {
    let gray = rgb_to_gray(img);
    let mut hist = [0u64; 256];
    for &v in gray.plane(0) {
        hist[to_level(v) as usize] += 1;
    }
    hist
}

/// Otsu level `t`: pixels at levels `<= t` form the lower class. `None` when
/// no level splits the image into two non-empty classes.
pub fn otsu_level(img: &Image) -> Option<u8> {
    let hist = histogram256(img);
    let total: u64 = hist.iter().sum();
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0u64, 0.0f64);
    let mut best: Option<(u8, f64)> = None;
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let mu0 = sum0 / w0 as f64;
        let mu1 = (sum_all - sum0) / w1 as f64;
        let between = (w0 as f64 / total as f64) * (w1 as f64 / total as f64) * (mu0 - mu1).powi(2);
        if best.is_none_or(|(_, b)| between > b) {
            best = Some((t as u8, between));
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu binarization with the smaller class as foreground. A constant image
/// is all background.
pub fn otsu_threshold(img: &Image) -> Mask {
    let gray = rgb_to_gray(img);
    let (h, w) = (gray.height(), gray.width());
    let Some(t) = otsu_level(&gray) else {
        return Mask::zeros(h, w);
    };
    let upper: Vec<bool> = gray.plane(0).iter().map(|&v| to_level(v) > t).collect();
    let n_upper = upper.iter().filter(|&&u| u).count();
    let fg_is_upper = n_upper * 2 <= upper.len();
    let data = upper.iter().map(|&u| (u == fg_is_upper) as u8).collect();
    Mask::new(h, w, data).expect("mask built from image dims")
}
