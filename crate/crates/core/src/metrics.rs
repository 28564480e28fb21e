//! Segmentation metrics: mean IoU and the per-class boundary F-score.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, GaldError, Result};

/// Pixel slacks used for the boundary F-score report.
pub const STANDARD_SLACKS: [usize; 4] = [3, 5, 9, 12];

/// An `h x w` map of class indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u32>,
    /// Pixels with this value are skipped by every metric.
    pub ignore: Option<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != h * w {
            return Err(GaldError::Length {
                expected: h * w,
                actual: data.len(),
            });
        }
        Ok(LabelMap {
            h,
            w,
            data,
            ignore: None,
        })
    }

    pub fn filled(h: usize, w: usize, class: u32) -> Self {
        LabelMap {
            h,
            w,
            data: vec![class; h * w],
            ignore: None,
        }
    }

    pub fn with_ignore(mut self, ignore: u32) -> Self {
        self.ignore = Some(ignore);
        self
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u32) {
        self.data[y * self.w + x] = class;
    }

    fn is_ignored(&self, v: u32) -> bool {
        self.ignore == Some(v)
    }

    /// Errors if any non-ignore value is `>= num_classes`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.data.len() != self.h * self.w {
            return Err(GaldError::Length {
                expected: self.h * self.w,
                actual: self.data.len(),
            });
        }
        match self
            .data
            .iter()
            .find(|&&v| !self.is_ignored(v) && v as usize >= num_classes)
        {
            Some(v) => config_err(format!("label {v} outside 0..{num_classes}")),
            None => Ok(()),
        }
    }

    /// Applies `perm[class]` to every non-ignore pixel.
    pub fn relabel(&self, perm: &[u32]) -> LabelMap {
        let data = self
            .data
            .iter()
            .map(|&v| {
                if self.is_ignored(v) {
                    v
                } else {
                    perm[v as usize]
                }
            })
            .collect();
        LabelMap {
            data,
            ..self.clone()
        }
    }

    fn class_mask(&self, class: u32) -> Vec<bool> {
        self.data.iter().map(|&v| v == class).collect()
    }
}

fn check_dims(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if (pred.h, pred.w) != (gt.h, gt.w) {
        return shape_err(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.h, pred.w, gt.h, gt.w
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub mean: f64,
    /// `None` for classes absent from both maps.
    pub per_class: Vec<Option<f64>>,
}

/// Per-class `TP / (TP + FP + FN)` averaged over classes present in either
/// map. Pixels that are ignore in either map are skipped.
pub fn miou(pred: &LabelMap, gt: &LabelMap, num_classes: usize) -> Result<MiouResult> {
    check_dims(pred, gt)?;
    pred.validate(num_classes)?;
    gt.validate(num_classes)?;
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if gt.is_ignored(g) || pred.is_ignored(p) {
            continue;
        }
        if p == g {
            tp[p as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[g as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let ratios: Vec<(u64, u64)> = (0..num_classes)
        .map(|c| (tp[c], tp[c] + fp[c] + fn_[c]))
        .filter(|&(_, d)| d > 0)
        .collect();
    Ok(MiouResult {
        mean: mean_of_ratios(&ratios),
        per_class,
    })
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Mean of `num / den` pairs, summed as an exact fraction when it fits so
/// that the result is the correctly rounded quotient.
fn mean_of_ratios(ratios: &[(u64, u64)]) -> f64 {
    if ratios.is_empty() {
        return 0.0;
    }
    let exact = ratios.iter().try_fold((0u128, 1u128), |(n, d), &(a, b)| {
        let (a, b) = (a as u128, b as u128);
        let g = gcd(d, b);
        let den = (d / g).checked_mul(b)?;
        let num = n.checked_mul(b / g)?.checked_add(a.checked_mul(d / g)?)?;
        let r = gcd(num, den).max(1);
        Some((num / r, den / r))
    });
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(ratios.len() as u128)?))) {
        Some((n, d)) if n < (1 << 53) && d < (1 << 53) => n as f64 / d as f64,
        _ => {
            ratios
                .iter()
                .map(|&(a, b)| a as f64 / b as f64)
                .sum::<f64>()
                / ratios.len() as f64
        }
    }
}

/// Pixels of `mask` with at least one 4-neighbour outside the mask. The
/// image frame does not count as outside.
pub fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            out[i] = (y > 0 && !mask[i - w])
                || (y + 1 < h && !mask[i + w])
                || (x > 0 && !mask[i - 1])
                || (x + 1 < w && !mask[i + 1]);
        }
    }
    out
}

/// Dilation by a `(2r+1) x (2r+1)` square, i.e. every pixel within
/// Chebyshev distance `r` of a set pixel.
pub fn dilate_chebyshev(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let pass = |src: &[bool], len: usize, count: usize, stride: usize, step: usize| {
        let mut dst = vec![false; src.len()];
        let mut prefix = vec![0u32; len + 1];
        for line in 0..count {
            let base = line * stride;
            for i in 0..len {
                prefix[i + 1] = prefix[i] + src[base + i * step] as u32;
            }
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(len);
                dst[base + i * step] = prefix[hi] > prefix[lo];
            }
        }
        dst
    };
    let rows = pass(mask, w, h, w, 1);
    pass(&rows, h, w, 1, w)
}

fn matched_fraction(from: &[bool], to_dilated: &[bool]) -> Option<f64> {
    let total = from.iter().filter(|&&b| b).count();
    (total > 0).then(|| {
        let hit = from
            .iter()
            .zip(to_dilated)
            .filter(|&(&f, &t)| f && t)
            .count();
        hit as f64 / total as f64
    })
}

/// Boundary F-score of one class. Precision is the fraction of predicted
/// boundary pixels within Chebyshev distance `slack` of a ground-truth
/// boundary pixel; recall is the converse. Two empty boundaries score 1,
/// exactly one empty boundary scores 0.
pub fn boundary_fscore(pred: &LabelMap, gt: &LabelMap, class_id: u32, slack: usize) -> Result<f64> {
    check_dims(pred, gt)?;
    let (h, w) = (gt.h, gt.w);
    let bp = boundary_pixels(&pred.class_mask(class_id), h, w);
    let bg = boundary_pixels(&gt.class_mask(class_id), h, w);
    let precision = matched_fraction(&bp, &dilate_chebyshev(&bg, h, w, slack));
    let recall = matched_fraction(&bg, &dilate_chebyshev(&bp, h, w, slack));
    Ok(match (precision, recall) {
        (None, None) => 1.0,
        (Some(p), Some(r)) if p + r > 0.0 => 2.0 * p * r / (p + r),
        _ => 0.0,
    })
}

/// [`boundary_fscore`] averaged over classes present in either map.
pub fn mean_boundary_fscore(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    slack: usize,
) -> Result<f64> {
    check_dims(pred, gt)?;
    pred.validate(num_classes)?;
    gt.validate(num_classes)?;
    let mut present = vec![false; num_classes];
    for &v in pred.data.iter().chain(&gt.data) {
        if let Some(p) = present.get_mut(v as usize) {
            *p = true;
        }
    }
    let classes: Vec<u32> = (0..num_classes as u32)
        .filter(|&c| present[c as usize])
        .collect();
    if classes.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for &c in &classes {
        total += boundary_fscore(pred, gt, c, slack)?;
    }
    Ok(total / classes.len() as f64)
}

/// Pixel slack for a threshold given as a fraction of the image diagonal.
/// For 2048x1024 images, 0.00088, 0.001875, 0.00375 and 0.005 map to 3, 5,
/// 9 and 12 pixels.
pub fn slack_from_fraction(fraction: f64, h: usize, w: usize) -> usize {
    let diag = ((h * h + w * w) as f64).sqrt();
    (fraction * diag).ceil() as usize
}
