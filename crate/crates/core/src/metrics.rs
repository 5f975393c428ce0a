//! Segmentation evaluation metrics.
//!
//! Five metrics are provided on top of per-image confusion counts:
//! dataset-level mIoU (per-class IoU from counts aggregated over the whole
//! dataset), class-centric mIoU_c (per-class mean of per-image IoUs over the
//! images where the class appears in prediction or ground truth),
//! image-centric mIoU_i (per-image mean over present classes, averaged over
//! images), mDice, and pixel accuracy. All results are percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::LabelMask;

/// Per-image, per-class pixel counts. Ignored pixels are excluded from every
/// count, including the presence sets derived from them.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct PerImageCounts {
    pub intersection: Vec<u64>,
    pub pred: Vec<u64>,
    pub gt: Vec<u64>,
    pub correct: u64,
    pub total: u64,
}

impl PerImageCounts {
    pub fn num_classes(&self) -> usize {
        self.intersection.len()
    }

    pub fn union(&self, k: usize) -> u64 {
        self.pred[k] + self.gt[k] - self.intersection[k]
    }

    /// Class present in prediction or ground truth of this image.
    pub fn present(&self, k: usize) -> bool {
        self.pred[k] > 0 || self.gt[k] > 0
    }

    /// Classes present in prediction or ground truth (the set C_n).
    pub fn present_classes(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&k| self.present(k)).collect()
    }

    /// Counts are mergeable: merging equals counting the concatenated masks.
    pub fn merge(&self, other: &PerImageCounts) -> Result<PerImageCounts> {
        if self.num_classes() != other.num_classes() {
            return Err(Error::shape(
                format!("{} classes", self.num_classes()),
                format!("{} classes", other.num_classes()),
            ));
        }
        let zip = |a: &[u64], b: &[u64]| a.iter().zip(b).map(|(x, y)| x + y).collect();
        Ok(PerImageCounts {
            intersection: zip(&self.intersection, &other.intersection),
            pred: zip(&self.pred, &other.pred),
            gt: zip(&self.gt, &other.gt),
            correct: self.correct + other.correct,
            total: self.total + other.total,
        })
    }
}

/// Count per-class intersections and marginals for one image.
///
/// Pixels whose ground-truth label equals `ignore_label` are excluded from
/// all counts. Any other label outside `[0, num_classes)` in either mask is
/// an error.
pub fn confusion_counts(
    pred: &LabelMask,
    gt: &LabelMask,
    num_classes: usize,
    ignore_label: u8,
) -> Result<PerImageCounts> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(
            format!("{:?}", gt.dim()),
            format!("{:?}", pred.dim()),
        ));
    }
    let mut counts = PerImageCounts {
        intersection: vec![0; num_classes],
        pred: vec![0; num_classes],
        gt: vec![0; num_classes],
        correct: 0,
        total: 0,
    };
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *g == ignore_label {
            continue;
        }
        let (p, g) = (*p as usize, *g as usize);
        if p >= num_classes || g >= num_classes {
            return Err(Error::invalid(format!(
                "label out of range: pred {p}, gt {g}, num_classes {num_classes}"
            )));
        }
        counts.total += 1;
        counts.pred[p] += 1;
        counts.gt[g] += 1;
        if p == g {
            counts.correct += 1;
            counts.intersection[p] += 1;
        }
    }
    Ok(counts)
}

/// Dataset-level mIoU: per-class IoU from counts aggregated over all images,
/// averaged over classes with nonzero aggregate union.
pub fn miou(counts: &[PerImageCounts]) -> Result<f64> {
    let agg = aggregate(counts)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..agg.num_classes() {
        let u = agg.union(k);
        if u > 0 {
            sum += agg.intersection[k] as f64 / u as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no class with nonzero union".into()));
    }
    Ok(100.0 * sum / n as f64)
}

/// Class-centric mIoU_c: per class, the mean of per-image IoUs over images
/// where the class appears in prediction or ground truth; then the mean over
/// classes with at least one such image.
pub fn miou_c(counts: &[PerImageCounts]) -> Result<f64> {
    let num_classes = check_nonempty(counts)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..num_classes {
        let mut class_sum = 0.0;
        let mut imgs = 0usize;
        for c in counts {
            if c.present(k) {
                class_sum += c.intersection[k] as f64 / c.union(k) as f64;
                imgs += 1;
            }
        }
        if imgs > 0 {
            sum += class_sum / imgs as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no class present in any image".into()));
    }
    Ok(100.0 * sum / n as f64)
}

/// Image-centric mIoU_i for a single image: the mean IoU over classes present
/// in prediction or ground truth. `None` when every pixel is ignored.
pub fn miou_i_single(counts: &PerImageCounts) -> Option<f64> {
    let present = counts.present_classes();
    if present.is_empty() {
        return None;
    }
    let sum: f64 = present
        .iter()
        .map(|&k| counts.intersection[k] as f64 / counts.union(k) as f64)
        .sum();
    Some(100.0 * sum / present.len() as f64)
}

/// Aggregate mIoU_i: unweighted mean of per-image values; images with no
/// scorable class are skipped with a warning.
pub fn miou_i(counts: &[PerImageCounts]) -> Result<f64> {
    check_nonempty(counts)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, c) in counts.iter().enumerate() {
        match miou_i_single(c) {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => log::warn!("image {i} has no scorable class, skipped from mIoU_i"),
        }
    }
    if n == 0 {
        return Err(Error::Empty("all images skipped".into()));
    }
    Ok(sum / n as f64)
}

/// mDice: per-class dice from dataset-aggregated counts, averaged over
/// classes appearing in prediction or ground truth anywhere in the dataset.
pub fn mdice(counts: &[PerImageCounts]) -> Result<f64> {
    let agg = aggregate(counts)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..agg.num_classes() {
        let denom = agg.pred[k] + agg.gt[k];
        if denom > 0 {
            sum += 2.0 * agg.intersection[k] as f64 / denom as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no class with nonzero support".into()));
    }
    Ok(100.0 * sum / n as f64)
}

/// Percentage of correctly classified pixels, regardless of class.
pub fn pixel_accuracy(counts: &[PerImageCounts]) -> Result<f64> {
    let agg = aggregate(counts)?;
    if agg.total == 0 {
        return Err(Error::Empty("no counted pixel".into()));
    }
    Ok(100.0 * agg.correct as f64 / agg.total as f64)
}

/// Share of the residual segmentation error removed by adaptation:
/// `(tta - na) / (100 - na) * 100`. Negative when adaptation hurt.
pub fn error_reduction(na: f64, tta: f64) -> Result<f64> {
    if na >= 100.0 {
        return Err(Error::invalid(format!(
            "no residual error to reduce (NA = {na})"
        )));
    }
    Ok((tta - na) / (100.0 - na) * 100.0)
}

fn check_nonempty(counts: &[PerImageCounts]) -> Result<usize> {
    match counts.first() {
        Some(c) => Ok(c.num_classes()),
        None => Err(Error::Empty("no images".into())),
    }
}

fn aggregate(counts: &[PerImageCounts]) -> Result<PerImageCounts> {
    let mut iter = counts.iter();
    let mut agg = iter
        .next()
        .ok_or_else(|| Error::Empty("no images".into()))?
        .clone();
    for c in iter {
        agg = agg.merge(c)?;
    }
    Ok(agg)
}

/// All five metrics for one prediction set, as flat key/value pairs.
pub fn metric_report(counts: &[PerImageCounts]) -> Result<Vec<(&'static str, f64)>> {
    Ok(vec![
        ("miou", miou(counts)?),
        ("miou_c", miou_c(counts)?),
        ("miou_i", miou_i(counts)?),
        ("mdice", mdice(counts)?),
        ("accuracy", pixel_accuracy(counts)?),
    ])
}
