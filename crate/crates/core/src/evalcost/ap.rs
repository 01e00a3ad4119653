//! Average precision with all-points interpolation.

use serde::{Deserialize, Serialize};

use crate::detection::{greedy_match, CategoryId, Detection};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Single IoU threshold 0.5.
    #[default]
    Ap50,
    /// Mean over IoU thresholds 0.50, 0.55, ..., 0.95.
    Coco,
}

impl ApMode {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            ApMode::Ap50 => vec![0.5],
            ApMode::Coco => (0..10).map(|i| 0.5 + 0.05 * i as f64).collect(),
        }
    }
}

/// Area under the precision-recall curve of ranked hits, with precision
/// made non-increasing from the right.
pub fn ap_from_hits(hits: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if hits.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, hit) in hits.iter().enumerate() {
        tp += usize::from(*hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..hits.len() {
        if hits[i] {
            ap += (recall[i] - prev_recall) * precision[i];
            prev_recall = recall[i];
        }
    }
    Some(ap)
}

/// AP of one category on one image. `None` when there is neither ground
/// truth nor a prediction.
pub fn average_precision(preds: &[Detection], gts: &[Detection], iou_thresh: f64) -> Option<f64> {
    average_precision_images(&[(preds.to_vec(), gts.to_vec())], iou_thresh)
}

/// AP over several images of one category: predictions are matched within
/// their image, then ranked globally by score (image order, then per-image
/// rank, breaks ties).
pub fn average_precision_images(images: &[(Vec<Detection>, Vec<Detection>)], iou_thresh: f64) -> Option<f64> {
    let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut num_gt = 0;
    for (img, (preds, gts)) in images.iter().enumerate() {
        num_gt += gts.len();
        for (pos, (p, g)) in greedy_match(preds, gts, iou_thresh).into_iter().enumerate() {
            ranked.push((preds[p].score(), img, pos, g.is_some()));
        }
    }
    ranked.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let hits: Vec<bool> = ranked.iter().map(|r| r.3).collect();
    ap_from_hits(&hits, num_gt)
}

/// Per-category AP under `mode`, restricted to `category`.
pub fn category_ap(
    images: &[(Vec<Detection>, Vec<Detection>)],
    category: CategoryId,
    mode: ApMode,
) -> Option<f64> {
    let filtered: Vec<(Vec<Detection>, Vec<Detection>)> = images
        .iter()
        .map(|(p, g)| {
            (
                p.iter().filter(|d| d.category == category).copied().collect(),
                g.iter().filter(|d| d.category == category).copied().collect(),
            )
        })
        .collect();
    let values: Vec<f64> = mode
        .thresholds()
        .into_iter()
        .filter_map(|t| average_precision_images(&filtered, t))
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}
