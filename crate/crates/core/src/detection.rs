//! Detections, image records, and the suppression / matching primitives
//! shared by pseudo-labeling and evaluation.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};

/// Stable index of a category in a [`crate::labels::LabelSpace`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl CategoryId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub category: CategoryId,
    score: f64,
}

#[derive(Deserialize)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    category: CategoryId,
    score: f64,
}

impl TryFrom<RawDetection> for Detection {
    type Error = Error;

    fn try_from(raw: RawDetection) -> Result<Self> {
        Detection::new(raw.bbox, raw.category, raw.score)
    }
}

impl Detection {
    pub fn new(bbox: BoundingBox, category: CategoryId, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidScore(score));
        }
        Ok(Detection {
            bbox,
            category,
            score,
        })
    }

    /// Ground-truth style detection with score fixed at 1.0.
    pub fn ground_truth(bbox: BoundingBox, category: CategoryId) -> Self {
        Detection {
            bbox,
            category,
            score: 1.0,
        }
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<Detection>>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, width: u32, height: u32, source: impl Into<String>) -> Self {
        ImageRecord {
            id: id.into(),
            width,
            height,
            source: source.into(),
            ground_truth: None,
        }
    }

    pub fn with_ground_truth(mut self, gts: Vec<Detection>) -> Result<Self> {
        for gt in &gts {
            if !gt.bbox.is_within(self.width as f64, self.height as f64) {
                return Err(Error::InvalidBox(format!(
                    "ground-truth box {:?} outside {}x{} image {}",
                    gt.bbox.as_array(),
                    self.width,
                    self.height,
                    self.id
                )));
            }
        }
        self.ground_truth = Some(
            gts.into_iter()
                .map(|d| Detection::ground_truth(d.bbox, d.category))
                .collect(),
        );
        Ok(self)
    }
}

/// Deterministic processing order: score descending, then `x_min`
/// ascending, then original position.
pub fn rank_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| {
                dets[a]
                    .bbox
                    .x_min()
                    .partial_cmp(&dets[b].bbox.x_min())
                    .unwrap_or(Ordering::Equal)
            })
            .then_with(|| a.cmp(&b))
    });
    order
}

/// Greedy per-category non-maximum suppression.
///
/// A detection is dropped when a kept detection of the same category
/// overlaps it with IoU strictly above `iou_thresh`. Survivors come back in
/// [`rank_order`].
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    nms_indices(dets, iou_thresh)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Like [`nms`] but returns surviving indices into `dets`.
pub fn nms_indices(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in rank_order(dets) {
        let suppressed = kept.iter().any(|&k| {
            dets[k].category == dets[i].category && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Result of [`greedy_match`]: `(prediction index, matched ground truth)`
/// pairs in the order predictions were processed.
pub type Matching = Vec<(usize, Option<usize>)>;

/// Match predictions to same-category ground truth greedily.
///
/// Predictions are visited in [`rank_order`]; each takes the unmatched
/// ground truth with the highest IoU (first index on ties) provided that
/// IoU is at least `iou_thresh`.
pub fn greedy_match(preds: &[Detection], gts: &[Detection], iou_thresh: f64) -> Matching {
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for p in rank_order(preds) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.category != preds[p].category {
                continue;
            }
            let v = iou(&preds[p].bbox, &gt.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push((p, best.map(|(g, _)| g)));
    }
    out
}
