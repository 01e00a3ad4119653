use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every tunable cut-off used across the engine stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineThresholds {
    /// IoU needed to call a prediction a match (evaluation, precision audits).
    pub iou_match: f64,
    /// Minimum text-image cosine for retrieval.
    pub retrieval_score_min: f64,
    /// Fraction of the pool retrieval always returns, even below threshold.
    pub retrieval_min_fraction: f64,
    /// Crop enlargement before zero-shot classification.
    pub crop_scale: f64,
    /// Minimum zero-shot classification score for a novel pseudo-label.
    pub zsc_score_min: f64,
    /// Minimum detector confidence for a known-category pseudo-label.
    pub known_conf_min: f64,
    pub top_k: usize,
    pub nms_iou: f64,
}

impl Default for EngineThresholds {
    fn default() -> Self {
        EngineThresholds {
            iou_match: 0.5,
            retrieval_score_min: 0.6,
            retrieval_min_fraction: 0.01,
            crop_scale: 1.75,
            zsc_score_min: 0.1,
            known_conf_min: 0.6,
            top_k: 1000,
            nms_iou: 0.5,
        }
    }
}

impl EngineThresholds {
    pub fn validate(&self) -> Result<()> {
        let ratios = [
            ("iou_match", self.iou_match),
            ("retrieval_score_min", self.retrieval_score_min),
            ("retrieval_min_fraction", self.retrieval_min_fraction),
            ("zsc_score_min", self.zsc_score_min),
            ("known_conf_min", self.known_conf_min),
            ("nms_iou", self.nms_iou),
        ];
        for (name, v) in ratios {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} must lie in (0, 1]")));
            }
        }
        if !(self.crop_scale >= 1.0 && self.crop_scale.is_finite()) {
            return Err(Error::Config(format!(
                "crop_scale = {} must be >= 1",
                self.crop_scale
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let t = EngineThresholds::default();
        t.validate().unwrap();
        assert_eq!(t.crop_scale, 1.75);
        assert_eq!(t.retrieval_score_min, 0.6);
        assert_eq!(t.zsc_score_min, 0.1);
        assert_eq!(t.known_conf_min, 0.6);
    }

    #[test]
    fn out_of_range_rejected() {
        let mut t = EngineThresholds {
            crop_scale: 0.9,
            ..Default::default()
        };
        assert!(t.validate().is_err());
        t.crop_scale = 1.0;
        t.zsc_score_min = 0.0;
        assert!(t.validate().is_err());
        t.zsc_score_min = 0.1;
        t.top_k = 0;
        assert!(t.validate().is_err());
    }
}
