//! Axis-aligned boxes in the image frame (origin top-left, pixels).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A continuous half-open rectangle `[x_min, x_max) x [y_min, y_max)`.
///
/// Construction rejects non-finite coordinates and zero-area boxes, so every
/// value of this type has positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = Error;

    fn try_from(raw: RawBox) -> Result<Self> {
        BoundingBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinate in [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Intersect with `[0, width] x [0, height]`. `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BoundingBox> {
        BoundingBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
        .ok()
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Grow a box about its center by `ratio` and clip it to the image.
///
/// `ratio` below 1 is treated as 1. The box must overlap the image; if the
/// clipped result would be empty the unclipped scaled box is returned.
pub fn scale_box(bbox: &BoundingBox, ratio: f64, width: f64, height: f64) -> BoundingBox {
    let ratio = if ratio.is_finite() { ratio.max(1.0) } else { 1.0 };
    if ratio == 1.0 {
        return bbox.clip(width, height).unwrap_or(*bbox);
    }
    let (cx, cy) = bbox.center();
    let half_w = 0.5 * bbox.width() * ratio;
    let half_h = 0.5 * bbox.height() * ratio;
    let scaled = BoundingBox {
        x_min: cx - half_w,
        y_min: cy - half_h,
        x_max: cx + half_w,
        y_max: cy + half_h,
    };
    scaled.clip(width, height).unwrap_or(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
    }

    #[test]
    fn iou_half_shift_is_one_third() {
        // 2 shared unit cells out of 6 on the integer grid.
        let v = iou(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 0.0, 3.0, 2.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_do_not_overlap() {
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn degenerate_and_non_finite_rejected() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 3.0, 1.0, 2.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 2.0).is_err());
        assert!(serde_json::from_str::<BoundingBox>(
            r#"{"x_min":2,"y_min":0,"x_max":1,"y_max":1}"#
        )
        .is_err());
    }

    #[test]
    fn scale_box_center_preserving() {
        let s = scale_box(&bx(4.0, 4.0, 6.0, 6.0), 1.75, 20.0, 20.0);
        assert_eq!(s.as_array(), [3.25, 3.25, 6.75, 6.75]);
    }

    #[test]
    fn scale_box_clips_to_bounds() {
        let s = scale_box(&bx(0.0, 0.0, 2.0, 2.0), 2.0, 3.0, 3.0);
        assert_eq!(s.as_array(), [0.0, 0.0, 3.0, 3.0]);
    }

    #[test]
    fn scale_box_unit_ratio_is_identity() {
        let b = bx(1.5, 2.0, 7.25, 9.0);
        assert_eq!(scale_box(&b, 1.0, 20.0, 20.0), b);
    }
}
