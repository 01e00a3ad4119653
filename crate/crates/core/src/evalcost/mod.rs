//! Detection metrics (AP, known/novel averages, forgetting) and the cost
//! ledger.

mod ap;
mod ledger;

pub use ap::{ap_from_hits, average_precision, average_precision_images, category_ap, ApMode};
pub use ledger::{Cents, CostEntry, CostKind, CostLedger, CostRates, Quantity};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::TrainableDetectorAdapter;
use crate::detection::{Detection, ImageRecord};
use crate::error::Result;
use crate::labels::{CategoryStatus, LabelSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub name: String,
    pub status: CategoryStatus,
    /// Absent when the category has neither ground truth nor predictions.
    pub ap: Option<f64>,
    pub ground_truth: usize,
    pub predictions: usize,
}

/// Accuracy summary. AP values are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ApMode,
    pub images: usize,
    pub categories: Vec<CategoryEval>,
    pub novel_average: Option<f64>,
    pub known_average: Option<f64>,
    /// `known_average - baseline_known`, when a baseline was given.
    pub forgetting: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn forgetting(known_before: f64, known_after: f64) -> f64 {
    known_after - known_before
}

/// Build a report from predictions and ground truth already expressed in
/// label-space ids, one pair per image.
pub fn report_from_predictions(
    images: &[(Vec<Detection>, Vec<Detection>)],
    label_space: &LabelSpace,
    baseline_known: Option<f64>,
    mode: ApMode,
) -> EvalReport {
    let categories: Vec<CategoryEval> = label_space
        .categories()
        .iter()
        .map(|c| CategoryEval {
            name: c.name.clone(),
            status: c.status,
            ap: category_ap(images, c.id, mode),
            ground_truth: images.iter().map(|(_, g)| g.iter().filter(|d| d.category == c.id).count()).sum(),
            predictions: images.iter().map(|(p, _)| p.iter().filter(|d| d.category == c.id).count()).sum(),
        })
        .collect();
    let avg = |status| mean(categories.iter().filter(|c| c.status == status).filter_map(|c| c.ap));
    let known_average = avg(CategoryStatus::Known);
    EvalReport {
        mode,
        images: images.len(),
        novel_average: avg(CategoryStatus::Novel),
        forgetting: baseline_known.zip(known_average).map(|(b, k)| forgetting(b, k)),
        known_average,
        categories,
    }
}

/// Run the detector over an evaluation set whose ground truth uses the
/// label space's ids.
pub fn eval_report(
    detector: &dyn TrainableDetectorAdapter,
    eval_set: &[ImageRecord],
    label_space: &LabelSpace,
    baseline_known: Option<f64>,
    mode: ApMode,
) -> Result<EvalReport> {
    let images = eval_set
        .iter()
        .map(|r| {
            let preds: Vec<Detection> = detector
                .detect(&r.id)?
                .into_iter()
                .filter(|d| label_space.get(d.category).is_some())
                .collect();
            Ok((preds, r.ground_truth.clone().unwrap_or_default()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(report_from_predictions(&images, label_space, baseline_known, mode))
}

impl EvalReport {
    pub fn ap_of(&self, name: &str) -> Option<f64> {
        self.categories.iter().find(|c| c.name == name).and_then(|c| c.ap)
    }

    pub fn per_category(&self) -> BTreeMap<&str, f64> {
        self.categories
            .iter()
            .filter_map(|c| c.ap.map(|a| (c.name.as_str(), a)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::CategoryId;
    use crate::geometry::BoundingBox;
    use crate::labels::{extend_label_space, AliasTable};

    fn bx(i: f64) -> BoundingBox {
        BoundingBox::new(10.0 * i, 0.0, 10.0 * i + 5.0, 5.0).unwrap()
    }

    #[test]
    fn forgetting_delta() {
        assert!((forgetting(29.9, 26.6) - (-3.3)).abs() < 1e-9);
    }

    #[test]
    fn averages_and_definedness() {
        let a = AliasTable::new();
        let ls = LabelSpace::with_known(&["car", "bus"], &a).unwrap();
        let gt = vec![
            Detection::ground_truth(bx(0.0), CategoryId(0)),
            Detection::ground_truth(bx(1.0), CategoryId(1)),
        ];
        let preds = vec![Detection::new(bx(0.0), CategoryId(0), 0.9).unwrap()];
        let images = vec![(preds, gt)];
        let r = report_from_predictions(&images, &ls, None, ApMode::Ap50);
        assert_eq!(r.known_average, Some(0.5));
        assert_eq!(r.novel_average, None);
        assert_eq!(r.forgetting, None);

        let same = report_from_predictions(&images, &ls, r.known_average, ApMode::Ap50);
        assert_eq!(same.forgetting, Some(0.0));

        let ls2 = extend_label_space(&ls, "trailer", &a).unwrap();
        let r2 = report_from_predictions(&images, &ls2, None, ApMode::Ap50);
        // trailer has no GT and no predictions: absent, not zero
        assert_eq!(r2.novel_average, None);
        assert_eq!(r2.ap_of("trailer"), None);
    }
}
