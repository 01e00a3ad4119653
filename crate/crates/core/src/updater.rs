//! Model updater: two-stage pseudo-labeling, known-category mixing,
//! training-set assembly and the pseudo-label quality audit.
//!
//! Novel labels come from label-free box proposals whose enlarged crops are
//! re-classified over the whole label space. Known labels come from the
//! current detector's confident predictions on the same images; mixing them
//! in keeps known categories from being trained towards background.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::adapters::{CropClassifierAdapter, ProposerAdapter, TrainOutcome, TrainableDetectorAdapter};
use crate::detection::{greedy_match, nms_indices, CategoryId, Detection, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::{scale_box, BoundingBox};
use crate::labels::{CategoryStatus, LabelSpace};
use crate::thresholds::EngineThresholds;

/// Extra zero-shot label whose win drops the proposal.
pub const BACKGROUND_LABEL: &str = "background";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelOrigin {
    #[serde(rename = "proposal+zsc")]
    ProposalZsc,
    KnownSelf,
    HumanCorrection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub image_id: String,
    pub detection: Detection,
    pub origin: LabelOrigin,
    pub proposal_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zsc_score: Option<f64>,
    /// Label the proposer attached before it was discarded (audit only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_label: Option<String>,
}

impl PseudoLabel {
    /// Check the origin-specific score invariant.
    pub fn check(&self, thresholds: &EngineThresholds) -> Result<()> {
        let ok = match self.origin {
            LabelOrigin::ProposalZsc => self.zsc_score.is_some_and(|z| z >= thresholds.zsc_score_min),
            LabelOrigin::KnownSelf => self.detection.score() >= thresholds.known_conf_min,
            LabelOrigin::HumanCorrection => self.detection.score() == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidData(format!(
                "{:?} label on {} violates its score threshold",
                self.origin, self.image_id
            )))
        }
    }

    pub fn human_correction(image_id: &str, bbox: BoundingBox, category: CategoryId) -> Self {
        PseudoLabel {
            image_id: image_id.to_string(),
            detection: Detection::ground_truth(bbox, category),
            origin: LabelOrigin::HumanCorrection,
            proposal_score: 1.0,
            zsc_score: None,
            raw_label: None,
        }
    }
}

/// A box proposal with its label stripped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub score: f64,
    /// Provenance only; never used for labeling.
    pub raw_label: String,
}

/// Query the zero-shot proposer with `prompts` and keep only boxes and
/// scores. Boxes are clipped to the image; fully outside boxes are dropped.
pub fn propose_boxes(proposer: &dyn ProposerAdapter, image: &ImageRecord, prompts: &[String]) -> Result<Vec<Proposal>> {
    let (w, h) = (image.width as f64, image.height as f64);
    Ok(proposer
        .propose(&image.id, prompts)?
        .into_iter()
        .filter_map(|p| {
            p.bbox.clip(w, h).map(|bbox| Proposal {
                bbox,
                score: p.score.clamp(0.0, 1.0),
                raw_label: p.label,
            })
        })
        .collect())
}

/// Names sent to the crop classifier: the label space plus background.
pub fn zsc_label_names(label_space: &LabelSpace) -> Vec<String> {
    let mut names = label_space.names();
    names.push(BACKGROUND_LABEL.to_string());
    names
}

/// Second stage: classify an enlarged crop of each proposal over the full
/// label space, keep the argmax when it is a real category scoring at least
/// `zsc_score_min`, and deduplicate with NMS.
pub fn classify_crops(
    classifier: &dyn CropClassifierAdapter,
    image: &ImageRecord,
    proposals: &[Proposal],
    label_space: &LabelSpace,
    thresholds: &EngineThresholds,
) -> Result<Vec<PseudoLabel>> {
    let names = zsc_label_names(label_space);
    let (w, h) = (image.width as f64, image.height as f64);
    let mut kept: Vec<PseudoLabel> = Vec::new();
    for p in proposals {
        let crop = scale_box(&p.bbox, thresholds.crop_scale, w, h);
        let scores = classifier.classify(&image.id, &crop, &names)?;
        if scores.len() != names.len() {
            return Err(Error::adapter(
                "classifier",
                format!("expected {} scores, got {}", names.len(), scores.len()),
            ));
        }
        let (best, best_score) = scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
        if best >= label_space.len() || best_score < thresholds.zsc_score_min {
            continue;
        }
        kept.push(PseudoLabel {
            image_id: image.id.clone(),
            detection: Detection::new(p.bbox, CategoryId(best as u32), best_score.clamp(0.0, 1.0))?,
            origin: LabelOrigin::ProposalZsc,
            proposal_score: p.score,
            zsc_score: Some(best_score),
            raw_label: Some(p.raw_label.clone()),
        });
    }
    Ok(dedupe(kept, thresholds.nms_iou))
}

fn dedupe(labels: Vec<PseudoLabel>, iou_thresh: f64) -> Vec<PseudoLabel> {
    let dets: Vec<Detection> = labels.iter().map(|l| l.detection).collect();
    nms_indices(&dets, iou_thresh)
        .into_iter()
        .map(|i| labels[i].clone())
        .collect()
}

/// Confident detector predictions on known-status categories.
pub fn known_pseudo_labels(
    detector: &dyn TrainableDetectorAdapter,
    image: &ImageRecord,
    label_space: &LabelSpace,
    thresholds: &EngineThresholds,
) -> Result<Vec<PseudoLabel>> {
    Ok(detector
        .detect(&image.id)?
        .into_iter()
        .filter(|d| d.score() >= thresholds.known_conf_min)
        .filter(|d| label_space.status(d.category) == Some(CategoryStatus::Known))
        .map(|d| PseudoLabel {
            image_id: image.id.clone(),
            detection: d,
            origin: LabelOrigin::KnownSelf,
            proposal_score: d.score(),
            zsc_score: None,
            raw_label: None,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalancePolicy {
    /// Per-category cap on known labels, as a multiple of the novel label
    /// count (novel pseudo-labels plus corrections). `inf` disables the cap.
    pub cap_ratio: f64,
    pub nms_iou: f64,
}

impl Default for BalancePolicy {
    fn default() -> Self {
        BalancePolicy {
            cap_ratio: 2.0,
            nms_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    /// Image id -> labels, NMS-deduplicated per image.
    pub entries: BTreeMap<String, Vec<PseudoLabel>>,
    pub counts: BTreeMap<CategoryId, usize>,
    /// Categories this set was assembled to teach.
    pub targets: Vec<CategoryId>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.values().flatten()
    }

    fn recount(&mut self) {
        self.counts.clear();
        for l in self.entries.values().flatten() {
            *self.counts.entry(l.detection.category).or_default() += 1;
        }
    }

    pub fn from_labels(labels: impl IntoIterator<Item = PseudoLabel>, targets: Vec<CategoryId>) -> Self {
        let mut ts = TrainingSet {
            targets,
            ..Default::default()
        };
        for l in labels {
            ts.entries.entry(l.image_id.clone()).or_default().push(l);
        }
        ts.entries.retain(|_, v| !v.is_empty());
        ts.recount();
        ts
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for (image_id, labels) in &self.entries {
            let rec = JsonlRecord {
                image_id: image_id.clone(),
                labels: labels
                    .iter()
                    .map(|l| JsonlLabel {
                        bbox: l.detection.bbox,
                        category: l.detection.category,
                        score: l.detection.score(),
                        origin: l.origin,
                        zsc_score: l.zsc_score,
                        proposal_score: l.proposal_score,
                    })
                    .collect(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)
                .map_err(|e| Error::io("<training set>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead, targets: Vec<CategoryId>) -> Result<Self> {
        let mut labels = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<training set>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)?;
            for l in rec.labels {
                labels.push(PseudoLabel {
                    image_id: rec.image_id.clone(),
                    detection: Detection::new(l.bbox, l.category, l.score)?,
                    origin: l.origin,
                    proposal_score: l.proposal_score,
                    zsc_score: l.zsc_score,
                    raw_label: None,
                });
            }
        }
        Ok(TrainingSet::from_labels(labels, targets))
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    image_id: String,
    labels: Vec<JsonlLabel>,
}

#[derive(Serialize, Deserialize)]
struct JsonlLabel {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    category: CategoryId,
    score: f64,
    origin: LabelOrigin,
    zsc_score: Option<f64>,
    proposal_score: f64,
}

/// Union novel, known and corrected labels into a training set.
///
/// Known labels are capped per category at `cap_ratio` times the number of
/// novel labels (pseudo-labels plus corrections), dropping the lowest scores
/// first. Corrections are always kept. Per-image NMS runs last, so images
/// left with no labels disappear.
pub fn assemble_training_set(
    novel: &[PseudoLabel],
    known: &[PseudoLabel],
    corrections: &[PseudoLabel],
    policy: &BalancePolicy,
) -> Result<TrainingSet> {
    if novel.is_empty() && corrections.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let base = (novel.len() + corrections.len()) as f64;
    let cap = if policy.cap_ratio.is_infinite() {
        usize::MAX
    } else {
        (policy.cap_ratio * base).floor() as usize
    };

    let mut by_category: BTreeMap<CategoryId, Vec<usize>> = BTreeMap::new();
    for (i, l) in known.iter().enumerate() {
        by_category.entry(l.detection.category).or_default().push(i);
    }
    let mut known_kept: Vec<usize> = Vec::new();
    for (_, mut idx) in by_category {
        // Highest score first; earlier input position wins ties.
        idx.sort_by(|&a, &b| {
            known[b]
                .detection
                .score()
                .partial_cmp(&known[a].detection.score())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx.truncate(cap);
        known_kept.extend(idx);
    }
    known_kept.sort_unstable();

    let mut targets: BTreeSet<CategoryId> = novel.iter().map(|l| l.detection.category).collect();
    targets.extend(corrections.iter().map(|l| l.detection.category));

    let merged = corrections
        .iter()
        .cloned()
        .chain(novel.iter().cloned())
        .chain(known_kept.into_iter().map(|i| known[i].clone()));
    let mut ts = TrainingSet::from_labels(merged, targets.into_iter().collect());
    for labels in ts.entries.values_mut() {
        *labels = dedupe(std::mem::take(labels), policy.nms_iou);
    }
    ts.entries.retain(|_, v| !v.is_empty());
    ts.recount();
    Ok(ts)
}

/// Per-category precision of pseudo-labels against ground truth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    /// Only categories that received at least one label appear here.
    pub per_category: BTreeMap<CategoryId, f64>,
    pub label_counts: BTreeMap<CategoryId, usize>,
}

impl PrecisionReport {
    pub fn get(&self, category: CategoryId) -> Result<f64> {
        self.per_category
            .get(&category)
            .copied()
            .ok_or(Error::UndefinedPrecision(category.0))
    }

    pub fn mean_over(&self, categories: &[CategoryId]) -> Option<f64> {
        let vals: Vec<f64> = categories
            .iter()
            .filter_map(|c| self.per_category.get(c).copied())
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// TP / (TP + FP) per category under greedy matching, image by image.
pub fn pseudo_label_precision(
    labels: &[PseudoLabel],
    ground_truth: &BTreeMap<String, Vec<Detection>>,
    iou_thresh: f64,
) -> PrecisionReport {
    let mut by_image: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for l in labels {
        by_image.entry(&l.image_id).or_default().push(l.detection);
    }
    let mut tp: BTreeMap<CategoryId, usize> = BTreeMap::new();
    let mut total: BTreeMap<CategoryId, usize> = BTreeMap::new();
    let empty = Vec::new();
    for (image_id, preds) in by_image {
        let gts = ground_truth.get(image_id).unwrap_or(&empty);
        for (p, g) in greedy_match(&preds, gts, iou_thresh) {
            let cat = preds[p].category;
            *total.entry(cat).or_default() += 1;
            if g.is_some() {
                *tp.entry(cat).or_default() += 1;
            }
        }
    }
    PrecisionReport {
        per_category: total
            .iter()
            .map(|(c, n)| (*c, tp.get(c).copied().unwrap_or(0) as f64 / *n as f64))
            .collect(),
        label_counts: total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSchedule {
    pub iterations: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            iterations: 3000,
            learning_rate: 5e-4,
            batch_size: 4,
            weight_decay: 1e-4,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Hand the training set to the detector backend.
pub fn update_detector(
    detector: &mut dyn TrainableDetectorAdapter,
    set: &TrainingSet,
    schedule: &TrainingSchedule,
) -> Result<TrainOutcome> {
    if set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if schedule.iterations == 0 {
        return Ok(TrainOutcome::default());
    }
    detector.train(set, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::RawProposal;
    use crate::labels::{extend_label_space, AliasTable};

    fn bx(x: f64, y: f64, s: f64) -> BoundingBox {
        BoundingBox::new(x, y, x + s, y + s).unwrap()
    }

    fn label(image: &str, b: BoundingBox, cat: u32, score: f64, origin: LabelOrigin) -> PseudoLabel {
        PseudoLabel {
            image_id: image.into(),
            detection: Detection::new(b, CategoryId(cat), score).unwrap(),
            origin,
            proposal_score: score,
            zsc_score: (origin == LabelOrigin::ProposalZsc).then_some(score),
            raw_label: None,
        }
    }

    fn two_class_space() -> LabelSpace {
        let a = AliasTable::new();
        let ls = LabelSpace::with_known(&["car"], &a).unwrap();
        extend_label_space(&ls, "trailer", &a).unwrap()
    }

    fn image() -> ImageRecord {
        ImageRecord::new("img", 100, 100, "test")
    }

    struct FixedProposer(Vec<RawProposal>);

    impl ProposerAdapter for FixedProposer {
        fn propose(&self, _: &str, _: &[String]) -> Result<Vec<RawProposal>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn proposals_lose_labels_and_get_clipped() {
        let raw = vec![
            RawProposal { bbox: bx(0.0, 0.0, 10.0), label: "car".into(), score: 0.9 },
            RawProposal { bbox: bx(20.0, 20.0, 10.0), label: "trailer".into(), score: 0.4 },
            RawProposal { bbox: BoundingBox::new(90.0, 90.0, 130.0, 120.0).unwrap(), label: "car".into(), score: 0.7 },
        ];
        let got = propose_boxes(&FixedProposer(raw), &image(), &["car".into()]).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[2].bbox.as_array(), [90.0, 90.0, 100.0, 100.0]);
        assert!(propose_boxes(&FixedProposer(vec![]), &image(), &[]).unwrap().is_empty());
    }

    /// Returns a fixed score vector and records the crop it saw.
    struct FixedScores(Vec<f64>, std::sync::Mutex<Vec<BoundingBox>>);

    impl CropClassifierAdapter for FixedScores {
        fn classify(&self, _: &str, b: &BoundingBox, labels: &[String]) -> Result<Vec<f64>> {
            assert_eq!(labels.len(), self.0.len());
            self.1.lock().unwrap().push(*b);
            Ok(self.0.clone())
        }
    }

    fn proposal(b: BoundingBox) -> Proposal {
        Proposal { bbox: b, score: 0.5, raw_label: "car".into() }
    }

    #[test]
    fn argmax_above_threshold_becomes_label() {
        let zsc = FixedScores(vec![0.2, 0.7, 0.1], Default::default());
        let t = EngineThresholds::default();
        let out = classify_crops(&zsc, &image(), &[proposal(bx(40.0, 40.0, 8.0))], &two_class_space(), &t).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].detection.category, CategoryId(1));
        assert_eq!(out[0].zsc_score, Some(0.7));
        assert_eq!(out[0].origin, LabelOrigin::ProposalZsc);
        // label keeps the proposal box; the classifier saw the 1.75x crop
        assert_eq!(out[0].detection.bbox, bx(40.0, 40.0, 8.0));
        assert_eq!(zsc.1.lock().unwrap()[0].as_array(), [37.0, 37.0, 51.0, 51.0]);
    }

    #[test]
    fn low_argmax_or_background_dropped() {
        let t = EngineThresholds::default();
        let low = FixedScores(vec![0.05, 0.04, 0.03], Default::default());
        assert!(classify_crops(&low, &image(), &[proposal(bx(1.0, 1.0, 5.0))], &two_class_space(), &t).unwrap().is_empty());
        let bg = FixedScores(vec![0.1, 0.2, 0.7], Default::default());
        assert!(classify_crops(&bg, &image(), &[proposal(bx(1.0, 1.0, 5.0))], &two_class_space(), &t).unwrap().is_empty());
    }

    #[test]
    fn duplicate_survivors_collapse() {
        let zsc = FixedScores(vec![0.1, 0.8, 0.1], Default::default());
        let t = EngineThresholds::default();
        // IoU of these two boxes is 0.9 / 1.0 ≈ 0.9
        let a = BoundingBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        let b = BoundingBox::new(10.0, 10.0, 30.0, 28.0).unwrap();
        let out = classify_crops(&zsc, &image(), &[proposal(a), proposal(b)], &two_class_space(), &t).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn cap_rule_limits_known_labels() {
        let novel: Vec<_> = (0..10)
            .map(|i| label(&format!("n{i}"), bx(0.0, 0.0, 5.0), 1, 0.5, LabelOrigin::ProposalZsc))
            .collect();
        let known: Vec<_> = (0..100)
            .map(|i| label(&format!("k{i}"), bx(0.0, 0.0, 5.0), 0, 0.6 + i as f64 * 0.001, LabelOrigin::KnownSelf))
            .collect();
        let ts = assemble_training_set(&novel, &known, &[], &BalancePolicy::default()).unwrap();
        assert_eq!(ts.counts[&CategoryId(1)], 10);
        assert_eq!(ts.counts[&CategoryId(0)], 20);
        // highest-scoring known labels survive
        let min_known = ts
            .labels()
            .filter(|l| l.origin == LabelOrigin::KnownSelf)
            .map(|l| l.detection.score())
            .fold(f64::INFINITY, f64::min);
        assert!((min_known - 0.68).abs() < 1e-9);
    }

    #[test]
    fn corrections_only_and_empty() {
        let corr = vec![PseudoLabel::human_correction("c", bx(1.0, 1.0, 3.0), CategoryId(1))];
        let ts = assemble_training_set(&[], &[], &corr, &BalancePolicy::default()).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(ts.labels().next().unwrap().origin, LabelOrigin::HumanCorrection);
        assert!(matches!(
            assemble_training_set(&[], &[], &[], &BalancePolicy::default()),
            Err(Error::EmptyTrainingSet)
        ));
    }

    #[test]
    fn infinite_cap_is_plain_union() {
        let novel = vec![label("a", bx(0.0, 0.0, 5.0), 1, 0.5, LabelOrigin::ProposalZsc)];
        let known: Vec<_> = (0..7)
            .map(|i| label("a", bx(10.0 * i as f64 + 10.0, 0.0, 5.0), 0, 0.9, LabelOrigin::KnownSelf))
            .collect();
        let p = BalancePolicy { cap_ratio: f64::INFINITY, ..Default::default() };
        let ts = assemble_training_set(&novel, &known, &[], &p).unwrap();
        assert_eq!(ts.len(), 8);
    }

    #[test]
    fn precision_per_category() {
        let gt: BTreeMap<String, Vec<Detection>> = [(
            "a".to_string(),
            vec![Detection::ground_truth(bx(0.0, 0.0, 10.0), CategoryId(1))],
        )]
        .into();
        let good = vec![label("a", bx(0.0, 0.0, 10.0), 1, 0.5, LabelOrigin::ProposalZsc)];
        assert_eq!(pseudo_label_precision(&good, &gt, 0.5).get(CategoryId(1)).unwrap(), 1.0);
        let bad = vec![label("a", bx(50.0, 50.0, 10.0), 1, 0.5, LabelOrigin::ProposalZsc)];
        let r = pseudo_label_precision(&bad, &gt, 0.5);
        assert_eq!(r.get(CategoryId(1)).unwrap(), 0.0);
        assert!(matches!(r.get(CategoryId(0)), Err(Error::UndefinedPrecision(0))));
    }

    #[test]
    fn schedule_defaults() {
        let s = TrainingSchedule::default();
        assert_eq!((s.iterations, s.learning_rate, s.batch_size, s.weight_decay), (3000, 5e-4, 4, 1e-4));
    }

    #[test]
    fn jsonl_round_trip() {
        let novel = vec![label("a", bx(0.0, 0.0, 5.0), 1, 0.5, LabelOrigin::ProposalZsc)];
        let known = vec![label("b", bx(0.0, 0.0, 5.0), 0, 0.9, LabelOrigin::KnownSelf)];
        let ts = assemble_training_set(&novel, &known, &[], &BalancePolicy::default()).unwrap();
        let mut buf = Vec::new();
        ts.write_jsonl(&mut buf).unwrap();
        let first: serde_json::Value = serde_json::from_slice(buf.split(|b| *b == b'\n').next().unwrap()).unwrap();
        assert_eq!(first["image_id"], "a");
        assert_eq!(first["labels"][0]["origin"], "proposal+zsc");
        assert_eq!(first["labels"][0]["box"]["x_max"], 5.0);
        let back = TrainingSet::read_jsonl(&buf[..], ts.targets.clone()).unwrap();
        assert_eq!(back.len(), ts.len());
        assert_eq!(back.counts, ts.counts);
    }
}
