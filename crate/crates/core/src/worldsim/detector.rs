//! Linear softmax detector over latent region features.
//!
//! Row 0 of the weight matrix is background; row `c + 1` scores label-space
//! category `c`. Training is mini-batch SGD on mean cross-entropy with L2
//! weight decay. Every region of a training image that no label covers is
//! taught as background, which is what makes unlabeled known objects fade.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{adapters::softmax, dot, stream, SimImage, SimWorld};
use crate::adapters::{TrainOutcome, TrainableDetectorAdapter};
use crate::detection::{CategoryId, Detection};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::labels::LabelSpace;
use crate::updater::{TrainingSchedule, TrainingSet};

/// Simulated GPU time per optimizer step, in milliseconds.
const GPU_MILLIS_PER_STEP: u64 = 600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub steps: u64,
    pub learning_rate: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDetectorState {
    pub dimension: usize,
    pub rows: usize,
    /// Row-major `rows x dimension`.
    pub weights: Vec<f64>,
    pub history: Vec<TrainRecord>,
}

impl SimDetectorState {
    pub fn new(dimension: usize, categories: usize) -> Self {
        SimDetectorState {
            dimension,
            rows: categories + 1,
            weights: vec![0.0; (categories + 1) * dimension],
            history: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.rows * self.dimension || self.rows == 0 {
            return Err(Error::InvalidData("detector weight shape mismatch".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidData("non-finite detector weight".into()));
        }
        Ok(())
    }

    pub fn probabilities(&self, feature: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = self
            .weights
            .chunks(self.dimension)
            .map(|row| dot(row, feature))
            .collect();
        softmax(&logits)
    }
}

/// One (feature, target row) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub feature: Vec<f64>,
    pub target: usize,
}

/// Mean softmax cross-entropy plus `weight_decay / 2 * |W|^2`, and its
/// gradient with respect to `weights`.
pub fn loss_and_gradient(weights: &[f64], rows: usize, dim: usize, samples: &[Sample], weight_decay: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; rows * dim];
    let mut loss = 0.0;
    let n = samples.len().max(1) as f64;
    for s in samples {
        let logits: Vec<f64> = weights.chunks(dim).map(|row| dot(row, &s.feature)).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[s.target];
        for (r, l) in logits.iter().enumerate() {
            let coeff = ((l - lse).exp() - if r == s.target { 1.0 } else { 0.0 }) / n;
            for (g, x) in grad[r * dim..(r + 1) * dim].iter_mut().zip(&s.feature) {
                *g += coeff * x;
            }
        }
    }
    loss /= n;
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    loss += 0.5 * weight_decay * sq;
    for (g, w) in grad.iter_mut().zip(weights) {
        *g += weight_decay * w;
    }
    (loss, grad)
}

pub struct SimDetector {
    world: Arc<SimWorld>,
    state: SimDetectorState,
}

impl SimDetector {
    pub fn new(world: Arc<SimWorld>, categories: usize) -> Self {
        let d = world.dimension();
        SimDetector {
            world,
            state: SimDetectorState::new(d, categories),
        }
    }

    pub fn from_state(world: Arc<SimWorld>, state: SimDetectorState) -> Result<Self> {
        state.validate()?;
        if state.dimension != world.dimension() {
            return Err(Error::DimensionMismatch {
                expected: world.dimension(),
                actual: state.dimension,
            });
        }
        Ok(SimDetector { world, state })
    }

    pub fn state(&self) -> &SimDetectorState {
        &self.state
    }

    /// Turn labeled boxes into samples: each label takes the feature of the
    /// region it overlaps most (background if under 0.1 IoU); uncovered
    /// regions become background samples.
    pub fn samples_for(&self, set: &TrainingSet) -> Result<Vec<Sample>> {
        let mut samples = Vec::new();
        for (image_id, labels) in &set.entries {
            let img = self.world.image(image_id)?;
            let regions: Vec<_> = img.detector_regions().collect();
            for l in labels {
                let row = l.detection.category.index() + 1;
                if row >= self.state.rows {
                    return Err(Error::UnknownCategory(format!(
                        "label category {} beyond detector output",
                        l.detection.category.0
                    )));
                }
                let best = regions
                    .iter()
                    .map(|(b, f)| (iou(b, &l.detection.bbox), *f))
                    .fold((0.0, None), |acc, (v, f)| if v > acc.0 { (v, Some(f)) } else { acc });
                let feature = match best {
                    (v, Some(f)) if v >= 0.1 => f.to_vec(),
                    _ => self.world.background.clone(),
                };
                samples.push(Sample { feature, target: row });
            }
            for (b, f) in &regions {
                if !labels.iter().any(|l| iou(b, &l.detection.bbox) >= 0.5) {
                    samples.push(Sample {
                        feature: f.to_vec(),
                        target: 0,
                    });
                }
            }
        }
        Ok(samples)
    }

    /// Samples from ground truth of `label_space` categories on `ids`;
    /// objects of other categories are background.
    pub fn ground_truth_samples(&self, ids: &[String], label_space: &LabelSpace) -> Result<Vec<Sample>> {
        let map = self.world.label_map(label_space);
        let mut samples = Vec::new();
        for id in ids {
            let img: &SimImage = self.world.image(id)?;
            for o in &img.objects {
                let target = map[o.category].map_or(0, |c| c.index() + 1);
                samples.push(Sample {
                    feature: o.feature.clone(),
                    target,
                });
            }
            for r in &img.background_regions {
                samples.push(Sample {
                    feature: r.feature.clone(),
                    target: 0,
                });
            }
        }
        Ok(samples)
    }

    /// Mean cross-entropy (no decay term) on `samples`.
    pub fn cross_entropy(&self, samples: &[Sample]) -> f64 {
        loss_and_gradient(&self.state.weights, self.state.rows, self.state.dimension, samples, 0.0).0
    }

    /// Mini-batch SGD. Batches walk a fresh shuffle of the samples each
    /// epoch; the shuffle stream is keyed by how many fits came before.
    pub fn fit(&mut self, samples: &[Sample], schedule: &TrainingSchedule) -> Result<TrainOutcome> {
        schedule.validate()?;
        if samples.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        if schedule.iterations == 0 {
            return Ok(TrainOutcome::default());
        }
        let (rows, dim) = (self.state.rows, self.state.dimension);
        let mut rng = stream(self.world.seed(), "train", self.state.history.len() as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        let mut batch: Vec<Sample> = Vec::with_capacity(schedule.batch_size);
        for _ in 0..schedule.iterations {
            batch.clear();
            for _ in 0..schedule.batch_size {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(samples[order[cursor]].clone());
                cursor += 1;
            }
            let (_, grad) = loss_and_gradient(&self.state.weights, rows, dim, &batch, schedule.weight_decay);
            for (w, g) in self.state.weights.iter_mut().zip(&grad) {
                *w -= schedule.learning_rate * g;
            }
        }
        self.state.validate()?;
        self.state.history.push(TrainRecord {
            steps: schedule.iterations,
            learning_rate: schedule.learning_rate,
            samples: samples.len(),
        });
        Ok(TrainOutcome {
            steps: schedule.iterations,
            gpu_seconds: schedule.iterations * GPU_MILLIS_PER_STEP / 1000,
        })
    }
}

impl TrainableDetectorAdapter for SimDetector {
    fn detect(&self, image_id: &str) -> Result<Vec<Detection>> {
        let img = self.world.image(image_id)?;
        let mut out = Vec::new();
        for (bbox, feature) in img.detector_regions() {
            let p = self.state.probabilities(feature);
            let (row, score) = p
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
            if row == 0 {
                continue;
            }
            out.push(Detection::new(*bbox, CategoryId(row as u32 - 1), score.clamp(0.0, 1.0))?);
        }
        Ok(out)
    }

    fn num_categories(&self) -> usize {
        self.state.rows - 1
    }

    fn extend_categories(&mut self, count: usize) {
        if count + 1 > self.state.rows {
            self.state
                .weights
                .resize((count + 1) * self.state.dimension, 0.0);
            self.state.rows = count + 1;
        }
    }

    fn train(&mut self, set: &TrainingSet, schedule: &TrainingSchedule) -> Result<TrainOutcome> {
        if set.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let samples = self.samples_for(set)?;
        self.fit(&samples, schedule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::updater::PseudoLabel;
    use crate::worldsim::{generate_world, reference_schedule, Split, SimWorldConfig};
    use proptest::prelude::*;
    use rand::Rng;

    fn world(known: &[&str], novel: &[&str], images: usize) -> Arc<SimWorld> {
        Arc::new(
            generate_world(&SimWorldConfig {
                known_categories: known.iter().map(|s| s.to_string()).collect(),
                novel_categories: novel.iter().map(|s| s.to_string()).collect(),
                images,
                ..Default::default()
            })
            .unwrap(),
        )
    }

    #[test]
    fn untrained_is_uniform() {
        let w = world(&["car", "bus"], &[], 10);
        let det = SimDetector::new(w.clone(), 2);
        let f = &w.images[0].objects[0].feature;
        for p in det.state().probabilities(f) {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_image_detects_nothing() {
        let w = Arc::new(
            generate_world(&SimWorldConfig {
                images: 5,
                objects_min: 0,
                objects_max: 0,
                background_regions: 0,
                ..Default::default()
            })
            .unwrap(),
        );
        let det = SimDetector::new(w, 9);
        assert!(det.detect("img-00000").unwrap().is_empty());
    }

    #[test]
    fn trained_detector_recognizes_categories() {
        let w = world(&["car", "bus", "truck"], &[], 300);
        let ls = w.initial_label_space().unwrap();
        let mut det = SimDetector::new(w.clone(), 3);
        let train = det.ground_truth_samples(&w.ids_in(Split::Pretrain), &ls).unwrap();
        det.fit(&train, &reference_schedule()).unwrap();
        let mut correct = 0;
        let mut total = 0;
        for id in w.ids_in(Split::Eval) {
            let img = w.image(&id).unwrap();
            for o in &img.objects {
                let p = det.state().probabilities(&o.feature);
                let arg = (0..p.len()).max_by(|a, b| p[*a].partial_cmp(&p[*b]).unwrap()).unwrap();
                correct += usize::from(arg == o.category + 1);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.95, "{correct}/{total}");
    }

    #[test]
    fn zero_iterations_is_identity() {
        let w = world(&["car"], &[], 10);
        let mut det = SimDetector::new(w.clone(), 1);
        let before = det.state().clone();
        let ls = w.initial_label_space().unwrap();
        let s = det.ground_truth_samples(&w.ids_in(Split::Eval), &ls).unwrap();
        let out = det
            .fit(&s, &TrainingSchedule { iterations: 0, ..Default::default() })
            .unwrap();
        assert_eq!(out, TrainOutcome::default());
        assert_eq!(det.state(), &before);
    }

    #[test]
    fn novel_only_training_raises_known_loss() {
        let w = world(&["car"], &["trailer"], 400);
        let ls = w.initial_label_space().unwrap();
        let mut det = SimDetector::new(w.clone(), 1);
        det.fit(&det.ground_truth_samples(&w.ids_in(Split::Pretrain), &ls).unwrap(), &reference_schedule())
            .unwrap();
        let held_out: Vec<Sample> = det
            .ground_truth_samples(&w.ids_in(Split::Eval), &ls)
            .unwrap()
            .into_iter()
            .filter(|s| s.target == 1)
            .collect();
        let before = det.cross_entropy(&held_out);

        det.extend_categories(2);
        let labels: Vec<PseudoLabel> = w
            .ids_in(Split::Pool)
            .iter()
            .flat_map(|id| {
                w.image(id)
                    .unwrap()
                    .objects
                    .iter()
                    .filter(|o| o.category == 1)
                    .map(|o| PseudoLabel::human_correction(id, o.bbox, CategoryId(1)))
                    .collect::<Vec<_>>()
            })
            .collect();
        let set = TrainingSet::from_labels(labels, vec![CategoryId(1)]);
        det.train(&set, &reference_schedule()).unwrap();
        assert!(det.cross_entropy(&held_out) > before);
    }

    #[test]
    fn extension_appends_zero_rows() {
        let w = world(&["car"], &[], 5);
        let mut det = SimDetector::new(w, 1);
        det.state.weights.iter_mut().for_each(|x| *x = 1.0);
        det.extend_categories(3);
        assert_eq!(det.num_categories(), 3);
        assert_eq!(det.state().weights.len(), 4 * 32);
        assert!(det.state().weights[64..].iter().all(|x| *x == 0.0));
        assert!(det.state().weights[..64].iter().all(|x| *x == 1.0));
    }

    #[test]
    fn full_batch_loss_non_increasing() {
        let w = world(&["car", "bus"], &["trailer"], 60);
        let ls = w.initial_label_space().unwrap();
        let mut det = SimDetector::new(w.clone(), 2);
        let s = det.ground_truth_samples(&w.ids_in(Split::Pool), &ls).unwrap();
        let schedule = TrainingSchedule {
            iterations: 1,
            learning_rate: 0.05,
            batch_size: s.len(),
            weight_decay: 1e-4,
        };
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let (l, _) = loss_and_gradient(&det.state.weights, det.state.rows, det.state.dimension, &s, 1e-4);
            assert!(l <= last + 1e-12);
            last = l;
            det.fit(&s, &schedule).unwrap();
        }
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..1_000_000) {
            let mut rng = stream(seed, "grad-check", 0);
            let rows = rng.random_range(2..5usize);
            let dim = rng.random_range(2..6usize);
            let n = rng.random_range(1..6usize);
            let w: Vec<f64> = (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let samples: Vec<Sample> = (0..n)
                .map(|_| Sample {
                    feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    target: rng.random_range(0..rows),
                })
                .collect();
            let (_, g) = loss_and_gradient(&w, rows, dim, &samples, 1e-3);
            let h = 1e-5;
            for i in 0..w.len() {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (loss_and_gradient(&wp, rows, dim, &samples, 1e-3).0
                    - loss_and_gradient(&wm, rows, dim, &samples, 1e-3).0) / (2.0 * h);
                prop_assert!(relative_error(g[i], fd) < 1e-5 || (g[i] - fd).abs() < 1e-9,
                    "component {}: analytic {} vs numeric {}", i, g[i], fd);
            }
        }
    }
}
