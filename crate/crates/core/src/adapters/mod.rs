//! Contracts for the external model capabilities the engine consumes.
//!
//! Every adapter works on image ids; moving pixels is the backend's job.
//! The simulated backends live in [`crate::worldsim`], the HTTP client in
//! [`remote`]. Both report each call to a shared [`UsageMeter`] so the cost
//! ledger can charge compute time.

pub mod remote;

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::detection::Detection;
use crate::error::Result;
use crate::feeder::EmbeddingVector;
use crate::geometry::BoundingBox;
use crate::updater::{TrainingSchedule, TrainingSet};

pub trait CaptionerAdapter: Send + Sync {
    fn describe(&self, image_id: &str) -> Result<String>;
}

pub trait EmbedderAdapter: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;
    fn embed_image(&self, image_id: &str) -> Result<EmbeddingVector>;
}

/// One labeled box from a zero-shot detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawProposal {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub label: String,
    pub score: f64,
}

pub trait ProposerAdapter: Send + Sync {
    fn propose(&self, image_id: &str, prompts: &[String]) -> Result<Vec<RawProposal>>;
}

pub trait CropClassifierAdapter: Send + Sync {
    /// One score in `[0, 1]` per entry of `labels`.
    fn classify(&self, image_id: &str, bbox: &BoundingBox, labels: &[String]) -> Result<Vec<f64>>;
}

pub trait ScenarioGeneratorAdapter: Send + Sync {
    fn generate(&self, category: &str, n: usize) -> Result<Vec<String>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub steps: u64,
    pub gpu_seconds: u64,
}

impl TrainOutcome {
    pub fn gpu_hours(&self) -> f64 {
        self.gpu_seconds as f64 / 3600.0
    }
}

pub trait TrainableDetectorAdapter: Send + Sync {
    fn detect(&self, image_id: &str) -> Result<Vec<Detection>>;
    /// Number of categories the detector can currently emit.
    fn num_categories(&self) -> usize;
    /// Grow the output space to `count` categories; existing ones untouched.
    fn extend_categories(&mut self, count: usize);
    fn train(&mut self, set: &TrainingSet, schedule: &TrainingSchedule) -> Result<TrainOutcome>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Captioner,
    Embedder,
    Proposer,
    CropClassifier,
    ScenarioGenerator,
    Detector,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub calls: u64,
    pub micros: u64,
    pub payload_bytes: u64,
}

/// Accumulates adapter calls. Integer totals keep sums independent of the
/// order concurrent workers report in.
#[derive(Debug, Default)]
pub struct UsageMeter {
    totals: Mutex<BTreeMap<AdapterKind, UsageTotals>>,
}

impl UsageMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: AdapterKind, elapsed: Duration, payload_bytes: usize) {
        let mut totals = self.totals.lock().expect("usage meter poisoned");
        let t = totals.entry(kind).or_default();
        t.calls += 1;
        t.micros += elapsed.as_micros() as u64;
        t.payload_bytes += payload_bytes as u64;
    }

    pub fn snapshot(&self) -> BTreeMap<AdapterKind, UsageTotals> {
        self.totals.lock().expect("usage meter poisoned").clone()
    }

    pub fn total_micros(&self) -> u64 {
        self.snapshot().values().map(|t| t.micros).sum()
    }
}

/// Bundle of the perception adapters one engine run uses.
pub struct AdapterSet {
    pub captioner: Box<dyn CaptionerAdapter>,
    pub embedder: Box<dyn EmbedderAdapter>,
    pub proposer: Box<dyn ProposerAdapter>,
    pub classifier: Box<dyn CropClassifierAdapter>,
    pub scenarios: Box<dyn ScenarioGeneratorAdapter>,
}
