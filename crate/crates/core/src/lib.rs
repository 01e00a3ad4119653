//! Data engine for open-world object detection: find missing categories from
//! captions, feed matching images, pseudo-label and update the detector, verify
//! with generated scenarios, and account for every dollar spent.

pub mod adapters;
pub mod detection;
pub mod error;
pub mod feeder;
pub mod finder;
pub mod geometry;
pub mod labels;
pub mod thresholds;
pub mod updater;
pub mod worldsim;
pub mod evalcost;
pub mod rng;
pub mod verifier;
pub mod engine;
pub mod experiments;

pub use detection::{CategoryId, Detection, ImageRecord};
pub use engine::{Engine, EngineConfig, EngineOptions, ReviewerMode, RunManifest, Stage};
pub use error::{Error, Result};
pub use evalcost::{CostKind, CostLedger, CostRates, EvalReport};
pub use geometry::BoundingBox;
pub use labels::{CategoryStatus, LabelSpace};
pub use thresholds::EngineThresholds;
pub use worldsim::{SimWorld, SimWorldConfig};
