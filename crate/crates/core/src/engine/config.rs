//! Engine configuration, read from TOML with one section per settings type.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapters::remote::RemoteAdapterConfig;
use crate::error::{Error, Result};
use crate::evalcost::{ApMode, CostRates};
use crate::thresholds::EngineThresholds;
use crate::updater::{BalancePolicy, TrainingSchedule};
use crate::verifier::DiversityParams;
use crate::worldsim::{reference_schedule, SimWorldConfig};

/// Who decides verification cases.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReviewerMode {
    /// Cases wait for verdicts through the review API.
    #[default]
    Human,
    /// Every case passes without inspection.
    AutoPass,
    /// Simulated reviewer that compares predictions with ground truth.
    Oracle,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    #[default]
    Sim,
    /// Perception adapters over HTTP; detector training stays simulated.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSettings {
    pub run_id: String,
    pub backend: Backend,
    pub reviewer: ReviewerMode,
    /// Upper bound on Verify stages per run.
    pub max_rounds: u32,
    /// Pool images captioned by the issue finder.
    pub scan_images: usize,
    pub issue_trigger: usize,
    /// Extra out-of-world names the captioner vocabulary recognizes.
    pub extra_vocabulary: Vec<String>,
    pub scenarios_per_category: usize,
    /// Images retrieved per verification scenario.
    pub case_images: usize,
    /// Mix known-category pseudo-labels into training.
    pub mix_known: bool,
    pub ap_mode: ApMode,
    /// Unmatched novel predictions at or above this score fail an oracle review.
    pub oracle_false_positive_score: f64,
}

impl Default for EngineSettings {
    fn default() -> Self {
        EngineSettings {
            run_id: "default".into(),
            backend: Backend::Sim,
            reviewer: ReviewerMode::Human,
            max_rounds: 3,
            scan_images: 200,
            issue_trigger: 3,
            extra_vocabulary: Vec::new(),
            scenarios_per_category: 10,
            case_images: 10,
            mix_known: true,
            ap_mode: ApMode::Ap50,
            oracle_false_positive_score: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(rename = "EngineSettings")]
    pub settings: EngineSettings,
    #[serde(rename = "EngineThresholds")]
    pub thresholds: EngineThresholds,
    #[serde(rename = "TrainingSchedule")]
    pub schedule: TrainingSchedule,
    #[serde(rename = "SimWorldConfig")]
    pub world: SimWorldConfig,
    #[serde(rename = "CostRates")]
    pub rates: CostRates,
    #[serde(rename = "BalancePolicy")]
    pub balance: BalancePolicy,
    #[serde(rename = "DiversityParams")]
    pub diversity: DiversityParams,
    #[serde(rename = "RemoteAdapterConfig")]
    pub remote: RemoteAdapterConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            settings: EngineSettings::default(),
            thresholds: EngineThresholds::default(),
            schedule: reference_schedule(),
            world: SimWorldConfig::default(),
            rates: CostRates::default(),
            balance: BalancePolicy::default(),
            diversity: DiversityParams::default(),
            remote: RemoteAdapterConfig::default(),
        }
    }
}

impl EngineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: EngineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        self.schedule.validate()?;
        self.world.validate()?;
        self.rates.validate()?;
        let s = &self.settings;
        if s.run_id.is_empty() || !s.run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::Config(format!(
                "run_id `{}` must be non-empty and use only [A-Za-z0-9_-]",
                s.run_id
            )));
        }
        let counts = [
            ("max_rounds", s.max_rounds as usize),
            ("scan_images", s.scan_images),
            ("issue_trigger", s.issue_trigger),
            ("scenarios_per_category", s.scenarios_per_category),
            ("case_images", s.case_images),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&s.oracle_false_positive_score) {
            return Err(Error::Config("oracle_false_positive_score must lie in [0, 1]".into()));
        }
        if self.balance.cap_ratio.is_nan() || self.balance.cap_ratio < 0.0 || !(self.balance.nms_iou > 0.0 && self.balance.nms_iou <= 1.0) {
            return Err(Error::Config("balance policy needs cap_ratio >= 0 and nms_iou in (0, 1]".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = EngineConfig::default();
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        assert!(text.contains("[EngineThresholds]"));
        assert!(text.contains("[SimWorldConfig]"));
        assert_eq!(EngineConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = EngineConfig::from_toml(
            "[EngineSettings]\nrun_id = \"r1\"\nreviewer = \"oracle\"\n\n[SimWorldConfig]\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(c.settings.run_id, "r1");
        assert_eq!(c.settings.reviewer, ReviewerMode::Oracle);
        assert_eq!(c.world.seed, 7);
        assert_eq!(c.thresholds, EngineThresholds::default());
        assert_eq!(c.settings.max_rounds, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(EngineConfig::from_toml("[EngineSettings]\nbogus = 1\n").is_err());
        assert!(EngineConfig::from_toml("[Nope]\n").is_err());
        assert!(EngineConfig::from_toml("[EngineThresholds]\ncrop_scale = 0.5\n").is_err());
        assert!(EngineConfig::from_toml("[EngineSettings]\nrun_id = \"../x\"\n").is_err());
        assert!(EngineConfig::from_toml("[EngineSettings]\nmax_rounds = 0\n").is_err());
    }
}
