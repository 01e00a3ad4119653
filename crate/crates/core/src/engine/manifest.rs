//! Run manifest: the append-only stage log, its automaton, and the digest
//! chain that detects tampering.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::EngineConfig;
use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    FindIssue,
    Feed,
    Update,
    Verify,
    Retrain,
    Done,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::FindIssue,
        Stage::Feed,
        Stage::Update,
        Stage::Verify,
        Stage::Retrain,
        Stage::Done,
    ];

    /// Lower-case tag used in paths and cost entries.
    pub fn tag(self) -> &'static str {
        match self {
            Stage::FindIssue => "find-issue",
            Stage::Feed => "feed",
            Stage::Update => "update",
            Stage::Verify => "verify",
            Stage::Retrain => "retrain",
            Stage::Done => "done",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Stage::ALL
            .into_iter()
            .find(|st| st.tag().replace('-', "") == key)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

/// The stage that follows `last` among completed stages. `retrain_wanted`
/// is consulted only after Verify.
pub fn successor(last: Option<Stage>, retrain_wanted: bool) -> Option<Stage> {
    match last {
        None => Some(Stage::FindIssue),
        Some(Stage::FindIssue) => Some(Stage::Feed),
        Some(Stage::Feed) => Some(Stage::Update),
        Some(Stage::Update) | Some(Stage::Retrain) => Some(Stage::Verify),
        Some(Stage::Verify) if retrain_wanted => Some(Stage::Retrain),
        Some(Stage::Verify) => Some(Stage::Done),
        Some(Stage::Done) => None,
    }
}

/// Whether `stages` is a complete run:
/// FindIssue Feed Update Verify (Retrain Verify)* Done.
pub fn accepts(stages: &[Stage]) -> bool {
    is_prefix(stages) && stages.last() == Some(&Stage::Done)
}

/// Whether `stages` can be extended into a complete run.
pub fn is_prefix(stages: &[Stage]) -> bool {
    let mut last = None;
    for &s in stages {
        let ok = successor(last, false) == Some(s) || successor(last, true) == Some(s);
        if !ok {
            return false;
        }
        last = Some(s);
    }
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u32,
    pub stage: Stage,
    pub status: StageStatus,
    /// Verification round the stage belongs to (0 before the first Verify).
    pub round: u32,
    /// Output digest of the state the stage started from.
    pub inputs_digest: String,
    /// Digest of the stage snapshot; empty for failed stages.
    pub outputs_digest: String,
    /// Adapter time charged while the stage ran, in microseconds.
    pub adapter_micros: u64,
    pub cost_entries_added: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Hash over the previous record digest and this record.
    pub record_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    pub run_id: String,
    pub seed: u64,
    pub config: EngineConfig,
    pub config_digest: String,
    /// Digest of the initial snapshot; anchors the record chain.
    pub genesis_digest: String,
    pub label_space_version: u32,
    pub ledger_path: String,
    pub iterations: Vec<IterationRecord>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn config_digest(config: &EngineConfig) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(config)?))
}

fn record_digest(previous: &str, record: &IterationRecord) -> Result<String> {
    let mut unsigned = record.clone();
    unsigned.record_digest.clear();
    let mut h = Sha256::new();
    h.update(previous.as_bytes());
    h.update(serde_json::to_vec(&unsigned)?);
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn new(config: EngineConfig, genesis_digest: String) -> Result<Self> {
        Ok(RunManifest {
            format: MANIFEST_FORMAT,
            run_id: config.settings.run_id.clone(),
            seed: config.world.seed,
            config_digest: config_digest(&config)?,
            config,
            genesis_digest,
            label_space_version: 1,
            ledger_path: "ledger.jsonl".into(),
            iterations: Vec::new(),
        })
    }

    pub fn completed(&self) -> impl Iterator<Item = &IterationRecord> {
        self.iterations.iter().filter(|r| r.status == StageStatus::Completed)
    }

    pub fn last_completed(&self) -> Option<&IterationRecord> {
        self.completed().last()
    }

    pub fn completed_stages(&self) -> Vec<Stage> {
        self.completed().map(|r| r.stage).collect()
    }

    pub fn is_done(&self) -> bool {
        self.last_completed().map(|r| r.stage) == Some(Stage::Done)
    }

    /// Digest of the state the next stage starts from.
    pub fn head_digest(&self) -> &str {
        self.last_completed()
            .map(|r| r.outputs_digest.as_str())
            .unwrap_or(&self.genesis_digest)
    }

    fn chain_tip(&self) -> &str {
        self.iterations
            .last()
            .map(|r| r.record_digest.as_str())
            .unwrap_or(&self.genesis_digest)
    }

    /// Seal `record` into the chain and append it.
    pub fn append(&mut self, mut record: IterationRecord) -> Result<&IterationRecord> {
        record.index = self.iterations.len() as u32 + 1;
        record.record_digest = record_digest(self.chain_tip(), &record)?;
        self.iterations.push(record);
        Ok(self.iterations.last().expect("just pushed"))
    }

    /// Check format, config digest, the record chain and the stage order.
    pub fn verify(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(Error::CorruptManifest(format!("unsupported format {}", self.format)));
        }
        if config_digest(&self.config)? != self.config_digest {
            return Err(Error::CorruptManifest("config snapshot does not match its digest".into()));
        }
        if self.run_id != self.config.settings.run_id || self.seed != self.config.world.seed {
            return Err(Error::CorruptManifest("run id or seed disagrees with the config".into()));
        }
        let mut previous = self.genesis_digest.clone();
        for (i, r) in self.iterations.iter().enumerate() {
            if r.index as usize != i + 1 {
                return Err(Error::CorruptManifest(format!("record {} has index {}", i + 1, r.index)));
            }
            if record_digest(&previous, r)? != r.record_digest {
                return Err(Error::CorruptManifest(format!("record {} digest mismatch", r.index)));
            }
            previous = r.record_digest.clone();
        }
        let mut head = self.genesis_digest.as_str();
        for r in self.completed() {
            if r.inputs_digest != head {
                return Err(Error::CorruptManifest(format!("record {} does not start from its predecessor", r.index)));
            }
            head = &r.outputs_digest;
        }
        if !is_prefix(&self.completed_stages()) {
            return Err(Error::CorruptManifest("stage order violates the run automaton".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(stage: Stage) -> IterationRecord {
        IterationRecord {
            index: 0,
            stage,
            status: StageStatus::Completed,
            round: 0,
            inputs_digest: String::new(),
            outputs_digest: String::new(),
            adapter_micros: 0,
            cost_entries_added: 0,
            error: None,
            record_digest: String::new(),
        }
    }

    fn manifest_with(stages: &[Stage]) -> RunManifest {
        let mut m = RunManifest::new(EngineConfig::default(), "g".into()).unwrap();
        for (i, &s) in stages.iter().enumerate() {
            let mut r = record(s);
            r.inputs_digest = m.head_digest().to_string();
            r.outputs_digest = format!("o{i}");
            m.append(r).unwrap();
        }
        m
    }

    #[test]
    fn fresh_run_starts_with_find_issue() {
        assert_eq!(successor(None, false), Some(Stage::FindIssue));
        assert_eq!(successor(Some(Stage::Verify), false), Some(Stage::Done));
        assert_eq!(successor(Some(Stage::Verify), true), Some(Stage::Retrain));
        assert_eq!(successor(Some(Stage::Done), true), None);
    }

    #[test]
    fn language_examples() {
        use Stage::*;
        assert!(accepts(&[FindIssue, Feed, Update, Verify, Done]));
        assert!(accepts(&[FindIssue, Feed, Update, Verify, Retrain, Verify, Retrain, Verify, Done]));
        assert!(!accepts(&[FindIssue, Feed, Update, Verify]));
        assert!(!accepts(&[FindIssue, Feed, Update, Retrain, Verify, Done]));
        assert!(!accepts(&[FindIssue, Feed, Update, Verify, Retrain, Done]));
        assert!(!accepts(&[]));
    }

    #[test]
    fn stage_names_parse_in_either_case() {
        assert_eq!("find-issue".parse::<Stage>().unwrap(), Stage::FindIssue);
        assert_eq!("FindIssue".parse::<Stage>().unwrap(), Stage::FindIssue);
        assert_eq!("retrain".parse::<Stage>().unwrap(), Stage::Retrain);
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn chain_detects_tampering() {
        use Stage::*;
        let m = manifest_with(&[FindIssue, Feed, Update]);
        m.verify().unwrap();

        let mut t = m.clone();
        t.iterations[1].adapter_micros += 1;
        assert!(matches!(t.verify(), Err(Error::CorruptManifest(_))));

        let mut t = m.clone();
        t.iterations[0].outputs_digest = "x".into();
        assert!(matches!(t.verify(), Err(Error::CorruptManifest(_))));

        let mut t = m.clone();
        t.config.settings.max_rounds = 9;
        assert!(matches!(t.verify(), Err(Error::CorruptManifest(_))));

        let mut t = m;
        t.iterations.remove(1);
        assert!(t.verify().is_err());
    }

    fn stage_strategy() -> impl Strategy<Value = Stage> {
        proptest::sample::select(Stage::ALL.to_vec())
    }

    /// Regex-style reference recognizer, written independently of `successor`.
    fn reference_accepts(s: &[Stage]) -> bool {
        use Stage::*;
        if s.len() < 5 || s[..4] != [FindIssue, Feed, Update, Verify] || s[s.len() - 1] != Done {
            return false;
        }
        let middle = &s[4..s.len() - 1];
        middle.len().is_multiple_of(2) && middle.chunks(2).all(|c| c == [Retrain, Verify])
    }

    proptest! {
        #[test]
        fn automaton_matches_reference_language(s in proptest::collection::vec(stage_strategy(), 0..12)) {
            prop_assert_eq!(accepts(&s), reference_accepts(&s));
        }

        #[test]
        fn walks_of_successor_are_accepted(choices in proptest::collection::vec(any::<bool>(), 0..8)) {
            let mut seq = Vec::new();
            let mut last = None;
            let mut it = choices.into_iter();
            while let Some(next) = successor(last, last == Some(Stage::Verify) && it.next().unwrap_or(false)) {
                seq.push(next);
                last = Some(next);
            }
            prop_assert!(accepts(&seq));
        }
    }
}
