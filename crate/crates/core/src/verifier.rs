//! Verification: scenario descriptions, per-scenario retrieval, the
//! diversity measure, and the review workflow whose corrections feed the
//! next training round.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{EmbedderAdapter, ScenarioGeneratorAdapter, TrainableDetectorAdapter};
use crate::detection::{CategoryId, Detection};
use crate::error::{Error, Result};
use crate::feeder::EmbeddingStore;
use crate::geometry::BoundingBox;
use crate::labels::{LabelSpace, TermNormalizer};
use crate::rng::stream;
use crate::updater::PseudoLabel;

/// Extra generator requests made when duplicates shorten a batch.
pub const SCENARIO_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioDescription {
    pub text: String,
    pub category: String,
    /// Which generator request produced the text (0 = first).
    pub attempt: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioBatch {
    pub descriptions: Vec<ScenarioDescription>,
    /// Fewer than requested distinct descriptions were obtained.
    pub short: bool,
}

fn mentions(text: &str, category: &str, normalizer: &dyn TermNormalizer) -> bool {
    let t = format!(" {} ", normalizer.normalize(text));
    let c = normalizer.normalize(category);
    !c.is_empty() && t.contains(&format!(" {c} "))
}

/// Ask for `n` descriptions of scenes containing `category`. Duplicates
/// (after normalization) and texts not mentioning the category are dropped
/// and re-requested a bounded number of times.
pub fn generate_scenarios(
    generator: &dyn ScenarioGeneratorAdapter,
    category: &str,
    n: usize,
    normalizer: &dyn TermNormalizer,
) -> Result<ScenarioBatch> {
    if n == 0 {
        return Err(Error::InvalidCount("scenario count must be >= 1".into()));
    }
    let mut seen = BTreeSet::new();
    let mut descriptions = Vec::new();
    for attempt in 0..=SCENARIO_RETRIES {
        if descriptions.len() >= n {
            break;
        }
        for text in generator.generate(category, n)? {
            if descriptions.len() >= n {
                break;
            }
            if !mentions(&text, category, normalizer) || !seen.insert(normalizer.normalize(&text)) {
                continue;
            }
            descriptions.push(ScenarioDescription {
                text,
                category: category.to_string(),
                attempt,
            });
        }
    }
    Ok(ScenarioBatch {
        short: descriptions.len() < n,
        descriptions,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityParams {
    pub per_query_k: usize,
    pub repeats: usize,
    pub pool_per_repeat: usize,
    pub seed: u64,
}

impl Default for DiversityParams {
    fn default() -> Self {
        DiversityParams {
            per_query_k: 10,
            repeats: 10,
            pool_per_repeat: 100,
            seed: 0,
        }
    }
}

/// Mean fraction of distinct images in a pool of retrieved images.
///
/// Each repeat draws `ceil(pool / k)` descriptions at random (cycling when
/// there are fewer), takes each one's top-`k` results in turn, and counts
/// distinct ids among the first `pool` entries. Result lies in
/// `[1/pool, 1]`.
pub fn scenario_diversity<S: AsRef<str>>(
    descriptions: &[S],
    store: &EmbeddingStore,
    embedder: &dyn EmbedderAdapter,
    params: &DiversityParams,
) -> Result<f64> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    if descriptions.is_empty() || params.per_query_k == 0 || params.repeats == 0 || params.pool_per_repeat == 0 {
        return Err(Error::InvalidCount("diversity needs descriptions, k, repeats and pool >= 1".into()));
    }
    let k = params.per_query_k;
    let results: Vec<Vec<String>> = descriptions
        .iter()
        .map(|d| {
            let q = embedder.embed_text(d.as_ref())?;
            let top: Vec<String> = store.top_k(&q, k)?.into_iter().map(|(id, _)| id).collect();
            Ok(top.iter().cycle().take(k).cloned().collect())
        })
        .collect::<Result<_>>()?;
    let draws = params.pool_per_repeat.div_ceil(k);
    let mut distinct_total = 0usize;
    for r in 0..params.repeats {
        let mut rng = stream(params.seed, "diversity", r as u64);
        let mut order: Vec<usize> = (0..results.len()).collect();
        order.shuffle(&mut rng);
        let pool: Vec<&String> = order
            .iter()
            .cycle()
            .take(draws)
            .flat_map(|&i| results[i].iter())
            .take(params.pool_per_repeat)
            .collect();
        let distinct: BTreeSet<&String> = pool.iter().copied().collect();
        distinct_total += distinct.len();
    }
    // one division keeps the degenerate cases exact
    Ok(distinct_total as f64 / (params.repeats * params.pool_per_repeat) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseState {
    Pending,
    Passed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    #[serde(alias = "pass")]
    Passed,
    #[serde(alias = "fail")]
    Failed,
}

/// A human-drawn ground-truth box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correction {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub category: CategoryId,
}

impl Correction {
    pub fn to_pseudo_label(&self) -> PseudoLabel {
        PseudoLabel::human_correction(&self.image_id, self.bbox, self.category)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationCase {
    pub id: String,
    pub round: u32,
    pub scenario: ScenarioDescription,
    pub images: Vec<String>,
    /// Detector output per image, restricted to the label space.
    pub predictions: BTreeMap<String, Vec<Detection>>,
    pub state: CaseState,
    pub corrections: Vec<Correction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub revision: u64,
}

/// One pending case per description, holding the top `k_images` retrieved
/// images and the detector's predictions on them.
pub fn build_cases(
    descriptions: &[ScenarioDescription],
    store: &EmbeddingStore,
    embedder: &dyn EmbedderAdapter,
    detector: &dyn TrainableDetectorAdapter,
    label_space: &LabelSpace,
    k_images: usize,
    round: u32,
) -> Result<Vec<VerificationCase>> {
    descriptions
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let q = embedder.embed_text(&d.text)?;
            let images: Vec<String> = store.top_k(&q, k_images)?.into_iter().map(|(id, _)| id).collect();
            let predictions = images
                .iter()
                .map(|id| {
                    let dets = detector
                        .detect(id)?
                        .into_iter()
                        .filter(|det| label_space.get(det.category).is_some())
                        .collect();
                    Ok((id.clone(), dets))
                })
                .collect::<Result<_>>()?;
            Ok(VerificationCase {
                id: format!("r{round}-c{i:03}"),
                round,
                scenario: d.clone(),
                images,
                predictions,
                state: CaseState::Pending,
                corrections: Vec::new(),
                note: None,
                revision: 0,
            })
        })
        .collect()
}

fn check_revision(case: &VerificationCase, expected: u64) -> Result<()> {
    if case.revision != expected {
        return Err(Error::RevisionConflict {
            expected,
            current: case.revision,
        });
    }
    Ok(())
}

/// Apply a review verdict under optimistic concurrency. On error the case
/// is left untouched.
pub fn record_verdict(
    case: &mut VerificationCase,
    verdict: Verdict,
    corrections: Vec<Correction>,
    expected_revision: u64,
    note: Option<String>,
) -> Result<()> {
    check_revision(case, expected_revision)?;
    if case.state == CaseState::Passed {
        return Err(Error::InvalidTransition(format!("case {} already passed; reopen it first", case.id)));
    }
    if verdict == Verdict::Passed && !corrections.is_empty() {
        return Err(Error::InvalidTransition("a passed case carries no corrections".into()));
    }
    if let Some(c) = corrections.iter().find(|c| !case.images.contains(&c.image_id)) {
        return Err(Error::UnknownImage(c.image_id.clone()));
    }
    case.state = match verdict {
        Verdict::Passed => CaseState::Passed,
        Verdict::Failed => CaseState::Failed,
    };
    case.corrections = corrections;
    case.note = note;
    case.revision += 1;
    Ok(())
}

/// Send a reviewed case back to pending, dropping its corrections.
pub fn reopen(case: &mut VerificationCase, expected_revision: u64) -> Result<()> {
    check_revision(case, expected_revision)?;
    if case.state == CaseState::Pending {
        return Err(Error::InvalidTransition(format!("case {} is already pending", case.id)));
    }
    case.state = CaseState::Pending;
    case.corrections.clear();
    case.revision += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total: usize,
    pub pending: usize,
    pub passed: usize,
    pub failed: usize,
    pub corrections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub run_id: String,
    pub cases: Vec<VerificationCase>,
}

impl ReviewSession {
    pub fn new(run_id: impl Into<String>, cases: Vec<VerificationCase>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        if let Some(dup) = cases.iter().find(|c| !ids.insert(c.id.as_str())) {
            return Err(Error::InvalidData(format!("case {} appears twice", dup.id)));
        }
        Ok(ReviewSession {
            run_id: run_id.into(),
            cases,
        })
    }

    pub fn get(&self, id: &str) -> Option<&VerificationCase> {
        self.cases.iter().find(|c| c.id == id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut VerificationCase> {
        self.cases.iter_mut().find(|c| c.id == id)
    }

    pub fn with_state(&self, state: Option<CaseState>) -> Vec<&VerificationCase> {
        self.cases
            .iter()
            .filter(|c| state.is_none_or(|s| c.state == s))
            .collect()
    }

    pub fn stats(&self) -> ReviewStats {
        let count = |s| self.cases.iter().filter(|c| c.state == s).count();
        ReviewStats {
            total: self.cases.len(),
            pending: count(CaseState::Pending),
            passed: count(CaseState::Passed),
            failed: count(CaseState::Failed),
            corrections: self.cases.iter().map(|c| c.corrections.len()).sum(),
        }
    }

    /// Corrections from failed cases, as training labels.
    pub fn corrections_for_training(&self) -> Vec<PseudoLabel> {
        self.cases
            .iter()
            .filter(|c| c.state == CaseState::Failed)
            .flat_map(|c| c.corrections.iter().map(Correction::to_pseudo_label))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::EmbeddingVector;
    use crate::labels::{AliasTable, DefaultNormalizer};

    struct ListGen(Vec<String>);

    impl ScenarioGeneratorAdapter for ListGen {
        fn generate(&self, _: &str, _: usize) -> Result<Vec<String>> {
            Ok(self.0.clone())
        }
    }

    fn norm() -> DefaultNormalizer {
        DefaultNormalizer::new(AliasTable::new())
    }

    #[test]
    fn scenarios_deduplicate_and_flag_short() {
        let g = ListGen(vec![
            "A trailer at night.".into(),
            "a Trailer at night".into(),
            "A truck in fog.".into(),
            "Two trailers in snow.".into(),
        ]);
        let b = generate_scenarios(&g, "trailer", 3, &norm()).unwrap();
        assert_eq!(b.descriptions.len(), 2);
        assert!(b.short);
        assert!(matches!(generate_scenarios(&g, "trailer", 0, &norm()), Err(Error::InvalidCount(_))));
    }

    /// Embeds description `i` (text "d{i}") to one-hot axis `i`.
    struct AxisEmbedder(usize);

    impl EmbedderAdapter for AxisEmbedder {
        fn dimension(&self) -> usize {
            self.0
        }
        fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
            let i: usize = text.trim_start_matches('d').parse().unwrap();
            let mut v = vec![0.0; self.0];
            v[i % self.0] = 1.0;
            EmbeddingVector::new(v)
        }
        fn embed_image(&self, _: &str) -> Result<EmbeddingVector> {
            unreachable!()
        }
    }

    fn descs(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn diversity_single_image_store() {
        let mut s = EmbeddingStore::new(4);
        s.insert("only", EmbeddingVector::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let v = scenario_diversity(&descs(10), &s, &AxisEmbedder(4), &DiversityParams::default()).unwrap();
        assert_eq!(v, 1.0 / 100.0);
    }

    #[test]
    fn diversity_all_distinct() {
        // ten clusters of ten images, one cluster per description axis
        let mut s = EmbeddingStore::new(10);
        for axis in 0..10 {
            for j in 0..10 {
                let mut v = vec![0.0; 10];
                v[axis] = 1.0;
                v[(axis + 1) % 10] = 0.01 * (j + 1) as f64;
                s.insert(format!("a{axis}-{j}"), EmbeddingVector::new(v).unwrap()).unwrap();
            }
        }
        let p = DiversityParams::default();
        assert_eq!(scenario_diversity(&descs(10), &s, &AxisEmbedder(10), &p).unwrap(), 1.0);
        assert!(matches!(
            scenario_diversity(&descs(3), &EmbeddingStore::new(3), &AxisEmbedder(3), &p),
            Err(Error::EmptyStore)
        ));
    }

    fn case() -> VerificationCase {
        VerificationCase {
            id: "r0-c000".into(),
            round: 0,
            scenario: ScenarioDescription {
                text: "A trailer.".into(),
                category: "trailer".into(),
                attempt: 0,
            },
            images: vec!["img-1".into()],
            predictions: BTreeMap::new(),
            state: CaseState::Pending,
            corrections: vec![],
            note: None,
            revision: 0,
        }
    }

    fn corr() -> Correction {
        Correction {
            image_id: "img-1".into(),
            bbox: BoundingBox::new(1.0, 1.0, 5.0, 5.0).unwrap(),
            category: CategoryId(8),
        }
    }

    #[test]
    fn verdict_transitions() {
        let mut c = case();
        record_verdict(&mut c, Verdict::Passed, vec![], 0, None).unwrap();
        assert_eq!((c.state, c.revision), (CaseState::Passed, 1));
        assert!(matches!(
            record_verdict(&mut c, Verdict::Failed, vec![], 1, None),
            Err(Error::InvalidTransition(_))
        ));
        reopen(&mut c, 1).unwrap();
        record_verdict(&mut c, Verdict::Failed, vec![corr(), corr()], 2, Some("missed".into())).unwrap();
        assert_eq!((c.state, c.corrections.len(), c.revision), (CaseState::Failed, 2, 3));
    }

    #[test]
    fn stale_revision_conflicts() {
        let mut c = case();
        record_verdict(&mut c, Verdict::Failed, vec![corr()], 0, None).unwrap();
        let before = c.clone();
        assert!(matches!(
            record_verdict(&mut c, Verdict::Failed, vec![corr()], 0, None),
            Err(Error::RevisionConflict { expected: 0, current: 1 })
        ));
        assert_eq!(c, before);
    }

    #[test]
    fn corrections_only_from_failed() {
        let mut a = case();
        let mut b = case();
        b.id = "r0-c001".into();
        record_verdict(&mut a, Verdict::Failed, vec![corr()], 0, None).unwrap();
        record_verdict(&mut b, Verdict::Passed, vec![], 0, None).unwrap();
        let s = ReviewSession::new("run", vec![a, b]).unwrap();
        let labels = s.corrections_for_training();
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].detection.score(), 1.0);
        assert_eq!(s.stats(), ReviewStats { total: 2, pending: 0, passed: 1, failed: 1, corrections: 1 });
        assert!(ReviewSession::new("run", vec![case(), case()]).is_err());
    }
}
