//! Directional experiments on the simulated world.
//!
//! One call to [`run_seed`] pretrains a detector, scans for the missing
//! category, retrieves and pseudo-labels it, and trains two copies (with and
//! without known-category mixing). The returned numbers back the acceptance
//! suite and the benches.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, TrainableDetectorAdapter, UsageMeter};
use crate::detection::{CategoryId, Detection};
use crate::engine::eval_records;
use crate::error::{Error, Result};
use crate::evalcost::{eval_report, ApMode};
use crate::feeder::{build_prompt, image_similarity_search, retrieval_precision, retrieve};
use crate::finder::issue_scan;
use crate::labels::{extend_label_space, CategoryStatus, DefaultNormalizer, LabelSpace};
use crate::thresholds::EngineThresholds;
use crate::updater::{
    assemble_training_set, classify_crops, known_pseudo_labels, propose_boxes, pseudo_label_precision, BalancePolicy,
    LabelOrigin, PseudoLabel,
};
use crate::worldsim::{generate_world, reference_schedule, sim_adapters, SimDetector, SimWorld, SimWorldConfig, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentParams {
    /// Novel-bearing pool images handed to the issue finder.
    pub scan_images: usize,
    pub trigger: usize,
    pub thresholds: EngineThresholds,
    pub mode: ApMode,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            scan_images: 50,
            trigger: 3,
            thresholds: EngineThresholds::default(),
            mode: ApMode::Ap50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub novel: String,
    /// Names the issue finder reported as novel.
    pub reported: Vec<String>,
    /// Reported names that are not novel world categories.
    pub false_reports: Vec<String>,
    pub retrieval_precision: f64,
    pub similarity_precision: f64,
    pub base_rate: f64,
    pub retrieved: usize,
    pub precision_raw: f64,
    pub precision_feeder: f64,
    pub precision_zsc: f64,
    pub baseline_known: f64,
    pub mixed_known: f64,
    pub mixed_novel: Option<f64>,
    pub mixed_forgetting: f64,
    pub unmixed_known: f64,
    pub unmixed_novel: Option<f64>,
    pub unmixed_forgetting: f64,
}

impl SeedOutcome {
    pub fn mixing_helps(&self, margin: f64) -> bool {
        self.mixed_known >= self.unmixed_known + margin && self.mixed_forgetting.abs() < self.unmixed_forgetting.abs()
    }

    pub fn precision_increases(&self) -> bool {
        self.precision_raw < self.precision_feeder && self.precision_feeder < self.precision_zsc
    }
}

fn missing(what: &str) -> Error {
    Error::InvalidData(format!("experiment produced no {what}"))
}

/// Proposals whose raw proposer label is `name`, kept without any filtering.
fn raw_labels(
    adapters: &AdapterSet,
    ids: &[String],
    prompts: &[String],
    name: &str,
    category: CategoryId,
) -> Result<Vec<PseudoLabel>> {
    let per_image: Vec<Vec<PseudoLabel>> = ids
        .par_iter()
        .map(|id| -> Result<_> {
            let mut out = Vec::new();
            for p in adapters.proposer.propose(id, prompts)? {
                if p.label == name {
                    out.push(PseudoLabel {
                        image_id: id.clone(),
                        detection: Detection::new(p.bbox, category, p.score)?,
                        origin: LabelOrigin::ProposalZsc,
                        proposal_score: p.score,
                        zsc_score: None,
                        raw_label: Some(p.label),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

fn pretrained(world: &Arc<SimWorld>, ls: &LabelSpace) -> Result<SimDetector> {
    let mut det = SimDetector::new(world.clone(), ls.len());
    let samples = det.ground_truth_samples(&world.ids_in(Split::Pretrain), ls)?;
    det.fit(&samples, &reference_schedule())?;
    Ok(det)
}

/// Run the full directional experiment for one world configuration. The
/// first novel category of the world is the target.
pub fn run_world(config: &SimWorldConfig, params: &ExperimentParams) -> Result<SeedOutcome> {
    let world = Arc::new(generate_world(config)?);
    let adapters = sim_adapters(world.clone(), Arc::new(UsageMeter::new()));
    let t = &params.thresholds;
    let ls = world.initial_label_space()?;
    let mut det = pretrained(&world, &ls)?;
    let baseline = eval_report(&det, &eval_records(&world, &ls)?, &ls, None, params.mode)?;
    let baseline_known = baseline.known_average.ok_or_else(|| missing("baseline known AP"))?;

    let novel = config.novel_categories.first().ok_or_else(|| missing("novel category"))?.clone();
    let novel_idx = world.category_index(&novel).ok_or_else(|| missing("novel index"))?;
    let contains = |id: &str| world.image(id).map(|im| im.contains(novel_idx)).unwrap_or(false);

    let pool = world.ids_in(Split::Pool);
    let bearing: Vec<String> = pool.iter().filter(|id| contains(id)).take(params.scan_images).cloned().collect();
    let mut vocabulary = world.category_names();
    vocabulary.extend(config.distractors.iter().cloned());
    let normalizer = DefaultNormalizer::new(world.aliases().clone());
    let issues = issue_scan(&bearing, adapters.captioner.as_ref(), &det, &ls, &vocabulary, params.trigger, &normalizer)?;
    let reported: Vec<String> = issues.novel().map(|c| c.name.clone()).collect();
    let false_reports = reported
        .iter()
        .filter(|n| !config.novel_categories.contains(n))
        .cloned()
        .collect();

    let store = world.embedding_store(Split::Pool)?;
    let prompt = build_prompt(&novel)?;
    let query = adapters.embedder.embed_text(&prompt)?;
    let retrieved = retrieve(&store, &query, &prompt, t)?;
    let retrieval = retrieval_precision(&retrieved, contains).ok_or_else(|| missing("retrieval"))?;
    let anchor = bearing.first().ok_or_else(|| missing("novel-bearing image"))?;
    let similar = image_similarity_search(&store, anchor, retrieved.len())?;
    let similarity = retrieval_precision(&similar, contains).ok_or_else(|| missing("similarity retrieval"))?;

    let ls2 = extend_label_space(&ls, &novel, world.aliases())?;
    let novel_id = ls2.resolve(&novel, world.aliases()).ok_or_else(|| missing("novel id"))?;
    let prompts = ls2.names();
    let gt_pool = world.ground_truth_in(&ls2, &pool)?;
    let retrieved_ids: Vec<String> = retrieved.ids().iter().map(|s| s.to_string()).collect();
    let precision_raw = pseudo_label_precision(&raw_labels(&adapters, &pool, &prompts, &novel, novel_id)?, &gt_pool, t.iou_match)
        .get(novel_id)?;
    let precision_feeder =
        pseudo_label_precision(&raw_labels(&adapters, &retrieved_ids, &prompts, &novel, novel_id)?, &gt_pool, t.iou_match)
            .get(novel_id)?;

    det.extend_categories(ls2.len());
    let per_image: Vec<(Vec<PseudoLabel>, Vec<PseudoLabel>)> = retrieved_ids
        .par_iter()
        .map(|id| -> Result<_> {
            let rec = &world.image(id)?.record;
            let props = propose_boxes(adapters.proposer.as_ref(), rec, &prompts)?;
            let novel_labels = classify_crops(adapters.classifier.as_ref(), rec, &props, &ls2, t)?
                .into_iter()
                .filter(|l| ls2.status(l.detection.category) == Some(CategoryStatus::Novel))
                .collect();
            Ok((novel_labels, known_pseudo_labels(&det, rec, &ls2, t)?))
        })
        .collect::<Result<_>>()?;
    let (novel_labels, known_labels): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
    let novel_labels: Vec<PseudoLabel> = novel_labels.into_iter().flatten().collect();
    let known_labels: Vec<PseudoLabel> = known_labels.into_iter().flatten().collect();
    let precision_zsc = pseudo_label_precision(&novel_labels, &gt_pool, t.iou_match).get(novel_id)?;

    let records = eval_records(&world, &ls2)?;
    let policy = BalancePolicy::default();
    let train_and_eval = |known: &[PseudoLabel]| -> Result<(f64, Option<f64>, f64)> {
        let mut copy = SimDetector::from_state(world.clone(), det.state().clone())?;
        let set = assemble_training_set(&novel_labels, known, &[], &policy)?;
        copy.train(&set, &reference_schedule())?;
        let r = eval_report(&copy, &records, &ls2, Some(baseline_known), params.mode)?;
        Ok((
            r.known_average.ok_or_else(|| missing("known AP"))?,
            r.novel_average,
            r.forgetting.ok_or_else(|| missing("forgetting"))?,
        ))
    };
    let (mixed_known, mixed_novel, mixed_forgetting) = train_and_eval(&known_labels)?;
    let (unmixed_known, unmixed_novel, unmixed_forgetting) = train_and_eval(&[])?;

    Ok(SeedOutcome {
        seed: config.seed,
        novel,
        reported,
        false_reports,
        retrieval_precision: retrieval,
        similarity_precision: similarity,
        base_rate: world.base_rate(Split::Pool, novel_idx),
        retrieved: retrieved.len(),
        precision_raw,
        precision_feeder,
        precision_zsc,
        baseline_known,
        mixed_known,
        mixed_novel,
        mixed_forgetting,
        unmixed_known,
        unmixed_novel,
        unmixed_forgetting,
    })
}

/// [`run_world`] on the reference configuration.
pub fn run_seed(seed: u64) -> Result<SeedOutcome> {
    run_world(&SimWorldConfig::reference(seed), &ExperimentParams::default())
}
