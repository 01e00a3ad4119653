//! The data-engine loop: find label-space gaps, feed retrieved images,
//! update the detector on pseudo-labels, verify through scenario review,
//! and retrain on corrections. Every stage commits a snapshot and a
//! manifest record, so an interrupted run resumes where it stopped.

pub mod config;
pub mod manifest;
pub mod report;
pub mod server;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{Backend, EngineConfig, EngineSettings, ReviewerMode};
pub use manifest::{accepts, successor, IterationRecord, RunManifest, Stage, StageStatus};
pub use report::{Checkpoint, RunReport};
pub use store::{RunDir, Snapshot};

use crate::adapters::remote::{connect_all, RemoteAdapterConfig};
use crate::adapters::{AdapterSet, TrainableDetectorAdapter, UsageMeter};
use crate::detection::{greedy_match, CategoryId, Detection, ImageRecord};
use crate::error::{Error, Result};
use crate::evalcost::{eval_report, CostKind, CostLedger, EvalReport, Quantity};
use crate::feeder::{read_binary, write_binary};
use crate::feeder::{build_prompt, retrieve, EmbeddingStore, RetrievalResult};
use crate::finder::{issue_scan, IssueReport};
use crate::labels::{extend_label_space, CategoryStatus, DefaultNormalizer, LabelSpace};
use crate::updater::{
    assemble_training_set, classify_crops, known_pseudo_labels, propose_boxes, update_detector, PseudoLabel,
    TrainingSet,
};
use crate::verifier::{
    build_cases, generate_scenarios, record_verdict, scenario_diversity, CaseState, Correction, DiversityParams,
    ReviewSession, ScenarioDescription, Verdict, VerificationCase,
};
use crate::worldsim::{generate_world, sim_adapters, SimDetector, SimDetectorState, SimWorld, Split};
use store::{
    read_file, write_atomic, RunLock, LABELSPACE_FILE, LEDGER_FILE, REPORT_TSV, REPORT_TXT, STATE_FILE,
    TIMINGS_FILE, TRAININGSET_FILE, WORLDS_DIR,
};

/// Everything a stage reads or writes besides the ledger and training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    /// Number of Verify stages run so far.
    pub round: u32,
    pub label_space: LabelSpace,
    pub label_space_version: u32,
    pub detector: SimDetectorState,
    pub baseline_known: Option<f64>,
    pub issues: Option<IssueReport>,
    /// Novel categories accepted for feeding, in acceptance order.
    pub categories: Vec<String>,
    pub retrieval: BTreeMap<String, RetrievalResult>,
    pub novel_labels: Vec<PseudoLabel>,
    pub known_labels: Vec<PseudoLabel>,
    /// Human corrections from every round so far.
    pub corrections: Vec<PseudoLabel>,
    pub scenarios: Vec<ScenarioDescription>,
    pub diversity: BTreeMap<String, f64>,
    /// Split name -> sha256 of its embedding store under `worlds/`.
    pub stores: BTreeMap<String, String>,
    /// Reviewer that decided (or will decide) the current cases.
    pub reviewer: Option<ReviewerMode>,
    pub cases: Vec<VerificationCase>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Per-invocation knobs that are not part of the run's identity.
#[derive(Debug, Clone, Default)]
pub struct EngineOptions {
    /// Replace the human reviewer with auto-pass.
    pub headless: bool,
    /// Categories to feed instead of the issue finder's candidates.
    pub categories: Option<Vec<String>>,
    /// Adapter endpoint for this invocation (remote backend only).
    pub remote: Option<RemoteAdapterConfig>,
    /// Stop with [`Error::Interrupted`] after writing this stage's snapshot
    /// but before recording it, as a crash would.
    pub crash_before_commit: Option<Stage>,
}

struct Work {
    state: EngineState,
    ledger: CostLedger,
    training: Vec<u8>,
}

pub struct Engine {
    run: RunDir,
    manifest: RunManifest,
    state: EngineState,
    ledger: CostLedger,
    training: Vec<u8>,
    world: Arc<SimWorld>,
    adapters: AdapterSet,
    meter: Arc<UsageMeter>,
    options: EngineOptions,
    stores: Mutex<BTreeMap<String, (String, Arc<EmbeddingStore>)>>,
    _lock: RunLock,
}

fn snapshot_of(state: &EngineState, ledger: &CostLedger, training: &[u8]) -> Result<Snapshot> {
    let mut snap = Snapshot::default();
    let mut state_bytes = serde_json::to_vec_pretty(state)?;
    state_bytes.push(b'\n');
    snap.insert(STATE_FILE, state_bytes);
    let mut ledger_bytes = Vec::new();
    ledger.write_jsonl(&mut ledger_bytes)?;
    snap.insert(LEDGER_FILE, ledger_bytes);
    snap.insert(TRAININGSET_FILE, training.to_vec());
    snap.insert(LABELSPACE_FILE, (state.label_space.to_json()? + "\n").into_bytes());
    Ok(snap)
}

fn build_adapters(config: &EngineConfig, world: &Arc<SimWorld>, remote: Option<&RemoteAdapterConfig>) -> Result<(AdapterSet, Arc<UsageMeter>)> {
    let meter = Arc::new(UsageMeter::new());
    let set = match config.settings.backend {
        Backend::Sim => sim_adapters(world.clone(), meter.clone()),
        Backend::Remote => connect_all(remote.unwrap_or(&config.remote).clone(), meter.clone())?,
    };
    if set.embedder.dimension() != world.dimension() {
        return Err(Error::DimensionMismatch {
            expected: world.dimension(),
            actual: set.embedder.dimension(),
        });
    }
    Ok((set, meter))
}

/// Evaluation split with ground truth in `label_space` ids.
pub fn eval_records(world: &SimWorld, label_space: &LabelSpace) -> Result<Vec<ImageRecord>> {
    let ids = world.ids_in(Split::Eval);
    let mut gt = world.ground_truth_in(label_space, &ids)?;
    ids.iter()
        .map(|id| {
            let rec = world.image(id)?.record.clone();
            rec.with_ground_truth(gt.remove(id).unwrap_or_default())
        })
        .collect()
}

#[derive(Serialize)]
struct WorldFile<'a> {
    config: &'a crate::worldsim::SimWorldConfig,
    images: usize,
    sha256: String,
}

impl Engine {
    /// Resume the run named in `config`, or start it.
    pub fn open(store_root: &Path, config: EngineConfig, options: EngineOptions) -> Result<Engine> {
        config.validate()?;
        let run = RunDir::new(store_root, &config.settings.run_id);
        if run.exists() {
            let engine = Engine::resume(store_root, &config.settings.run_id, options)?;
            if engine.manifest.config != config {
                return Err(Error::Config(format!(
                    "run `{}` already exists with a different configuration",
                    config.settings.run_id
                )));
            }
            return Ok(engine);
        }
        Engine::create(run, config, options)
    }

    fn create(run: RunDir, config: EngineConfig, options: EngineOptions) -> Result<Engine> {
        let lock = run.lock()?;
        let world = Arc::new(generate_world(&config.world)?);
        let (adapters, meter) = build_adapters(&config, &world, options.remote.as_ref())?;

        let label_space = world.initial_label_space()?;
        let mut detector = SimDetector::new(world.clone(), label_space.len());
        let samples = detector.ground_truth_samples(&world.ids_in(Split::Pretrain), &label_space)?;
        detector.fit(&samples, &config.schedule)?;
        let baseline = eval_report(
            &detector,
            &eval_records(&world, &label_space)?,
            &label_space,
            None,
            config.settings.ap_mode,
        )?;
        let state = EngineState {
            round: 0,
            label_space,
            label_space_version: 1,
            detector: detector.state().clone(),
            baseline_known: baseline.known_average,
            issues: None,
            categories: Vec::new(),
            retrieval: BTreeMap::new(),
            novel_labels: Vec::new(),
            known_labels: Vec::new(),
            corrections: Vec::new(),
            scenarios: Vec::new(),
            diversity: BTreeMap::new(),
            stores: BTreeMap::new(),
            reviewer: None,
            cases: Vec::new(),
            checkpoints: vec![Checkpoint {
                label: "baseline".into(),
                training_cents: 0,
                labeling_cents: 0,
                eval: baseline,
            }],
        };
        let ledger = CostLedger::new(config.rates);
        let snap = snapshot_of(&state, &ledger, &[])?;
        run.write_snapshot(&RunDir::snapshot_dir(0, None), &snap)?;
        let world_file = WorldFile {
            config: &config.world,
            images: world.images.len(),
            sha256: manifest::sha256_hex(&serde_json::to_vec(world.as_ref())?),
        };
        write_atomic(
            &run.path(&format!("{WORLDS_DIR}/world.json")),
            &(serde_json::to_string_pretty(&world_file)? + "\n").into_bytes(),
        )?;
        let manifest = RunManifest::new(config, snap.digest())?;
        run.write_manifest(&manifest)?;
        tracing::info!(run = %manifest.run_id, "run created");
        let engine = Engine {
            run,
            manifest,
            state,
            ledger,
            training: Vec::new(),
            world,
            adapters,
            meter,
            options,
            stores: Mutex::new(BTreeMap::new()),
            _lock: lock,
        };
        engine.write_views()?;
        Ok(engine)
    }

    /// Rebuild the engine from the last committed snapshot of `run_id`.
    pub fn resume(store_root: &Path, run_id: &str, options: EngineOptions) -> Result<Engine> {
        let run = RunDir::new(store_root, run_id);
        if !run.exists() {
            return Err(Error::UnknownRun(run.root.display().to_string()));
        }
        let lock = run.lock()?;
        let manifest = run.read_manifest()?;
        manifest.verify()?;
        manifest
            .config
            .validate()
            .map_err(|e| Error::CorruptManifest(format!("stored config invalid: {e}")))?;

        let (state, snap) = load_committed(&run, &manifest)?;
        let ledger = CostLedger::read_jsonl(snap.get(LEDGER_FILE)?, manifest.config.rates)?;
        let training = snap.get(TRAININGSET_FILE)?.to_vec();

        let mut keep = vec![RunDir::snapshot_dir(0, None)];
        keep.extend(manifest.completed().map(|r| RunDir::snapshot_dir(r.index, Some(r.stage))));
        run.prune_snapshots(&keep)?;

        let world = Arc::new(generate_world(&manifest.config.world)?);
        let (adapters, meter) = build_adapters(&manifest.config, &world, options.remote.as_ref())?;
        let engine = Engine {
            run,
            manifest,
            state,
            ledger,
            training,
            world,
            adapters,
            meter,
            options,
            stores: Mutex::new(BTreeMap::new()),
            _lock: lock,
        };
        engine.write_views()?;
        Ok(engine)
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn world(&self) -> &Arc<SimWorld> {
        &self.world
    }

    pub fn run_dir(&self) -> &Path {
        &self.run.root
    }

    pub fn config(&self) -> &EngineConfig {
        &self.manifest.config
    }

    fn effective_reviewer(&self) -> ReviewerMode {
        match self.config().settings.reviewer {
            ReviewerMode::Human if self.options.headless => ReviewerMode::AutoPass,
            r => r,
        }
    }

    /// Current cases, including verdicts written by the review service.
    pub fn reviewed_cases(&self) -> Result<Vec<VerificationCase>> {
        overlay_reviews(&self.run, &self.state.cases)
    }

    /// The stage `run_iteration` would execute, or `None` once done.
    /// Errors while verification cases await review.
    pub fn next_stage(&self) -> Result<Option<Stage>> {
        let last = self.manifest.last_completed().map(|r| r.stage);
        if last != Some(Stage::Verify) {
            return Ok(successor(last, false));
        }
        let cases = self.reviewed_cases()?;
        let pending = cases.iter().filter(|c| c.state == CaseState::Pending).count();
        if pending > 0 {
            return Err(Error::NotRunnable(format!("{pending} verification case(s) await review")));
        }
        let wants_retrain = cases
            .iter()
            .any(|c| c.state == CaseState::Failed && !c.corrections.is_empty())
            && self.state.round < self.config().settings.max_rounds;
        Ok(successor(last, wants_retrain))
    }

    /// Execute the next stage and commit it.
    pub fn run_iteration(&mut self) -> Result<&IterationRecord> {
        let stage = self
            .next_stage()?
            .ok_or_else(|| Error::NotRunnable("run is done".into()))?;
        let started = Instant::now();
        let micros_before = self.meter.total_micros();
        let mut work = Work {
            state: self.state.clone(),
            ledger: self.ledger.clone(),
            training: self.training.clone(),
        };
        let outcome = self.execute(stage, &mut work);
        let adapter_micros = self.meter.total_micros() - micros_before;
        let index = self.manifest.iterations.len() as u32 + 1;
        let mut record = IterationRecord {
            index,
            stage,
            status: StageStatus::Completed,
            round: work.state.round,
            inputs_digest: self.manifest.head_digest().to_string(),
            outputs_digest: String::new(),
            adapter_micros,
            cost_entries_added: 0,
            error: None,
            record_digest: String::new(),
        };
        let mut manifest = self.manifest.clone();
        if let Err(e) = outcome {
            tracing::warn!(%stage, error = %e, "stage failed");
            record.status = StageStatus::Failed;
            record.round = self.state.round;
            record.error = Some(e.to_string());
            manifest.append(record)?;
            self.run.write_manifest(&manifest)?;
            self.manifest = manifest;
            return Err(e);
        }

        let snap = snapshot_of(&work.state, &work.ledger, &work.training)?;
        self.run.write_snapshot(&RunDir::snapshot_dir(index, Some(stage)), &snap)?;
        if self.options.crash_before_commit == Some(stage) {
            return Err(Error::Interrupted(format!("stopped before committing {stage}")));
        }
        record.outputs_digest = snap.digest();
        record.cost_entries_added = work.ledger.entries.len() - self.ledger.entries.len();
        manifest.label_space_version = work.state.label_space_version;
        manifest.append(record)?;
        self.run.write_manifest(&manifest)?;

        self.manifest = manifest;
        self.state = work.state;
        self.ledger = work.ledger;
        self.training = work.training;
        self.write_views()?;
        let timing = serde_json::json!({
            "index": index,
            "stage": stage,
            "wall_ms": started.elapsed().as_millis() as u64,
        });
        self.run.append_line(TIMINGS_FILE, &timing.to_string())?;
        tracing::info!(%stage, index, "stage committed");
        Ok(self.manifest.iterations.last().expect("just appended"))
    }

    /// Run stages until done, until `stop_after` commits, or until cases
    /// need review.
    pub fn run_until(&mut self, stop_after: Option<Stage>) -> Result<()> {
        loop {
            match self.next_stage() {
                Ok(None) => return Ok(()),
                Err(Error::NotRunnable(msg)) => {
                    tracing::info!("{msg}");
                    return Ok(());
                }
                Err(e) => return Err(e),
                Ok(Some(_)) => {}
            }
            let stage = self.run_iteration()?.stage;
            if stop_after == Some(stage) {
                return Ok(());
            }
        }
    }

    pub fn report(&self) -> RunReport {
        RunReport {
            run_id: self.manifest.run_id.clone(),
            checkpoints: self.state.checkpoints.clone(),
            total_cents: self.ledger.total().0,
        }
    }

    /// Refresh the top-level files from the committed state.
    fn write_views(&self) -> Result<()> {
        let snap = snapshot_of(&self.state, &self.ledger, &self.training)?;
        for name in [LABELSPACE_FILE, LEDGER_FILE, TRAININGSET_FILE] {
            write_atomic(&self.run.path(name), snap.get(name)?)?;
        }
        let report = self.report();
        write_atomic(&self.run.path(REPORT_TSV), report.to_tsv().as_bytes())?;
        write_atomic(&self.run.path(REPORT_TXT), report.to_pretty().as_bytes())?;
        self.sync_cases()
    }

    /// Make `cases/` hold exactly the current cases, keeping files that
    /// carry newer verdicts for the same case.
    fn sync_cases(&self) -> Result<()> {
        let dir = self.run.cases_dir();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let wanted: BTreeSet<String> = self.state.cases.iter().map(|c| format!("{}.json", c.id)).collect();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !wanted.contains(&name) {
                let p = entry.path();
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        for case in &self.state.cases {
            let path = dir.join(format!("{}.json", case.id));
            let keep = read_file(&path)
                .ok()
                .and_then(|b| serde_json::from_slice::<VerificationCase>(&b).ok())
                .is_some_and(|d| d.id == case.id && d.round == case.round && d.images == case.images && d.revision >= case.revision);
            if !keep {
                write_case(&dir, case)?;
            }
        }
        Ok(())
    }

    /// Image embeddings of `split`. Built through the embedder the first
    /// time a committed stage needs them, then read back from `worlds/`.
    fn store(&self, split: Split, w: &mut Work) -> Result<Arc<EmbeddingStore>> {
        let name = split_name(split);
        let mut cache = self.stores.lock().expect("store cache poisoned");
        if let Some(digest) = w.state.stores.get(name) {
            if let Some((d, s)) = cache.get(name) {
                if d == digest {
                    return Ok(s.clone());
                }
            }
            let path = self.run.path(&format!("{WORLDS_DIR}/{name}.store"));
            let bytes = read_file(&path)?;
            if &manifest::sha256_hex(&bytes) != digest {
                return Err(Error::CorruptManifest(format!("{} does not match its recorded digest", path.display())));
            }
            let store = Arc::new(read_binary(&bytes[..])?);
            cache.insert(name.to_string(), (digest.clone(), store.clone()));
            return Ok(store);
        }
        let ids = self.world.ids_in(split);
        let vectors = ids
            .par_iter()
            .map(|id| self.adapters.embedder.embed_image(id))
            .collect::<Result<Vec<_>>>()?;
        let mut store = EmbeddingStore::new(self.adapters.embedder.dimension());
        for (id, v) in ids.into_iter().zip(vectors) {
            store.insert(id, v)?;
        }
        let mut bytes = Vec::new();
        write_binary(&store, &mut bytes)?;
        write_atomic(&self.run.path(&format!("{WORLDS_DIR}/{name}.store")), &bytes)?;
        let digest = manifest::sha256_hex(&bytes);
        w.state.stores.insert(name.to_string(), digest.clone());
        let store = Arc::new(store);
        cache.insert(name.to_string(), (digest, store.clone()));
        Ok(store)
    }

    fn detector(&self, state: &EngineState) -> Result<SimDetector> {
        SimDetector::from_state(self.world.clone(), state.detector.clone())
    }

    fn normalizer(&self) -> DefaultNormalizer {
        DefaultNormalizer::new(self.world.aliases().clone())
    }

    fn execute(&self, stage: Stage, w: &mut Work) -> Result<()> {
        match stage {
            Stage::FindIssue => self.find_issue(w),
            Stage::Feed => self.feed(w),
            Stage::Update => self.update(w),
            Stage::Verify => self.verify(w),
            Stage::Retrain => {
                self.charge_review(w)?;
                self.retrain(w)
            }
            Stage::Done => self.charge_review(w),
        }
    }

    fn find_issue(&self, w: &mut Work) -> Result<()> {
        let settings = &self.config().settings;
        let detector = self.detector(&w.state)?;
        let ids: Vec<String> = self.world.ids_in(Split::Pool).into_iter().take(settings.scan_images).collect();
        let mut vocabulary = self.world.category_names();
        vocabulary.extend(self.world.config.distractors.iter().cloned());
        vocabulary.extend(settings.extra_vocabulary.iter().cloned());
        let mut seen = BTreeSet::new();
        vocabulary.retain(|v| seen.insert(v.clone()));
        let report = issue_scan(
            &ids,
            self.adapters.captioner.as_ref(),
            &detector,
            &w.state.label_space,
            &vocabulary,
            settings.issue_trigger,
            &self.normalizer(),
        )?;
        w.state.issues = Some(report);
        Ok(())
    }

    fn feed(&self, w: &mut Work) -> Result<()> {
        let categories = match &self.options.categories {
            Some(c) => c.clone(),
            None => w
                .state
                .issues
                .as_ref()
                .map(|r| r.novel().map(|c| c.name.clone()).collect())
                .unwrap_or_default(),
        };
        if categories.is_empty() {
            return Err(Error::InvalidData("no novel category to feed; name one explicitly".into()));
        }
        let store = self.store(Split::Pool, w)?;
        let mut ls = w.state.label_space.clone();
        for category in &categories {
            ls = extend_label_space(&ls, category, self.world.aliases())?;
            w.state.label_space_version += 1;
            let prompt = build_prompt(category)?;
            let query = self.adapters.embedder.embed_text(&prompt)?;
            let result = retrieve(&store, &query, &prompt, &self.config().thresholds)?;
            w.state.retrieval.insert(category.clone(), result);
        }
        w.state.label_space = ls;
        w.state.categories = categories;
        Ok(())
    }

    fn target_ids(&self, state: &EngineState) -> Result<BTreeSet<CategoryId>> {
        state
            .categories
            .iter()
            .map(|c| {
                state
                    .label_space
                    .resolve(c, self.world.aliases())
                    .ok_or_else(|| Error::UnknownCategory(c.clone()))
            })
            .collect()
    }

    fn checkpoint(&self, w: &mut Work, label: String, detector: &SimDetector) -> Result<()> {
        let ls = &w.state.label_space;
        let eval: EvalReport = eval_report(
            detector,
            &eval_records(&self.world, ls)?,
            ls,
            w.state.baseline_known,
            self.config().settings.ap_mode,
        )?;
        w.state.checkpoints.push(Checkpoint {
            label,
            training_cents: w.ledger.training_total().0,
            labeling_cents: w.ledger.labeling_total().0,
            eval,
        });
        Ok(())
    }

    fn train(&self, w: &mut Work, mut detector: SimDetector, set: TrainingSet, stage: Stage) -> Result<SimDetector> {
        let outcome = update_detector(&mut detector, &set, &self.config().schedule)?;
        if outcome.gpu_seconds > 0 {
            w.ledger
                .charge(CostKind::GpuHour, Quantity::ratio(outcome.gpu_seconds as i128, 3600), stage.tag())?;
        }
        let mut bytes = Vec::new();
        set.write_jsonl(&mut bytes)?;
        w.training = bytes;
        w.state.detector = detector.state().clone();
        Ok(detector)
    }

    fn update(&self, w: &mut Work) -> Result<()> {
        let cfg = self.config();
        let ls = w.state.label_space.clone();
        let targets = self.target_ids(&w.state)?;
        let mut detector = self.detector(&w.state)?;
        detector.extend_categories(ls.len());

        let mut seen = BTreeSet::new();
        let images: Vec<String> = w
            .state
            .categories
            .iter()
            .flat_map(|c| w.state.retrieval[c].ids())
            .filter(|id| seen.insert(id.to_string()))
            .map(str::to_string)
            .collect();
        let prompts = ls.names();
        let per_image = images
            .par_iter()
            .map(|id| -> Result<(Vec<PseudoLabel>, Vec<PseudoLabel>)> {
                let record = self.world.image(id)?.record.clone();
                let proposals = propose_boxes(self.adapters.proposer.as_ref(), &record, &prompts)?;
                let novel: Vec<PseudoLabel> =
                    classify_crops(self.adapters.classifier.as_ref(), &record, &proposals, &ls, &cfg.thresholds)?
                        .into_iter()
                        .filter(|l| targets.contains(&l.detection.category))
                        .collect();
                let known = if cfg.settings.mix_known {
                    known_pseudo_labels(&detector, &record, &ls, &cfg.thresholds)?
                } else {
                    Vec::new()
                };
                Ok((novel, known))
            })
            .collect::<Result<Vec<_>>>()?;
        let (novel, known): (Vec<_>, Vec<_>) = per_image.into_iter().unzip();
        w.state.novel_labels = novel.into_iter().flatten().collect();
        w.state.known_labels = known.into_iter().flatten().collect();

        let set = assemble_training_set(&w.state.novel_labels, &w.state.known_labels, &[], &cfg.balance)?;
        let detector = self.train(w, detector, set, Stage::Update)?;
        self.checkpoint(w, "update".into(), &detector)
    }

    fn verify(&self, w: &mut Work) -> Result<()> {
        let cfg = self.config();
        w.state.round += 1;
        let round = w.state.round;
        let store = self.store(Split::Eval, w)?;
        if w.state.scenarios.is_empty() {
            w.ledger.note_llm(Stage::Verify.tag())?;
            let normalizer = self.normalizer();
            for category in &w.state.categories {
                let batch = generate_scenarios(
                    self.adapters.scenarios.as_ref(),
                    category,
                    cfg.settings.scenarios_per_category,
                    &normalizer,
                )?;
                if batch.short {
                    tracing::warn!(%category, got = batch.descriptions.len(), "fewer distinct scenarios than requested");
                }
                let texts: Vec<&str> = batch.descriptions.iter().map(|d| d.text.as_str()).collect();
                if !texts.is_empty() {
                    let params = DiversityParams {
                        seed: self.world.seed(),
                        ..cfg.diversity
                    };
                    let d = scenario_diversity(&texts, &store, self.adapters.embedder.as_ref(), &params)?;
                    w.state.diversity.insert(category.clone(), d);
                }
                w.state.scenarios.extend(batch.descriptions);
            }
        }
        let detector = self.detector(&w.state)?;
        let mut cases = build_cases(
            &w.state.scenarios,
            &store,
            self.adapters.embedder.as_ref(),
            &detector,
            &w.state.label_space,
            cfg.settings.case_images,
            round,
        )?;
        let reviewer = self.effective_reviewer();
        for case in &mut cases {
            match reviewer {
                ReviewerMode::Human => {}
                ReviewerMode::AutoPass => {
                    record_verdict(case, Verdict::Passed, Vec::new(), case.revision, Some("auto-pass".into()))?
                }
                ReviewerMode::Oracle => self.oracle_review(case, &w.state.label_space)?,
            }
        }
        w.state.reviewer = Some(reviewer);
        w.state.cases = cases;
        Ok(())
    }

    /// Simulated reviewer: fails a case when a novel object is missed or a
    /// confident novel prediction matches nothing; corrections are the
    /// missed boxes.
    fn oracle_review(&self, case: &mut VerificationCase, ls: &LabelSpace) -> Result<()> {
        let novel: BTreeSet<CategoryId> = ls.ids_with_status(CategoryStatus::Novel).into_iter().collect();
        let threshold = self.config().thresholds.iou_match;
        let fp_score = self.config().settings.oracle_false_positive_score;
        let gt = self.world.ground_truth_in(ls, &case.images)?;
        let mut failed = false;
        let mut corrections = Vec::new();
        for id in &case.images {
            let gts: Vec<Detection> = gt[id].iter().filter(|d| novel.contains(&d.category)).copied().collect();
            let preds: Vec<Detection> = case.predictions[id]
                .iter()
                .filter(|d| novel.contains(&d.category))
                .copied()
                .collect();
            let matching = greedy_match(&preds, &gts, threshold);
            let matched: BTreeSet<usize> = matching.iter().filter_map(|(_, g)| *g).collect();
            if matching.iter().any(|(p, g)| g.is_none() && preds[*p].score() >= fp_score) {
                failed = true;
            }
            for (_, d) in gts.iter().enumerate().filter(|(g, _)| !matched.contains(g)) {
                failed = true;
                corrections.push(Correction {
                    image_id: id.clone(),
                    bbox: d.bbox,
                    category: d.category,
                });
            }
        }
        let verdict = if failed { Verdict::Failed } else { Verdict::Passed };
        record_verdict(case, verdict, corrections, case.revision, Some("oracle".into()))
    }

    /// Bill the inspection and box drawing of the last review round.
    fn charge_review(&self, w: &mut Work) -> Result<()> {
        w.state.cases = self.reviewed_cases()?;
        if matches!(w.state.reviewer, None | Some(ReviewerMode::AutoPass)) {
            return Ok(());
        }
        let decided: Vec<&VerificationCase> = w.state.cases.iter().filter(|c| c.state != CaseState::Pending).collect();
        let images: usize = decided.iter().map(|c| c.images.len()).sum();
        let boxes: usize = decided.iter().map(|c| c.corrections.len()).sum();
        if images > 0 {
            w.ledger
                .charge(CostKind::ImageInspection, Quantity::integer(images as i128), Stage::Verify.tag())?;
        }
        if boxes > 0 {
            w.ledger
                .charge(CostKind::BoxLabel, Quantity::integer(boxes as i128), Stage::Verify.tag())?;
        }
        Ok(())
    }

    fn retrain(&self, w: &mut Work) -> Result<()> {
        let session = ReviewSession::new(self.manifest.run_id.clone(), w.state.cases.clone())?;
        w.state.corrections.extend(session.corrections_for_training());
        let set = assemble_training_set(
            &w.state.novel_labels,
            &w.state.known_labels,
            &w.state.corrections,
            &self.config().balance,
        )?;
        let detector = self.detector(&w.state)?;
        let detector = self.train(w, detector, set, Stage::Retrain)?;
        let label = format!("retrain-{}", w.state.round);
        self.checkpoint(w, label, &detector)
    }
}

/// State and files of the last committed stage, digest-checked.
pub(crate) fn load_committed(run: &RunDir, manifest: &RunManifest) -> Result<(EngineState, Snapshot)> {
    let (rel, expected) = match manifest.last_completed() {
        Some(r) => (RunDir::snapshot_dir(r.index, Some(r.stage)), r.outputs_digest.clone()),
        None => (RunDir::snapshot_dir(0, None), manifest.genesis_digest.clone()),
    };
    let snap = run.read_snapshot(&rel)?;
    if snap.digest() != expected {
        return Err(Error::CorruptManifest(format!("{rel} does not match its recorded digest")));
    }
    let state: EngineState = serde_json::from_slice(snap.get(STATE_FILE)?)
        .map_err(|e| Error::CorruptManifest(format!("{rel}/{STATE_FILE}: {e}")))?;
    Ok((state, snap))
}

/// `cases` with verdicts stored under `cases/` applied.
pub(crate) fn overlay_reviews(run: &RunDir, cases: &[VerificationCase]) -> Result<Vec<VerificationCase>> {
    cases
        .iter()
        .map(|c| {
            let path = run.cases_dir().join(format!("{}.json", c.id));
            if !path.is_file() {
                return Ok(c.clone());
            }
            let on_disk: VerificationCase = serde_json::from_slice(&read_file(&path)?)?;
            if on_disk.id != c.id || on_disk.round != c.round || on_disk.images != c.images {
                return Err(Error::InvalidData(format!("{} does not belong to the current round", path.display())));
            }
            Ok(on_disk)
        })
        .collect()
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Eval => "eval",
        Split::Pretrain => "pretrain",
        Split::Pool => "pool",
    }
}

pub(crate) fn write_case(dir: &Path, case: &VerificationCase) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(case)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(format!("{}.json", case.id)), &bytes)
}

/// Root directory for runs: `AIDE_RUN_ROOT`, else the working directory.
pub fn default_store_root() -> PathBuf {
    std::env::var_os("AIDE_RUN_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}
