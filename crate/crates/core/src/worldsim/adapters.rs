//! Simulated captioner, embedder, proposer, crop classifier and scenario
//! generator. Each call charges a fixed simulated latency to the meter so
//! cost accounting stays reproducible.

use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use sha2::{Digest, Sha256};

use super::{add_scaled, dot, gaussian, jitter, normalize, stream, SimWorld};
use crate::adapters::{
    AdapterKind, AdapterSet, CaptionerAdapter, CropClassifierAdapter, EmbedderAdapter, ProposerAdapter,
    RawProposal, ScenarioGeneratorAdapter, UsageMeter,
};
use crate::error::{Error, Result};
use crate::feeder::EmbeddingVector;
use crate::geometry::BoundingBox;

pub const SCENARIO_WEATHER: [&str; 5] = ["clear weather", "heavy rain", "fog", "snow", "strong glare"];
pub const SCENARIO_TIMES: [&str; 4] = ["at dawn", "at noon", "at dusk", "at night"];
/// Phrases placing the category relative to a known object.
pub const SCENARIO_SURROUNDINGS: [&str; 3] = ["next to a", "behind a", "approaching a"];

const CAPTION_MICROS: u64 = 1_200;
const EMBED_MICROS: u64 = 300;
const PROPOSE_MICROS: u64 = 2_500;
const CLASSIFY_MICROS: u64 = 400;
const SCENARIO_MICROS: u64 = 800;

fn charge(meter: &UsageMeter, kind: AdapterKind, micros: u64, bytes: usize) {
    meter.record(kind, Duration::from_micros(micros), bytes);
}

fn key(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub struct SimCaptioner {
    pub world: Arc<SimWorld>,
    pub meter: Arc<UsageMeter>,
}

impl SimCaptioner {
    /// Caption listing each present category with probability `p_cap`,
    /// plus one absent name with probability `q_cap`.
    pub fn caption(&self, image_id: &str) -> Result<String> {
        let w = &self.world;
        let idx = w.image_index(image_id)?;
        let img = &w.images[idx];
        let mut rng = stream(w.seed(), "caption", idx as u64);
        let mut present: Vec<usize> = Vec::new();
        for o in &img.objects {
            if !present.contains(&o.category) {
                present.push(o.category);
            }
        }
        let mut names: Vec<String> = Vec::new();
        for &c in &present {
            if rng.random::<f64>() < w.config.p_cap {
                names.push(w.category_name(c).to_string());
            }
        }
        let absent: Vec<String> = w
            .category_names()
            .into_iter()
            .enumerate()
            .filter(|(c, _)| !present.contains(c))
            .map(|(_, n)| n)
            .chain(w.config.distractors.iter().cloned())
            .collect();
        let hallucinate = rng.random::<f64>() < w.config.q_cap;
        let pick = rng.random::<u64>();
        if hallucinate && !absent.is_empty() {
            names.push(absent[(pick % absent.len() as u64) as usize].clone());
        }
        Ok(if names.is_empty() {
            "An image with nothing".to_string()
        } else {
            format!("An image with {}", names.join(", "))
        })
    }
}

impl CaptionerAdapter for SimCaptioner {
    fn describe(&self, image_id: &str) -> Result<String> {
        let c = self.caption(image_id)?;
        charge(&self.meter, AdapterKind::Captioner, CAPTION_MICROS, image_id.len());
        Ok(c)
    }
}

pub struct SimEmbedder {
    pub world: Arc<SimWorld>,
    pub meter: Arc<UsageMeter>,
}

impl EmbedderAdapter for SimEmbedder {
    fn dimension(&self) -> usize {
        self.world.dimension()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        charge(&self.meter, AdapterKind::Embedder, EMBED_MICROS, text.len());
        self.world.embed_text(text)
    }

    fn embed_image(&self, image_id: &str) -> Result<EmbeddingVector> {
        charge(&self.meter, AdapterKind::Embedder, EMBED_MICROS, image_id.len());
        self.world.embed_image(image_id)
    }
}

pub struct SimProposer {
    pub world: Arc<SimWorld>,
    pub meter: Arc<UsageMeter>,
}

impl SimProposer {
    pub fn proposals(&self, image_id: &str, prompts: &[String]) -> Result<Vec<RawProposal>> {
        let w = &self.world;
        let cfg = &w.config;
        let idx = w.image_index(image_id)?;
        let img = &w.images[idx];
        if prompts.is_empty() {
            return Ok(Vec::new());
        }
        let vectors: Vec<Vec<f64>> = prompts.iter().map(|p| w.name_vector(p)).collect();
        let nearest = |f: &[f64]| -> usize {
            (0..vectors.len())
                .map(|i| (i, dot(f, &vectors[i])))
                .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc })
                .0
        };
        let score = |f: &[f64], label: usize| dot(f, &vectors[label]).clamp(0.0, 1.0);
        let (iw, ih) = (img.record.width as f64, img.record.height as f64);
        let d = w.dimension();
        let mut rng = stream(w.seed(), "propose", idx as u64);
        let mut out = Vec::new();
        for o in &img.objects {
            let emit = rng.random::<f64>() < cfg.p_box;
            let noise = gaussian(&mut rng, 4, 1.0);
            let mut f = o.feature.clone();
            add_scaled(&mut f, &gaussian(&mut rng, d, cfg.sigma_within), 1.0);
            let f = normalize(f);
            let mislabel = rng.random::<f64>() < cfg.proposal_label_noise;
            let random_label = rng.random_range(0..prompts.len());
            if !emit {
                continue;
            }
            let label = if mislabel { random_label } else { nearest(&f) };
            out.push(RawProposal {
                bbox: jitter(&o.bbox, &noise, cfg.sigma_jitter, iw, ih),
                label: prompts[label].clone(),
                score: score(&f, label),
            });
        }
        let lambda = cfg.q_fp * img.objects.len() as f64;
        let false_boxes = if lambda > 0.0 {
            Poisson::new(lambda).map(|p| p.sample(&mut rng) as usize).unwrap_or(0)
        } else {
            0
        };
        for _ in 0..false_boxes {
            let bw = rng.random_range(cfg.box_min..=cfg.box_max);
            let bh = rng.random_range(cfg.box_min..=cfg.box_max);
            let x = rng.random_range(0.0..=(iw - bw));
            let y = rng.random_range(0.0..=(ih - bh));
            let mut f = w.background.clone();
            add_scaled(&mut f, &gaussian(&mut rng, d, cfg.sigma_within), 1.0);
            let f = normalize(f);
            let label = nearest(&f);
            out.push(RawProposal {
                bbox: BoundingBox::new(x, y, x + bw, y + bh)?,
                label: prompts[label].clone(),
                score: score(&f, label),
            });
        }
        Ok(out)
    }
}

impl ProposerAdapter for SimProposer {
    fn propose(&self, image_id: &str, prompts: &[String]) -> Result<Vec<RawProposal>> {
        let p = self.proposals(image_id, prompts)?;
        charge(&self.meter, AdapterKind::Proposer, PROPOSE_MICROS, image_id.len());
        Ok(p)
    }
}

pub struct SimClassifier {
    pub world: Arc<SimWorld>,
    pub meter: Arc<UsageMeter>,
}

impl SimClassifier {
    /// Softmax over scaled cosines between the noised feature under `bbox`
    /// and each label's direction. Noise grows as the overlap shrinks.
    pub fn scores(&self, image_id: &str, bbox: &BoundingBox, labels: &[String]) -> Result<Vec<f64>> {
        let w = &self.world;
        let idx = w.image_index(image_id)?;
        let img = &w.images[idx];
        let (mut f, overlap) = w.feature_under(img, bbox);
        let k = key(&[idx as u64, bbox.x_min().to_bits(), bbox.y_min().to_bits(), bbox.x_max().to_bits(), bbox.y_max().to_bits()]);
        let mut rng = stream(w.seed(), "zsc", k);
        let sigma = w.config.sigma_zsc * (1.0 - overlap);
        add_scaled(&mut f, &gaussian(&mut rng, w.dimension(), sigma), 1.0);
        let f = normalize(f);
        let logits: Vec<f64> = labels
            .iter()
            .map(|l| w.config.zsc_logit_scale * dot(&f, &w.name_vector(l)))
            .collect();
        Ok(softmax(&logits))
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl CropClassifierAdapter for SimClassifier {
    fn classify(&self, image_id: &str, bbox: &BoundingBox, labels: &[String]) -> Result<Vec<f64>> {
        let s = self.scores(image_id, bbox, labels)?;
        charge(&self.meter, AdapterKind::CropClassifier, CLASSIFY_MICROS, image_id.len());
        Ok(s)
    }
}

/// Fills a fixed sentence template from a seeded weather x time x
/// surroundings grid; distinct grid cells give distinct sentences.
pub struct SimScenarioGenerator {
    pub world: Arc<SimWorld>,
    pub meter: Arc<UsageMeter>,
}

impl SimScenarioGenerator {
    pub fn grid(&self, category: &str) -> Vec<String> {
        let mut surroundings: Vec<String> = self
            .world
            .config
            .known_categories
            .iter()
            .enumerate()
            .map(|(i, k)| format!("{} {k}", SCENARIO_SURROUNDINGS[i % SCENARIO_SURROUNDINGS.len()]))
            .collect();
        surroundings.push("on an empty road".into());
        let mut out = Vec::new();
        for s in &surroundings {
            for t in SCENARIO_TIMES {
                for wth in SCENARIO_WEATHER {
                    out.push(format!("A {category} {s} {t} in {wth}."));
                }
            }
        }
        out
    }
}

impl ScenarioGeneratorAdapter for SimScenarioGenerator {
    fn generate(&self, category: &str, n: usize) -> Result<Vec<String>> {
        if n == 0 {
            return Err(Error::InvalidCount("scenario count must be >= 1".into()));
        }
        let mut grid = self.grid(category);
        let k = key(&[category.len() as u64, u64::from_le_bytes(Sha256::digest(category.as_bytes())[..8].try_into().unwrap())]);
        grid.shuffle(&mut stream(self.world.seed(), "scenarios", k));
        grid.truncate(n);
        charge(&self.meter, AdapterKind::ScenarioGenerator, SCENARIO_MICROS, category.len());
        Ok(grid)
    }
}

pub fn sim_adapters(world: Arc<SimWorld>, meter: Arc<UsageMeter>) -> AdapterSet {
    AdapterSet {
        captioner: Box::new(SimCaptioner { world: world.clone(), meter: meter.clone() }),
        embedder: Box::new(SimEmbedder { world: world.clone(), meter: meter.clone() }),
        proposer: Box::new(SimProposer { world: world.clone(), meter: meter.clone() }),
        classifier: Box::new(SimClassifier { world: world.clone(), meter: meter.clone() }),
        scenarios: Box::new(SimScenarioGenerator { world, meter }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::iou;
    use crate::worldsim::{generate_world, SimWorldConfig};

    fn world(cfg: SimWorldConfig) -> Arc<SimWorld> {
        Arc::new(generate_world(&SimWorldConfig { images: 60, ..cfg }).unwrap())
    }

    fn meter() -> Arc<UsageMeter> {
        Arc::new(UsageMeter::new())
    }

    fn names(w: &SimWorld) -> Vec<String> {
        w.category_names()
    }

    #[test]
    fn caption_perfect_recall_lists_present() {
        let w = world(SimWorldConfig { p_cap: 1.0, q_cap: 0.0, ..Default::default() });
        let cap = SimCaptioner { world: w.clone(), meter: meter() };
        for img in &w.images {
            let text = cap.describe(&img.record.id).unwrap();
            let mut expected: Vec<&str> = Vec::new();
            for o in &img.objects {
                let n = w.category_name(o.category);
                if !expected.contains(&n) {
                    expected.push(n);
                }
            }
            assert_eq!(text, format!("An image with {}", expected.join(", ")));
        }
    }

    #[test]
    fn caption_always_hallucinates_one() {
        let w = world(SimWorldConfig { p_cap: 1.0, q_cap: 1.0, ..Default::default() });
        let cap = SimCaptioner { world: w.clone(), meter: meter() };
        for img in &w.images {
            let text = cap.describe(&img.record.id).unwrap();
            let listed = text.trim_start_matches("An image with ").split(", ").count();
            let distinct = img
                .objects
                .iter()
                .map(|o| o.category)
                .collect::<std::collections::BTreeSet<_>>()
                .len();
            assert_eq!(listed, distinct + 1);
        }
    }

    #[test]
    fn caption_empty_image() {
        let w = world(SimWorldConfig { objects_min: 0, objects_max: 0, q_cap: 0.0, ..Default::default() });
        let cap = SimCaptioner { world: w.clone(), meter: meter() };
        assert_eq!(cap.describe("img-00000").unwrap(), "An image with nothing");
        assert!(matches!(cap.describe("nope"), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn proposer_exact_and_empty() {
        let w = world(SimWorldConfig { p_box: 1.0, sigma_jitter: 0.0, q_fp: 0.0, ..Default::default() });
        let p = SimProposer { world: w.clone(), meter: meter() };
        for img in &w.images {
            let got = p.propose(&img.record.id, &names(&w)).unwrap();
            let boxes: Vec<_> = got.iter().map(|r| r.bbox).collect();
            let gts: Vec<_> = img.objects.iter().map(|o| o.bbox).collect();
            assert_eq!(boxes, gts);
        }
        let w0 = world(SimWorldConfig { p_box: 0.0, q_fp: 0.0, ..Default::default() });
        let p0 = SimProposer { world: w0.clone(), meter: meter() };
        assert!(p0.propose("img-00001", &names(&w0)).unwrap().is_empty());
    }

    #[test]
    fn small_jitter_keeps_overlap() {
        let w = world(SimWorldConfig { p_box: 1.0, sigma_jitter: 2.0, q_fp: 0.0, ..Default::default() });
        let p = SimProposer { world: w.clone(), meter: meter() };
        for img in &w.images {
            let got = p.propose(&img.record.id, &names(&w)).unwrap();
            for (r, o) in got.iter().zip(&img.objects) {
                assert!(iou(&r.bbox, &o.bbox) > 0.0);
                assert!(r.bbox.is_within(320.0, 240.0));
                assert!((0.0..=1.0).contains(&r.score));
            }
        }
    }

    #[test]
    fn zsc_properties() {
        let w = world(SimWorldConfig { sigma_within: 0.0, sigma_zsc: 0.0, ..Default::default() });
        let z = SimClassifier { world: w.clone(), meter: meter() };
        let mut labels = names(&w);
        labels.push("background".into());
        for img in w.images.iter().take(20) {
            for o in &img.objects {
                let s = z.classify(&img.record.id, &o.bbox, &labels).unwrap();
                assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(s.iter().all(|x| *x > 0.0));
                let arg = (0..s.len()).max_by(|a, b| s[*a].partial_cmp(&s[*b]).unwrap()).unwrap();
                // overlapping objects may shadow each other; only check clear ones
                let clear = img.objects.iter().filter(|p| iou(&p.bbox, &o.bbox) >= 0.1).count() == 1;
                if clear {
                    assert_eq!(arg, o.category);
                }
            }
        }
        // an empty image has nothing under any box: background wins
        let w = world(SimWorldConfig { objects_min: 0, objects_max: 0, ..Default::default() });
        let z = SimClassifier { world: w.clone(), meter: meter() };
        let mut labels = names(&w);
        labels.push("background".into());
        let s = z.classify("img-00003", &BoundingBox::new(0.0, 0.0, 30.0, 30.0).unwrap(), &labels).unwrap();
        let arg = (0..s.len()).max_by(|a, b| s[*a].partial_cmp(&s[*b]).unwrap()).unwrap();
        assert_eq!(arg, labels.len() - 1);
    }

    #[test]
    fn scenarios_distinct_and_mention_category() {
        let w = world(SimWorldConfig::default());
        let g = SimScenarioGenerator { world: w.clone(), meter: meter() };
        let out = g.generate("trailer", 10).unwrap();
        assert_eq!(out.len(), 10);
        let set: std::collections::BTreeSet<_> = out.iter().collect();
        assert_eq!(set.len(), 10);
        assert!(out.iter().all(|d| d.contains("trailer")));
        assert_eq!(out, g.generate("trailer", 10).unwrap());
        assert!(matches!(g.generate("trailer", 0), Err(Error::InvalidCount(_))));
    }

    #[test]
    fn meter_charged_deterministically() {
        let w = world(SimWorldConfig::default());
        let m = meter();
        let set = sim_adapters(w, m.clone());
        set.captioner.describe("img-00000").unwrap();
        set.embedder.embed_text("trailer").unwrap();
        assert_eq!(m.total_micros(), CAPTION_MICROS + EMBED_MICROS);
    }
}
