//! Deterministic synthetic world with simulated adapters.
//!
//! Every category has a unit prototype in latent space; objects carry a
//! noisy copy of their prototype; images embed as the mean of their objects.
//! Captioner, embedder, proposer, crop classifier, scenario generator and a
//! trainable linear-softmax detector all read the same world, and every
//! random draw comes from a named stream keyed by `(seed, name, index)`.

mod adapters;
mod detector;

pub use adapters::{
    sim_adapters, SimCaptioner, SimClassifier, SimEmbedder, SimProposer, SimScenarioGenerator,
    SCENARIO_SURROUNDINGS, SCENARIO_TIMES, SCENARIO_WEATHER,
};
pub use detector::{loss_and_gradient, Sample, SimDetector, SimDetectorState, TrainRecord};

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use crate::rng::stream;
use crate::detection::{CategoryId, Detection, ImageRecord};
use crate::error::{Error, Result};
use crate::feeder::{EmbeddingStore, EmbeddingVector};
use crate::finder::Vocabulary;
use crate::geometry::{iou, BoundingBox};
use crate::labels::{AliasTable, DefaultNormalizer, LabelSpace};
use crate::updater::{TrainingSchedule, BACKGROUND_LABEL};

pub const SIM_SOURCE: &str = "sim";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimWorldConfig {
    pub seed: u64,
    pub dimension: usize,
    pub known_categories: Vec<String>,
    pub novel_categories: Vec<String>,
    /// Names that exist only in text (captioner hallucinations).
    pub distractors: Vec<String>,
    /// Sampling weight of each novel category; known categories weigh 1.
    pub novel_weight: f64,
    pub sigma_between: f64,
    /// Per-coordinate object feature noise.
    pub sigma_within: f64,
    pub images: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub image_width: u32,
    pub image_height: u32,
    pub box_min: f64,
    pub box_max: f64,
    pub eval_fraction: f64,
    pub pretrain_fraction: f64,
    pub p_cap: f64,
    pub q_cap: f64,
    pub p_box: f64,
    pub sigma_jitter: f64,
    pub q_fp: f64,
    /// Chance the proposer attaches a uniformly random prompt label.
    pub proposal_label_noise: f64,
    pub sigma_zsc: f64,
    pub zsc_logit_scale: f64,
    /// Background regions the detector scores per image.
    pub background_regions: usize,
    /// Weight of the text-specific hash direction in text embeddings.
    pub text_hash_weight: f64,
}

impl Default for SimWorldConfig {
    fn default() -> Self {
        SimWorldConfig {
            seed: 0,
            dimension: 32,
            known_categories: [
                "car", "truck", "bus", "pedestrian", "bicycle", "motorcycle", "barrier", "traffic light",
            ]
            .map(String::from)
            .to_vec(),
            novel_categories: vec!["trailer".into()],
            distractors: ["stroller", "wheelchair", "scooter", "shopping cart", "dog", "horse"]
                .map(String::from)
                .to_vec(),
            novel_weight: 0.3,
            sigma_between: 1.0,
            sigma_within: 0.15,
            images: 2000,
            objects_min: 1,
            objects_max: 4,
            image_width: 320,
            image_height: 240,
            box_min: 24.0,
            box_max: 96.0,
            eval_fraction: 0.2,
            pretrain_fraction: 0.3,
            p_cap: 0.9,
            q_cap: 0.05,
            p_box: 0.95,
            sigma_jitter: 2.0,
            q_fp: 0.1,
            proposal_label_noise: 0.5,
            sigma_zsc: 0.1,
            zsc_logit_scale: 10.0,
            background_regions: 2,
            text_hash_weight: 0.15,
        }
    }
}

impl SimWorldConfig {
    /// The reference configuration: d=32, 8 known + 1 novel, 2000 images.
    pub fn reference(seed: u64) -> Self {
        SimWorldConfig {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("p_cap", self.p_cap),
            ("q_cap", self.q_cap),
            ("p_box", self.p_box),
            ("proposal_label_noise", self.proposal_label_noise),
            ("eval_fraction", self.eval_fraction),
            ("pretrain_fraction", self.pretrain_fraction),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {r}")));
            }
        }
        let sigmas = [
            ("sigma_between", self.sigma_between),
            ("sigma_within", self.sigma_within),
            ("sigma_jitter", self.sigma_jitter),
            ("sigma_zsc", self.sigma_zsc),
            ("q_fp", self.q_fp),
            ("novel_weight", self.novel_weight),
            ("text_hash_weight", self.text_hash_weight),
            ("zsc_logit_scale", self.zsc_logit_scale),
        ];
        for (name, s) in sigmas {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {s}")));
            }
        }
        if self.dimension < 2 {
            return Err(Error::Config("dimension must be >= 2".into()));
        }
        if self.eval_fraction + self.pretrain_fraction > 1.0 {
            return Err(Error::Config("eval_fraction + pretrain_fraction exceeds 1".into()));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::Config("objects_min exceeds objects_max".into()));
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max)
            || self.box_max > self.image_width.min(self.image_height) as f64
        {
            return Err(Error::Config("box size range does not fit the image".into()));
        }
        if self.known_categories.is_empty() && self.novel_categories.is_empty() {
            return Err(Error::Config("world needs at least one category".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in self.category_names().iter().chain(&self.distractors) {
            if n == BACKGROUND_LABEL || !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate or reserved world name {n:?}")));
            }
        }
        Ok(())
    }

    /// Known names followed by novel names; the index is the world category.
    pub fn category_names(&self) -> Vec<String> {
        self.known_categories
            .iter()
            .chain(&self.novel_categories)
            .cloned()
            .collect()
    }
}

/// Training schedule the simulated detector is tuned for. Latent features
/// are unit vectors, so it needs a far larger step than the stock default.
pub fn reference_schedule() -> TrainingSchedule {
    TrainingSchedule {
        learning_rate: 0.5,
        ..TrainingSchedule::default()
    }
}

pub(crate) fn gaussian(rng: &mut impl Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect::<Vec<f64>>()
}

pub(crate) fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub(crate) fn add_scaled(a: &mut [f64], b: &[f64], s: f64) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit direction derived from a string, for words outside the world.
pub fn hashed_unit_vector(text: &str, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(b"text-hash\0");
    h.update(text.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    normalize(gaussian(&mut rng, dim, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Eval,
    Pretrain,
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    /// World category index.
    pub category: usize,
    pub feature: Vec<f64>,
    /// Box the detector's internal proposal places on this object.
    pub detector_box: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimImage {
    pub record: ImageRecord,
    pub split: Split,
    pub objects: Vec<SimObject>,
    pub background_regions: Vec<Region>,
}

impl SimImage {
    pub fn contains(&self, category: usize) -> bool {
        self.objects.iter().any(|o| o.category == category)
    }

    /// Regions the detector scores: one per object, then background ones.
    pub fn detector_regions(&self) -> impl Iterator<Item = (&BoundingBox, &[f64])> {
        self.objects
            .iter()
            .map(|o| (&o.detector_box, o.feature.as_slice()))
            .chain(self.background_regions.iter().map(|r| (&r.bbox, r.feature.as_slice())))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimWorld {
    pub config: SimWorldConfig,
    /// Indexed by world category.
    pub prototypes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub images: Vec<SimImage>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    names: BTreeMap<String, usize>,
    #[serde(skip)]
    aliases: AliasTable,
}

pub fn image_id(index: usize) -> String {
    format!("img-{index:05}")
}

/// Build the world for `config`. Same config, same world.
pub fn generate_world(config: &SimWorldConfig) -> Result<SimWorld> {
    config.validate()?;
    let d = config.dimension;
    let names = config.category_names();

    let mut rng = stream(config.seed, "prototypes", 0);
    let common = normalize(gaussian(&mut rng, d, 1.0));
    let spread = config.sigma_between / (d as f64).sqrt();
    let prototypes: Vec<Vec<f64>> = names
        .iter()
        .map(|_| {
            let mut p = common.clone();
            add_scaled(&mut p, &gaussian(&mut rng, d, spread), 1.0);
            normalize(p)
        })
        .collect();
    let background = normalize(gaussian(&mut stream(config.seed, "background", 0), d, 1.0));

    let n_known = config.known_categories.len();
    let weights: Vec<f64> = (0..names.len())
        .map(|c| if c < n_known { 1.0 } else { config.novel_weight })
        .collect();
    let total_weight: f64 = weights.iter().sum();
    let n_eval = (config.images as f64 * config.eval_fraction).round() as usize;
    let n_pretrain = (config.images as f64 * config.pretrain_fraction).round() as usize;
    let (w, h) = (config.image_width as f64, config.image_height as f64);

    let random_box = |rng: &mut ChaCha8Rng| -> BoundingBox {
        let bw = rng.random_range(config.box_min..=config.box_max);
        let bh = rng.random_range(config.box_min..=config.box_max);
        let x = rng.random_range(0.0..=(w - bw));
        let y = rng.random_range(0.0..=(h - bh));
        BoundingBox::new(x, y, x + bw, y + bh).expect("box inside image")
    };

    let mut images = Vec::with_capacity(config.images);
    for i in 0..config.images {
        let mut rng = stream(config.seed, "image", i as u64);
        let count = rng.random_range(config.objects_min..=config.objects_max);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let mut pick = rng.random::<f64>() * total_weight;
            let mut category = weights.len() - 1;
            for (c, wt) in weights.iter().enumerate() {
                if pick < *wt {
                    category = c;
                    break;
                }
                pick -= wt;
            }
            let bbox = random_box(&mut rng);
            let mut f = prototypes[category].clone();
            add_scaled(&mut f, &gaussian(&mut rng, d, config.sigma_within), 1.0);
            let j: Vec<f64> = gaussian(&mut rng, 4, 1.0);
            let detector_box = jitter(&bbox, &j, 1.0, w, h);
            objects.push(SimObject {
                bbox,
                category,
                feature: normalize(f),
                detector_box,
            });
        }
        let mut region_rng = stream(config.seed, "regions", i as u64);
        let background_regions = (0..config.background_regions)
            .map(|_| {
                let bbox = random_box(&mut region_rng);
                let mut f = background.clone();
                add_scaled(&mut f, &gaussian(&mut region_rng, d, config.sigma_within), 1.0);
                Region {
                    bbox,
                    feature: normalize(f),
                }
            })
            .collect();
        let gts = objects
            .iter()
            .map(|o| Detection::ground_truth(o.bbox, CategoryId(o.category as u32)))
            .collect();
        let record = ImageRecord::new(image_id(i), config.image_width, config.image_height, SIM_SOURCE)
            .with_ground_truth(gts)?;
        let split = if i < n_eval {
            Split::Eval
        } else if i < n_eval + n_pretrain {
            Split::Pretrain
        } else {
            Split::Pool
        };
        images.push(SimWorld::check_image(SimImage {
            record,
            split,
            objects,
            background_regions,
        }));
    }
    Ok(SimWorld::assemble(config.clone(), prototypes, background, images))
}

/// Jitter box corners by `sigma * noise`, clipped; falls back to the input
/// box when jitter would invert it.
pub(crate) fn jitter(b: &BoundingBox, noise: &[f64], sigma: f64, w: f64, h: f64) -> BoundingBox {
    let [x0, y0, x1, y1] = b.as_array();
    BoundingBox::new(
        x0 + sigma * noise[0],
        y0 + sigma * noise[1],
        x1 + sigma * noise[2],
        y1 + sigma * noise[3],
    )
    .ok()
    .and_then(|j| j.clip(w, h))
    .unwrap_or(*b)
}

impl SimWorld {
    fn check_image(img: SimImage) -> SimImage {
        debug_assert!(img
            .objects
            .iter()
            .all(|o| o.bbox.is_within(img.record.width as f64, img.record.height as f64)));
        img
    }

    fn assemble(config: SimWorldConfig, prototypes: Vec<Vec<f64>>, background: Vec<f64>, images: Vec<SimImage>) -> Self {
        let index = images
            .iter()
            .enumerate()
            .map(|(i, im)| (im.record.id.clone(), i))
            .collect();
        let names = config
            .category_names()
            .into_iter()
            .enumerate()
            .map(|(i, n)| (crate::labels::normalize_term(&n, &AliasTable::shipped()), i))
            .collect();
        SimWorld {
            config,
            prototypes,
            background,
            images,
            index,
            names,
            aliases: AliasTable::shipped(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    pub fn category_names(&self) -> Vec<String> {
        self.config.category_names()
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        let n = crate::labels::normalize_term(name, &self.aliases);
        self.names.get(&n).copied()
    }

    pub fn category_name(&self, index: usize) -> &str {
        if index < self.config.known_categories.len() {
            &self.config.known_categories[index]
        } else {
            &self.config.novel_categories[index - self.config.known_categories.len()]
        }
    }

    pub fn image_index(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn image(&self, id: &str) -> Result<&SimImage> {
        self.index
            .get(id)
            .map(|&i| &self.images[i])
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.images
            .iter()
            .filter(|im| im.split == split)
            .map(|im| im.record.id.clone())
            .collect()
    }

    pub fn records_in(&self, split: Split) -> Vec<ImageRecord> {
        self.images
            .iter()
            .filter(|im| im.split == split)
            .map(|im| im.record.clone())
            .collect()
    }

    /// Latent direction for a single name: a world category, the background
    /// label, or a hashed direction for anything else.
    pub fn name_vector(&self, name: &str) -> Vec<f64> {
        if crate::labels::normalize_tokens(name) == BACKGROUND_LABEL {
            return self.background.clone();
        }
        match self.category_index(name) {
            Some(c) => self.prototypes[c].clone(),
            None => {
                let n = crate::labels::normalize_term(name, &self.aliases);
                hashed_unit_vector(&n, self.dimension())
            }
        }
    }

    /// Text embedding: mentioned names mixed (first weight 1, later 0.5)
    /// plus a small text-specific direction.
    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        let normalizer = DefaultNormalizer::new(self.aliases.clone());
        let vocab_names: Vec<String> = self
            .category_names()
            .into_iter()
            .chain(self.config.distractors.iter().cloned())
            .chain(self.aliases.iter().map(|(a, _)| a.to_string()))
            .collect();
        let vocab = Vocabulary::new(&vocab_names, &normalizer);
        let mentions = vocab.mentions_in_order(text, &normalizer);
        let d = self.dimension();
        let mut v = vec![0.0; d];
        let mut seen = std::collections::BTreeSet::new();
        for m in &mentions {
            if seen.insert(m.clone()) {
                let w = if seen.len() == 1 { 1.0 } else { 0.5 };
                add_scaled(&mut v, &self.name_vector(m), w);
            }
        }
        let hash = hashed_unit_vector(&crate::labels::normalize_tokens(text), d);
        let hw = if mentions.is_empty() { 1.0 } else { self.config.text_hash_weight };
        add_scaled(&mut v, &hash, hw);
        EmbeddingVector::new(normalize(v))
    }

    /// Image embedding: normalized mean of object features, or the
    /// background vector for an empty image.
    pub fn embed_image(&self, id: &str) -> Result<EmbeddingVector> {
        let img = self.image(id)?;
        if img.objects.is_empty() {
            return EmbeddingVector::new(self.background.clone());
        }
        let mut v = vec![0.0; self.dimension()];
        for o in &img.objects {
            add_scaled(&mut v, &o.feature, 1.0);
        }
        EmbeddingVector::new(normalize(v))
    }

    /// Embedding store over one split, in image order.
    pub fn embedding_store(&self, split: Split) -> Result<EmbeddingStore> {
        let mut store = EmbeddingStore::new(self.dimension());
        for img in self.images.iter().filter(|im| im.split == split) {
            store.insert(img.record.id.clone(), self.embed_image(&img.record.id)?)?;
        }
        Ok(store)
    }

    /// Ground truth restricted to categories the label space knows, with
    /// label-space ids.
    pub fn ground_truth_in(&self, label_space: &LabelSpace, ids: &[String]) -> Result<BTreeMap<String, Vec<Detection>>> {
        let map = self.label_map(label_space);
        ids.iter()
            .map(|id| {
                let img = self.image(id)?;
                let gts = img
                    .objects
                    .iter()
                    .filter_map(|o| map[o.category].map(|c| Detection::ground_truth(o.bbox, c)))
                    .collect();
                Ok((id.clone(), gts))
            })
            .collect()
    }

    /// World category index -> label-space id, if the label space has it.
    pub fn label_map(&self, label_space: &LabelSpace) -> Vec<Option<CategoryId>> {
        (0..self.prototypes.len())
            .map(|c| label_space.resolve(self.category_name(c), &self.aliases))
            .collect()
    }

    /// Fraction of `split` images containing world category `category`.
    pub fn base_rate(&self, split: Split, category: usize) -> f64 {
        let imgs: Vec<&SimImage> = self.images.iter().filter(|im| im.split == split).collect();
        if imgs.is_empty() {
            return 0.0;
        }
        imgs.iter().filter(|im| im.contains(category)).count() as f64 / imgs.len() as f64
    }

    /// Feature of the object best overlapping `bbox`, or background.
    pub(crate) fn feature_under(&self, img: &SimImage, bbox: &BoundingBox) -> (Vec<f64>, f64) {
        let best = img
            .objects
            .iter()
            .map(|o| (iou(&o.bbox, bbox), o))
            .fold(None::<(f64, &SimObject)>, |acc, (v, o)| match acc {
                Some((bv, _)) if bv >= v => acc,
                _ => Some((v, o)),
            });
        match best {
            Some((v, o)) if v >= 0.1 => (o.feature.clone(), v),
            _ => (self.background.clone(), 0.0),
        }
    }

    /// Known-category label space matching this world.
    pub fn initial_label_space(&self) -> Result<LabelSpace> {
        LabelSpace::with_known(&self.config.known_categories, &self.aliases)
    }

    pub fn aliases(&self) -> &AliasTable {
        &self.aliases
    }
}
