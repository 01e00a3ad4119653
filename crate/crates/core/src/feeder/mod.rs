//! Text-guided image retrieval over an embedding pool.
//!
//! Retrieval is an exact cosine scan. Results above the score threshold are
//! returned best-first, capped at `top_k`; when too few pass, the list is
//! padded with the next-best images up to a fixed fraction of the pool and
//! flagged.

mod io;

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::thresholds::EngineThresholds;

pub use io::{read_binary, read_jsonl, read_store, write_binary, write_jsonl, EMBEDDING_MAGIC};

/// Prompt template for text queries.
pub const PROMPT_PREFIX: &str = "An image containing";

/// Finite, non-zero embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) || values.iter().all(|v| *v == 0.0)
        {
            return Err(Error::InvalidVector);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Cosine similarity in `[-1, 1]`.
pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            actual: v.dim(),
        });
    }
    Ok(cosine_unchecked(u.values(), v.values(), u.norm(), v.norm()))
}

fn cosine_unchecked(u: &[f64], v: &[f64], nu: f64, nv: f64) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / (nu * nv)).clamp(-1.0, 1.0)
}

/// Image id -> embedding map with a fixed dimension and insertion order.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
    norms: Vec<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insert(&mut self, id: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        let id = id.into();
        if vector.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vector.dim(),
            });
        }
        if self.index.contains_key(&id) {
            return Err(Error::DuplicateImage(id));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.norms.push(vector.norm());
        self.ids.push(id);
        self.vectors.push(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.index.get(id).map(|&i| &self.vectors[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter())
    }

    /// Keep only the ids accepted by `keep`, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(&str) -> bool) -> EmbeddingStore {
        let mut out = EmbeddingStore::new(self.dim);
        for (id, v) in self.iter() {
            if keep(id) {
                out.insert(id, v.clone()).expect("ids are unique in source");
            }
        }
        out
    }

    /// Every entry scored against `query`, best first; ties keep insertion order.
    pub fn ranked(&self, query: &EmbeddingVector) -> Result<Vec<(usize, f64)>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let qn = query.norm();
        let mut scored: Vec<(usize, f64)> = self
            .vectors
            .iter()
            .zip(&self.norms)
            .enumerate()
            .map(|(i, (v, &n))| (i, cosine_unchecked(query.values(), v.values(), qn, n)))
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        Ok(scored)
    }

    pub fn id_at(&self, i: usize) -> &str {
        &self.ids[i]
    }

    /// Plain top-k by cosine, no thresholds.
    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>> {
        Ok(self
            .ranked(query)?
            .into_iter()
            .take(k)
            .map(|(i, s)| (self.ids[i].clone(), s))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub score_min: Option<f64>,
    pub top_k: usize,
    pub min_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedImage {
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query: String,
    pub params: RetrievalParams,
    pub images: Vec<RetrievedImage>,
    /// Set when results below the score threshold were added to reach the floor.
    pub floor_applied: bool,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.images.iter().map(|r| r.image_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn build_prompt(category: &str) -> Result<String> {
    let name = category.trim();
    if name.is_empty() {
        return Err(Error::EmptyCategory);
    }
    Ok(format!("{PROMPT_PREFIX} {name}"))
}

/// Threshold-and-top-k retrieval with the minimum-fraction floor.
pub fn retrieve(
    store: &EmbeddingStore,
    query: &EmbeddingVector,
    query_text: &str,
    thresholds: &EngineThresholds,
) -> Result<RetrievalResult> {
    if store.is_empty() {
        return Err(Error::EmptyStore);
    }
    let ranked = store.ranked(query)?;
    let top_k = thresholds.top_k.max(1);
    let passing = ranked
        .iter()
        .take_while(|(_, s)| *s >= thresholds.retrieval_score_min)
        .count();
    let floor = (thresholds.retrieval_min_fraction * store.len() as f64).ceil() as usize;
    let floor = floor.min(store.len()).min(top_k);
    let (take, floor_applied) = if passing < floor {
        (floor, true)
    } else {
        (passing.min(top_k), false)
    };
    Ok(RetrievalResult {
        query: query_text.to_string(),
        params: RetrievalParams {
            score_min: Some(thresholds.retrieval_score_min),
            top_k,
            min_fraction: Some(thresholds.retrieval_min_fraction),
        },
        images: ranked
            .into_iter()
            .take(take)
            .map(|(i, score)| RetrievedImage {
                image_id: store.id_at(i).to_string(),
                score,
            })
            .collect(),
        floor_applied,
    })
}

/// Fraction of retrieved images judged relevant; `None` for an empty result.
pub fn retrieval_precision(result: &RetrievalResult, relevant: impl Fn(&str) -> bool) -> Option<f64> {
    if result.is_empty() {
        return None;
    }
    let hits = result.images.iter().filter(|r| relevant(&r.image_id)).count();
    Some(hits as f64 / result.len() as f64)
}

/// Nearest neighbours of an image in the pool, excluding the image itself.
pub fn image_similarity_search(store: &EmbeddingStore, anchor: &str, k: usize) -> Result<RetrievalResult> {
    let query = store
        .get(anchor)
        .ok_or_else(|| Error::UnknownImage(anchor.to_string()))?;
    let anchor_index = store.index[anchor];
    let images = store
        .ranked(query)?
        .into_iter()
        .filter(|(i, _)| *i != anchor_index)
        .take(k)
        .map(|(i, score)| RetrievedImage {
            image_id: store.id_at(i).to_string(),
            score,
        })
        .collect();
    Ok(RetrievalResult {
        query: format!("image:{anchor}"),
        params: RetrievalParams {
            score_min: None,
            top_k: k,
            min_fraction: None,
        },
        images,
        floor_applied: false,
    })
}
