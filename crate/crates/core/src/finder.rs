//! Issue finder: compares dense captions with the label space and with what
//! the detector already predicts, and reports categories nobody can detect.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{CaptionerAdapter, TrainableDetectorAdapter};
use crate::error::{Error, Result};
use crate::labels::{LabelSpace, TermNormalizer};

/// Candidate vocabulary compiled into token sequences for matching.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    // (tokens, canonical name), longest first
    entries: Vec<(Vec<String>, String)>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(names: &[S], normalizer: &dyn TermNormalizer) -> Self {
        let mut entries: Vec<(Vec<String>, String)> = Vec::new();
        for name in names {
            let canonical = normalizer.normalize(name.as_ref());
            if canonical.is_empty() {
                continue;
            }
            // Match on the surface form too, so aliases resolve to their canonical name.
            let surface = crate::labels::normalize_tokens(name.as_ref());
            for form in [surface, canonical.clone()] {
                let tokens: Vec<String> = form.split(' ').map(str::to_string).collect();
                if !entries.iter().any(|(t, _)| *t == tokens) {
                    entries.push((tokens, canonical.clone()));
                }
            }
        }
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Vocabulary { entries }
    }

    /// Vocabulary terms in order of appearance, longest match first.
    pub fn mentions_in_order(&self, text: &str, normalizer: &dyn TermNormalizer) -> Vec<String> {
        let tokens: Vec<String> = crate::labels::normalize_tokens(text)
            .split(' ')
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        let mut found = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self.entries.iter().find(|(t, _)| {
                i + t.len() <= tokens.len() && tokens[i..i + t.len()] == t[..]
            });
            match hit {
                Some((t, canonical)) => {
                    found.push(normalizer.normalize(canonical));
                    i += t.len();
                }
                None => i += 1,
            }
        }
        found
    }
}

pub fn extract_mentions(caption: &str, vocabulary: &Vocabulary, normalizer: &dyn TermNormalizer) -> BTreeSet<String> {
    vocabulary
        .mentions_in_order(caption, normalizer)
        .into_iter()
        .collect()
}

/// Mentions that are neither in the label space (names or aliases) nor
/// among the categories the detector already predicts.
pub fn find_novel(
    mentions: &BTreeSet<String>,
    label_space: &LabelSpace,
    predicted: &BTreeSet<String>,
    normalizer: &dyn TermNormalizer,
) -> BTreeSet<String> {
    let covered: BTreeSet<String> = label_space
        .all_terms()
        .into_iter()
        .chain(predicted.iter().cloned())
        .map(|t| normalizer.normalize(&t))
        .collect();
    mentions
        .iter()
        .filter(|m| !covered.contains(&normalizer.normalize(m)) && !covered.contains(*m))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IssueDecision {
    Novel,
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueCandidate {
    pub name: String,
    pub supporting_images: Vec<String>,
    pub mention_count: usize,
    /// Whether the detector already predicted this category on some image.
    pub detectable: bool,
    pub decision: IssueDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssueReport {
    pub images_scanned: usize,
    pub trigger_min_mentions: usize,
    /// Sorted by mention count (descending), then name.
    pub candidates: Vec<IssueCandidate>,
}

impl IssueReport {
    pub fn novel(&self) -> impl Iterator<Item = &IssueCandidate> {
        self.candidates
            .iter()
            .filter(|c| c.decision == IssueDecision::Novel)
    }

    pub fn candidate(&self, name: &str) -> Option<&IssueCandidate> {
        self.candidates.iter().find(|c| c.name == name)
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Caption and detect every image, then aggregate out-of-label-space
/// mentions. Candidates reaching `trigger_min_mentions` images are `novel`.
pub fn issue_scan(
    image_ids: &[String],
    captioner: &dyn CaptionerAdapter,
    detector: &dyn TrainableDetectorAdapter,
    label_space: &LabelSpace,
    candidate_vocabulary: &[String],
    trigger_min_mentions: usize,
    normalizer: &dyn TermNormalizer,
) -> Result<IssueReport> {
    if image_ids.is_empty() {
        return Err(Error::InvalidCount("issue scan needs at least one image".into()));
    }
    if trigger_min_mentions == 0 {
        return Err(Error::InvalidCount("trigger_min_mentions must be >= 1".into()));
    }
    let vocab = Vocabulary::new(candidate_vocabulary, normalizer);

    let per_image: Vec<(BTreeSet<String>, BTreeSet<String>)> = image_ids
        .par_iter()
        .map(|id| -> Result<_> {
            let caption = captioner.describe(id)?;
            let predicted: BTreeSet<String> = detector
                .detect(id)?
                .iter()
                .filter_map(|d| label_space.name(d.category).map(str::to_string))
                .collect();
            let mentions = extract_mentions(&caption, &vocab, normalizer);
            Ok((find_novel(&mentions, label_space, &predicted, normalizer), predicted))
        })
        .collect::<Result<_>>()?;

    let all_predicted: BTreeSet<&String> = per_image.iter().flat_map(|(_, p)| p.iter()).collect();
    let mut support: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, (novel, _)) in image_ids.iter().zip(&per_image) {
        for name in novel {
            support.entry(name.clone()).or_default().push(id.clone());
        }
    }
    let mut candidates: Vec<IssueCandidate> = support
        .into_iter()
        .map(|(name, supporting_images)| {
            let count = supporting_images.len();
            IssueCandidate {
                detectable: all_predicted.contains(&name),
                decision: if count >= trigger_min_mentions {
                    IssueDecision::Novel
                } else {
                    IssueDecision::Ignored
                },
                name,
                mention_count: count,
                supporting_images,
            }
        })
        .collect();
    candidates.sort_by(|a, b| b.mention_count.cmp(&a.mention_count).then_with(|| a.name.cmp(&b.name)));
    Ok(IssueReport {
        images_scanned: image_ids.len(),
        trigger_min_mentions,
        candidates,
    })
}

/// Fraction of a candidate's supporting images that truly contain it.
pub fn finder_precision(candidate: &IssueCandidate, present: impl Fn(&str) -> bool) -> Option<f64> {
    if candidate.supporting_images.is_empty() {
        return None;
    }
    let hits = candidate
        .supporting_images
        .iter()
        .filter(|id| present(id))
        .count();
    Some(hits as f64 / candidate.supporting_images.len() as f64)
}
