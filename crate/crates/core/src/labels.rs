//! Label space registry and caption-term normalization.
//!
//! Category names are compared in normalized form: lowercase, punctuation
//! stripped, whitespace collapsed, one trailing plural suffix removed per
//! token, then mapped through the alias table. The label space is
//! append-only; ids never move once assigned.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detection::CategoryId;
use crate::error::{Error, Result};

/// Current on-disk format of [`LabelSpace`] documents.
pub const LABEL_SPACE_FORMAT: u32 = 1;

/// Alias pairs shipped with the engine (`canonical -> [aliases]`).
pub const DEFAULT_ALIASES_JSON: &str = include_str!("../data/aliases.json");

/// Normalized alias -> normalized canonical name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasTable {
    map: BTreeMap<String, String>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse a `{"canonical": ["alias", ...]}` JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        let mut table = AliasTable::new();
        for (canonical, aliases) in raw {
            for alias in aliases {
                table.insert(&alias, &canonical)?;
            }
        }
        Ok(table)
    }

    pub fn shipped() -> Self {
        Self::from_json(DEFAULT_ALIASES_JSON).expect("shipped alias table is valid")
    }

    pub fn insert(&mut self, alias: &str, canonical: &str) -> Result<()> {
        let alias = normalize_tokens(alias);
        let canonical = normalize_tokens(canonical);
        match self.map.get(&alias) {
            Some(existing) if *existing != canonical => Err(Error::AliasConflict {
                alias,
                existing: existing.clone(),
            }),
            _ => {
                self.map.insert(alias, canonical);
                Ok(())
            }
        }
    }

    pub fn resolve<'a>(&'a self, normalized: &'a str) -> &'a str {
        self.map.get(normalized).map(String::as_str).unwrap_or(normalized)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.map.iter().map(|(a, c)| (a.as_str(), c.as_str()))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Replaceable hook for caption term normalization.
pub trait TermNormalizer: Send + Sync {
    fn normalize(&self, text: &str) -> String;
}

#[derive(Debug, Clone, Default)]
pub struct DefaultNormalizer {
    pub aliases: AliasTable,
}

impl DefaultNormalizer {
    pub fn new(aliases: AliasTable) -> Self {
        DefaultNormalizer { aliases }
    }
}

impl TermNormalizer for DefaultNormalizer {
    fn normalize(&self, text: &str) -> String {
        normalize_term(text, &self.aliases)
    }
}

fn singular(token: &str) -> &str {
    // Tokens of three letters or fewer ("bus", "gas") are left alone.
    if token.len() <= 3 {
        return token;
    }
    for suffix in ["sses", "shes", "ches", "xes", "zes", "ses"] {
        if token.ends_with(suffix) {
            return &token[..token.len() - 2];
        }
    }
    if token.ends_with('s') && !token.ends_with("ss") && !token.ends_with("us") {
        return &token[..token.len() - 1];
    }
    token
}

/// Normalize without applying any alias table.
pub fn normalize_tokens(text: &str) -> String {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .map(|t| singular(&t.to_lowercase()).to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canonical form of a caption term.
pub fn normalize_term(text: &str, aliases: &AliasTable) -> String {
    let base = normalize_tokens(text);
    aliases.resolve(&base).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryStatus {
    Known,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    pub status: CategoryStatus,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// Ordered, append-only category registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    pub format: u32,
    /// Bumped on every extension.
    pub version: u64,
    categories: Vec<Category>,
}

impl Default for LabelSpace {
    fn default() -> Self {
        LabelSpace {
            format: LABEL_SPACE_FORMAT,
            version: 1,
            categories: Vec::new(),
        }
    }
}

impl LabelSpace {
    /// A label space whose categories are all `known`.
    pub fn with_known<S: AsRef<str>>(names: &[S], aliases: &AliasTable) -> Result<Self> {
        let mut ls = LabelSpace::default();
        for name in names {
            ls.push(name.as_ref(), CategoryStatus::Known, aliases)?;
        }
        ls.version = 1;
        Ok(ls)
    }

    fn push(&mut self, name: &str, status: CategoryStatus, aliases: &AliasTable) -> Result<CategoryId> {
        let canonical = normalize_term(name, aliases);
        if canonical.is_empty() {
            return Err(Error::EmptyCategory);
        }
        if self.resolve(&canonical, aliases).is_some() {
            return Err(Error::DuplicateCategory(canonical));
        }
        let id = CategoryId(self.categories.len() as u32);
        let own_aliases = aliases
            .iter()
            .filter(|(_, c)| *c == canonical)
            .map(|(a, _)| a.to_string())
            .collect();
        self.categories.push(Category {
            id,
            name: canonical,
            status,
            aliases: own_aliases,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn get(&self, id: CategoryId) -> Option<&Category> {
        self.categories.get(id.index())
    }

    pub fn name(&self, id: CategoryId) -> Option<&str> {
        self.get(id).map(|c| c.name.as_str())
    }

    pub fn status(&self, id: CategoryId) -> Option<CategoryStatus> {
        self.get(id).map(|c| c.status)
    }

    pub fn names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    pub fn ids_with_status(&self, status: CategoryStatus) -> Vec<CategoryId> {
        self.categories
            .iter()
            .filter(|c| c.status == status)
            .map(|c| c.id)
            .collect()
    }

    /// Look up a term by canonical name or alias (after normalization).
    pub fn resolve(&self, term: &str, aliases: &AliasTable) -> Option<CategoryId> {
        let norm = normalize_term(term, aliases);
        self.categories
            .iter()
            .find(|c| c.name == norm || c.aliases.contains(&norm))
            .map(|c| c.id)
    }

    /// Every canonical name and alias in normalized form.
    pub fn all_terms(&self) -> Vec<String> {
        self.categories
            .iter()
            .flat_map(|c| std::iter::once(c.name.clone()).chain(c.aliases.iter().cloned()))
            .collect()
    }

    /// Check the structural invariants of a deserialized document.
    pub fn validate(&self) -> Result<()> {
        if self.format != LABEL_SPACE_FORMAT {
            return Err(Error::InvalidData(format!(
                "unsupported label space format {}",
                self.format
            )));
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (i, c) in self.categories.iter().enumerate() {
            if c.id.index() != i {
                return Err(Error::InvalidData(format!(
                    "category `{}` has id {} at position {i}",
                    c.name, c.id
                )));
            }
            for term in std::iter::once(&c.name).chain(c.aliases.iter()) {
                if let Some(prev) = seen.insert(term.as_str(), c.name.as_str()) {
                    return Err(Error::AliasConflict {
                        alias: term.clone(),
                        existing: prev.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ls: LabelSpace = serde_json::from_str(text)?;
        ls.validate()?;
        Ok(ls)
    }
}

/// Append `name` as a novel category with a fresh id.
///
/// Fails with [`Error::DuplicateCategory`] when the normalized name (or an
/// alias of it) is already registered.
pub fn extend_label_space(ls: &LabelSpace, name: &str, aliases: &AliasTable) -> Result<LabelSpace> {
    let mut next = ls.clone();
    next.push(name, CategoryStatus::Novel, aliases)?;
    next.version = ls.version + 1;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn known_41() -> LabelSpace {
        let mut names: Vec<String> = vec!["car".into(), "motorcyclist".into(), "bicyclist".into()];
        names.extend((0..38).map(|i| format!("thing{i}")));
        LabelSpace::with_known(&names, &AliasTable::shipped()).unwrap()
    }

    #[test]
    fn normalize_case_and_plural() {
        let none = AliasTable::new();
        assert_eq!(normalize_term("Traffic Cones", &none), "traffic cone");
        assert_eq!(normalize_term("car", &none), "car");
        assert_eq!(normalize_term("  Buses!! ", &none), "bus");
        assert_eq!(normalize_term("bus", &none), "bus");
        assert_eq!(normalize_term("glass", &none), "glass");
    }

    #[test]
    fn normalize_applies_alias() {
        let mut t = AliasTable::new();
        t.insert("cyclist", "bicyclist").unwrap();
        assert_eq!(normalize_term("cyclist", &t), "bicyclist");
        assert_eq!(normalize_term("Cyclists", &t), "bicyclist");
    }

    #[test]
    fn alias_cannot_map_twice() {
        let mut t = AliasTable::new();
        t.insert("rider", "motorcyclist").unwrap();
        t.insert("rider", "motorcyclist").unwrap();
        assert!(matches!(
            t.insert("rider", "bicyclist"),
            Err(Error::AliasConflict { .. })
        ));
    }

    #[test]
    fn extend_appends_with_fresh_id() {
        let ls = known_41();
        let next = extend_label_space(&ls, "trailer", &AliasTable::shipped()).unwrap();
        assert_eq!(next.len(), 42);
        let added = &next.categories()[41];
        assert_eq!(added.id, CategoryId(41));
        assert_eq!(added.status, CategoryStatus::Novel);
        assert_eq!(&next.categories()[..41], ls.categories());
    }

    #[test]
    fn extend_rejects_duplicates() {
        let ls = known_41();
        let aliases = AliasTable::shipped();
        assert!(matches!(
            extend_label_space(&ls, "car", &aliases),
            Err(Error::DuplicateCategory(_))
        ));
        assert!(matches!(
            extend_label_space(&ls, "Motorcyclists", &aliases),
            Err(Error::DuplicateCategory(_))
        ));
        assert!(matches!(
            extend_label_space(&ls, "cyclist", &aliases),
            Err(Error::DuplicateCategory(_))
        ));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let ls = known_41();
        let text = ls.to_json().unwrap();
        assert_eq!(LabelSpace::from_json(&text).unwrap(), ls);
        let broken = text.replacen("\"id\": 1,", "\"id\": 7,", 1);
        assert!(LabelSpace::from_json(&broken).is_err());
    }

    #[test]
    fn shipped_aliases_cover_known_synonym_pairs() {
        let t = AliasTable::shipped();
        assert_eq!(normalize_term("cyclist", &t), "bicyclist");
        assert_eq!(normalize_term("rider", &t), "motorcyclist");
    }
}
