//! Domain types shared by every pipeline stage.
//!
//! All canonical strings pass through [`normalize_surface`] before they are
//! compared, stored, or used as map keys.

mod store;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use store::{load_jsonl, save_jsonl, write_atomic, EmbeddingRecord};
pub(crate) use store::{load_json, save_json};

/// Lowercases, trims, and collapses interior whitespace runs to one space.
pub fn normalize_surface(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

fn check_vector(id: &str, v: &[f64], dim: Option<usize>) -> Result<()> {
    if let Some(dim) = dim {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{id}: embedding has non-finite values")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            embedding: None,
        }
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if self.doc_id.is_empty() {
            return Err(Error::invalid("document with empty doc_id"));
        }
        if self.text.trim().is_empty() {
            return Err(Error::invalid(format!("document {} has empty text", self.doc_id)));
        }
        match &self.embedding {
            Some(v) => check_vector(&self.doc_id, v, dim),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
            embedding: None,
        }
    }

    pub fn validate(&self, dim: Option<usize>) -> Result<()> {
        if self.query_id.is_empty() {
            return Err(Error::invalid("query with empty query_id"));
        }
        if self.text.trim().is_empty() {
            return Err(Error::invalid(format!("query {} has empty text", self.query_id)));
        }
        match &self.embedding {
            Some(v) => check_vector(&self.query_id, v, dim),
            None => Ok(()),
        }
    }
}

/// Checks that ids are unique across a collection.
pub fn ensure_unique_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("duplicate id {id}")));
        }
    }
    Ok(())
}

/// An (entity, aspect) tuple in canonical text form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SemanticPair {
    pub entity: String,
    pub aspect: String,
}

impl SemanticPair {
    /// Normalizes both sides; rejects pairs where either side is blank.
    pub fn new(entity: &str, aspect: &str) -> Result<Self> {
        let entity = normalize_surface(entity);
        let aspect = normalize_surface(aspect);
        if entity.is_empty() || aspect.is_empty() {
            return Err(Error::invalid("semantic pair with empty entity or aspect"));
        }
        Ok(Self { entity, aspect })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStage {
    Initial,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSet {
    #[serde(rename = "doc_id", alias = "owner_id")]
    pub owner_id: String,
    pub stage: PairStage,
    pub pairs: Vec<SemanticPair>,
}

impl PairSet {
    pub fn new(owner_id: impl Into<String>, stage: PairStage) -> Self {
        Self {
            owner_id: owner_id.into(),
            stage,
            pairs: Vec::new(),
        }
    }

    /// Builds a set from pairs, dropping later duplicates.
    pub fn from_pairs(
        owner_id: impl Into<String>,
        stage: PairStage,
        pairs: impl IntoIterator<Item = SemanticPair>,
    ) -> Self {
        let mut set = Self::new(owner_id, stage);
        for p in pairs {
            set.insert(p);
        }
        set
    }

    /// Returns false when the pair was already present.
    pub fn insert(&mut self, pair: SemanticPair) -> bool {
        if self.pairs.contains(&pair) {
            return false;
        }
        self.pairs.push(pair);
        true
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct entities in first-occurrence order.
    pub fn entities(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.pairs
            .iter()
            .map(|p| p.entity.as_str())
            .filter(|e| seen.insert(*e))
            .collect()
    }

    pub fn aspects(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.pairs
            .iter()
            .map(|p| p.aspect.as_str())
            .filter(|a| seen.insert(*a))
            .collect()
    }

    pub fn validate(&self, vocab: Option<&Vocabulary>) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.pairs {
            if p.entity.is_empty() || p.aspect.is_empty() {
                return Err(Error::invalid(format!("{}: empty pair member", self.owner_id)));
            }
            if !seen.insert(p) {
                return Err(Error::invalid(format!(
                    "{}: duplicate pair ({}, {})",
                    self.owner_id, p.entity, p.aspect
                )));
            }
        }
        if let (PairStage::Final, Some(v)) = (self.stage, vocab) {
            for p in &self.pairs {
                if !v.entities.contains(&p.entity) || !v.aspects.contains(&p.aspect) {
                    return Err(Error::invalid(format!(
                        "{}: final pair ({}, {}) outside vocabulary",
                        self.owner_id, p.entity, p.aspect
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Merged entity/aspect sets and the surface-to-representative maps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub entities: BTreeSet<String>,
    pub aspects: BTreeSet<String>,
    pub entity_map: BTreeMap<String, String>,
    pub aspect_map: BTreeMap<String, String>,
}

impl Vocabulary {
    /// A vocabulary where every surface is its own representative.
    pub fn identity(
        entities: impl IntoIterator<Item = String>,
        aspects: impl IntoIterator<Item = String>,
    ) -> Self {
        let entities: BTreeSet<String> = entities.into_iter().map(|s| normalize_surface(&s)).collect();
        let aspects: BTreeSet<String> = aspects.into_iter().map(|s| normalize_surface(&s)).collect();
        Self {
            entity_map: entities.iter().map(|e| (e.clone(), e.clone())).collect(),
            aspect_map: aspects.iter().map(|a| (a.clone(), a.clone())).collect(),
            entities,
            aspects,
        }
    }

    /// Maps a surface through the entity map; `None` when unknown.
    pub fn canonical_entity(&self, surface: &str) -> Option<&str> {
        canonical(&self.entity_map, &self.entities, surface)
    }

    pub fn canonical_aspect(&self, surface: &str) -> Option<&str> {
        canonical(&self.aspect_map, &self.aspects, surface)
    }

    /// Maps both sides of a pair; `None` if either side is unknown.
    pub fn canonical_pair(&self, pair: &SemanticPair) -> Option<SemanticPair> {
        Some(SemanticPair {
            entity: self.canonical_entity(&pair.entity)?.to_string(),
            aspect: self.canonical_aspect(&pair.aspect)?.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() || self.aspects.is_empty() {
            return Err(Error::invalid("vocabulary has an empty entity or aspect set"));
        }
        for (name, set, map) in [
            ("entity", &self.entities, &self.entity_map),
            ("aspect", &self.aspects, &self.aspect_map),
        ] {
            for (surface, rep) in map {
                if !set.contains(rep) {
                    return Err(Error::invalid(format!(
                        "{name} map sends {surface:?} to {rep:?}, which is not in the set"
                    )));
                }
                if map.get(rep).is_some_and(|r| r != rep) {
                    return Err(Error::invalid(format!("{name} map is not idempotent at {rep:?}")));
                }
            }
        }
        Ok(())
    }
}

fn canonical<'a>(
    map: &'a BTreeMap<String, String>,
    set: &'a BTreeSet<String>,
    surface: &str,
) -> Option<&'a str> {
    let key = normalize_surface(surface);
    if let Some(rep) = map.get(&key) {
        return Some(rep.as_str());
    }
    set.get(&key).map(String::as_str)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSets {
    pub doc_id: String,
    pub candidate_entities: Vec<String>,
    pub candidate_aspects: Vec<String>,
}

/// Smallest value a stored relevance probability may take.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-owner sigmoid relevance over the full entity set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceVector {
    #[serde(rename = "doc_id", alias = "owner_id")]
    pub owner_id: String,
    pub values: BTreeMap<String, f64>,
}

impl RelevanceVector {
    /// Clamps every value into `[1e-12, 1 - 1e-12]`.
    pub fn new(owner_id: impl Into<String>, values: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            owner_id: owner_id.into(),
            values: values
                .into_iter()
                .map(|(k, v)| (k, v.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &v) in &self.values {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!(
                    "{}: relevance for {k:?} is {v}, outside (0, 1)",
                    self.owner_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_surface("  Atomic  Weight "), "atomic weight");
        assert_eq!(normalize_surface("PFAS"), "pfas");
        assert_eq!(normalize_surface("a"), "a");
        assert_eq!(normalize_surface("\tmetal-organic\n framework"), "metal-organic framework");
        assert_eq!(normalize_surface("   "), "");
    }

    #[test]
    fn pair_rejects_blank_members() {
        assert!(SemanticPair::new(" ", "x").is_err());
        assert!(SemanticPair::new("x", "").is_err());
        let p = SemanticPair::new(" PFAS ", "Detection").unwrap();
        assert_eq!((p.entity.as_str(), p.aspect.as_str()), ("pfas", "detection"));
    }

    #[test]
    fn pair_set_dedupes() {
        let p = SemanticPair::new("a", "x").unwrap();
        let set = PairSet::from_pairs("d1", PairStage::Initial, [p.clone(), p.clone()]);
        assert_eq!(set.len(), 1);
        set.validate(None).unwrap();
    }

    #[test]
    fn final_pairs_must_be_in_vocabulary() {
        let vocab = Vocabulary::identity(["a".to_string()], ["x".to_string()]);
        let ok = PairSet::from_pairs("d", PairStage::Final, [SemanticPair::new("a", "x").unwrap()]);
        ok.validate(Some(&vocab)).unwrap();
        let bad = PairSet::from_pairs("d", PairStage::Final, [SemanticPair::new("b", "x").unwrap()]);
        assert!(bad.validate(Some(&vocab)).is_err());
    }

    #[test]
    fn vocabulary_lookup_normalizes() {
        let mut vocab = Vocabulary::identity(["atomic mass".to_string()], ["x".to_string()]);
        vocab
            .entity_map
            .insert("atomic weight".to_string(), "atomic mass".to_string());
        vocab.validate().unwrap();
        assert_eq!(vocab.canonical_entity(" Atomic  WEIGHT"), Some("atomic mass"));
        assert_eq!(vocab.canonical_entity("atomic mass"), Some("atomic mass"));
        assert_eq!(vocab.canonical_entity("unknown"), None);
    }

    #[test]
    fn vocabulary_validate_catches_non_idempotent_map() {
        let mut vocab = Vocabulary::identity(["a".to_string(), "b".to_string()], ["x".to_string()]);
        vocab.entity_map.insert("a".to_string(), "b".to_string());
        vocab.entity_map.insert("c".to_string(), "a".to_string());
        assert!(vocab.validate().is_err());
    }

    #[test]
    fn document_validation() {
        let mut d = Document::new("d1", "text");
        d.embedding = Some(vec![0.0, 1.0]);
        d.validate(Some(2)).unwrap();
        assert!(d.validate(Some(3)).is_err());
        d.embedding = Some(vec![f64::NAN, 1.0]);
        assert!(d.validate(Some(2)).is_err());
        assert!(Document::new("d2", "  ").validate(None).is_err());
        assert!(ensure_unique_ids(["a", "b", "a"]).is_err());
    }

    #[test]
    fn relevance_vector_is_clamped_open() {
        let rv = RelevanceVector::new("d", [("a".to_string(), 1.0), ("b".to_string(), 0.0)]);
        rv.validate().unwrap();
        assert!(rv.values["a"] < 1.0 && rv.values["b"] > 0.0);
    }
}
