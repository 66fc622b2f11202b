//! BM25 scoring, neighbor-relative distinctiveness, and the soft labels
//! that weight positive terms in the entity loss.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::candidates::NeighborIndex;
use crate::error::{Error, Result};
use crate::model::{Document, PairSet};
use crate::par::map_bounded;
use crate::text::tokenize;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    ids: HashMap<String, usize>,
    tf: Vec<HashMap<String, u32>>,
    len: Vec<f64>,
    avg_len: f64,
    df: HashMap<String, usize>,
}

impl Bm25Index {
    pub fn build(docs: &[Document]) -> Result<Self> {
        Self::with_params(docs, BM25_K1, BM25_B)
    }

    pub fn with_params(docs: &[Document], k1: f64, b: f64) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::invalid("cannot index an empty corpus"));
        }
        let mut ids = HashMap::new();
        let mut tf = Vec::with_capacity(docs.len());
        let mut len = Vec::with_capacity(docs.len());
        let mut df: HashMap<String, usize> = HashMap::new();
        for (i, d) in docs.iter().enumerate() {
            if ids.insert(d.doc_id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate doc_id {}", d.doc_id)));
            }
            let tokens = tokenize(&d.text);
            len.push(tokens.len() as f64);
            let mut counts: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *counts.entry(t).or_default() += 1;
            }
            for t in counts.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            tf.push(counts);
        }
        let avg_len = len.iter().sum::<f64>() / len.len() as f64;
        if avg_len <= 0.0 {
            return Err(Error::invalid("corpus has no tokens"));
        }
        Ok(Self {
            k1,
            b,
            ids,
            tf,
            len,
            avg_len,
            df,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.tf.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }

    fn doc_index(&self, doc_id: &str) -> Result<usize> {
        self.ids
            .get(doc_id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("document {doc_id} is not indexed")))
    }

    /// BM25 of the entity's tokens (as a query) against one document.
    pub fn score(&self, doc_id: &str, entity: &str) -> Result<f64> {
        Ok(self.score_tokens(self.doc_index(doc_id)?, &tokenize(entity)))
    }

    fn score_tokens(&self, doc: usize, tokens: &[String]) -> f64 {
        let norm = self.k1 * (1.0 - self.b + self.b * self.len[doc] / self.avg_len);
        tokens
            .iter()
            .map(|t| match self.tf[doc].get(t) {
                Some(&f) => {
                    let f = f64::from(f);
                    self.idf(t) * f * (self.k1 + 1.0) / (f + norm)
                }
                None => 0.0,
            })
            .sum()
    }

    fn touches(&self, doc: usize, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.tf[doc].contains_key(t))
    }
}

/// `exp(own) / (1 + sum(exp(neighbors)))`, evaluated with the largest
/// exponent factored out so large scores do not overflow.
pub fn dst_from_scores(own: f64, neighbors: &[f64]) -> f64 {
    let m = neighbors.iter().copied().fold(own.max(0.0), f64::max);
    let denom = (-m).exp() + neighbors.iter().map(|s| (s - m).exp()).sum::<f64>();
    (own - m).exp() / denom
}

/// Distinctiveness of entity `e` for document `d` relative to its neighbors.
pub fn distinctiveness(bm25: &Bm25Index, neighbors: &NeighborIndex, doc_id: &str, entity: &str) -> Result<f64> {
    let tokens = tokenize(entity);
    let d = bm25.doc_index(doc_id)?;
    let nb: Vec<f64> = neighbors
        .of(doc_id)
        .iter()
        .map(|n| Ok(bm25.score_tokens(bm25.doc_index(n)?, &tokens)))
        .collect::<Result<_>>()?;
    Ok(dst_from_scores(bm25.score_tokens(d, &tokens), &nb))
}

/// What the per-document soft-label maximum ranges over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelNormalization {
    /// Max of DST over every entity in the vocabulary.
    #[default]
    FullEntitySet,
    /// Max over the document's own positive entities.
    PositivesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelRecord {
    pub doc_id: String,
    pub labels: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SoftLabelTable {
    pub labels: BTreeMap<String, BTreeMap<String, f64>>,
}

impl SoftLabelTable {
    pub fn get(&self, doc_id: &str, entity: &str) -> Option<f64> {
        self.labels.get(doc_id)?.get(entity).copied()
    }

    pub fn to_records(&self) -> Vec<SoftLabelRecord> {
        self.labels
            .iter()
            .map(|(d, l)| SoftLabelRecord {
                doc_id: d.clone(),
                labels: l.clone(),
            })
            .collect()
    }

    pub fn from_records(records: Vec<SoftLabelRecord>) -> Self {
        Self {
            labels: records.into_iter().map(|r| (r.doc_id, r.labels)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (d, labels) in &self.labels {
            if let Some((e, y)) = labels.iter().find(|(_, &y)| !(y > 0.0 && y <= 1.0)) {
                return Err(Error::invalid(format!("{d}: soft label for {e:?} is {y}, outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Soft-label scorer with a token-to-entity inverted index, so the maximum
/// over the full entity set only evaluates entities that share a token with
/// the document or one of its neighbors. Every other entity scores exactly
/// `1 / (1 + |neighbors|)`.
pub struct SoftLabeler<'a> {
    bm25: &'a Bm25Index,
    neighbors: &'a NeighborIndex,
    entities: Vec<(String, Vec<String>)>,
    postings: HashMap<String, Vec<usize>>,
    normalization: LabelNormalization,
}

impl<'a> SoftLabeler<'a> {
    pub fn new(
        bm25: &'a Bm25Index,
        neighbors: &'a NeighborIndex,
        all_entities: &BTreeSet<String>,
        normalization: LabelNormalization,
    ) -> Self {
        let entities: Vec<(String, Vec<String>)> = all_entities.iter().map(|e| (e.clone(), tokenize(e))).collect();
        let mut postings: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, (_, toks)) in entities.iter().enumerate() {
            for t in toks.iter().collect::<BTreeSet<_>>() {
                postings.entry(t.clone()).or_default().push(i);
            }
        }
        Self {
            bm25,
            neighbors,
            entities,
            postings,
            normalization,
        }
    }

    fn dst_tokens(&self, d: usize, nbs: &[usize], tokens: &[String]) -> f64 {
        let nb: Vec<f64> = nbs.iter().map(|&n| self.bm25.score_tokens(n, tokens)).collect();
        dst_from_scores(self.bm25.score_tokens(d, tokens), &nb)
    }

    /// `max_{e in E} DST(d, e)`.
    pub fn max_dst(&self, doc_id: &str) -> Result<f64> {
        let d = self.bm25.doc_index(doc_id)?;
        let nbs: Vec<usize> = self
            .neighbors
            .of(doc_id)
            .iter()
            .map(|n| self.bm25.doc_index(n))
            .collect::<Result<_>>()?;
        let mut touched: BTreeSet<usize> = BTreeSet::new();
        for doc in std::iter::once(d).chain(nbs.iter().copied()) {
            for t in self.bm25.tf[doc].keys() {
                if let Some(p) = self.postings.get(t) {
                    touched.extend(p);
                }
            }
        }
        let mut best = if touched.len() < self.entities.len() {
            1.0 / (1.0 + nbs.len() as f64)
        } else {
            0.0
        };
        for &i in &touched {
            debug_assert!(nbs.iter().chain([&d]).any(|&x| self.bm25.touches(x, &self.entities[i].1)));
            best = best.max(self.dst_tokens(d, &nbs, &self.entities[i].1));
        }
        Ok(best)
    }

    /// Labels for the document's positive entities.
    pub fn labels(&self, doc_id: &str, positives: &BTreeSet<String>) -> Result<BTreeMap<String, f64>> {
        if positives.is_empty() {
            return Ok(BTreeMap::new());
        }
        let d = self.bm25.doc_index(doc_id)?;
        let nbs: Vec<usize> = self
            .neighbors
            .of(doc_id)
            .iter()
            .map(|n| self.bm25.doc_index(n))
            .collect::<Result<_>>()?;
        let dst: BTreeMap<String, f64> = positives
            .iter()
            .map(|e| (e.clone(), self.dst_tokens(d, &nbs, &tokenize(e))))
            .collect();
        let max = match self.normalization {
            LabelNormalization::FullEntitySet => {
                let local = dst.values().copied().fold(0.0, f64::max);
                self.max_dst(doc_id)?.max(local)
            }
            LabelNormalization::PositivesOnly => dst.values().copied().fold(0.0, f64::max),
        };
        Ok(dst.into_iter().map(|(e, v)| (e, v / max)).collect())
    }
}

/// Soft labels for every document's final entities.
pub fn build_soft_labels(
    docs: &[Document],
    pairs_final: &BTreeMap<String, PairSet>,
    all_entities: &BTreeSet<String>,
    neighbors: &NeighborIndex,
    normalization: LabelNormalization,
    parallelism: usize,
) -> Result<SoftLabelTable> {
    let bm25 = Bm25Index::build(docs)?;
    let labeler = SoftLabeler::new(&bm25, neighbors, all_entities, normalization);
    let results = map_bounded(docs, parallelism, |d| {
        let positives: BTreeSet<String> = pairs_final
            .get(&d.doc_id)
            .map(|s| s.entities().into_iter().map(str::to_string).collect())
            .unwrap_or_default();
        labeler.labels(&d.doc_id, &positives).map(|l| (d.doc_id.clone(), l))
    });
    let table = SoftLabelTable {
        labels: results.into_iter().collect::<Result<_>>()?,
    };
    table.validate()?;
    Ok(table)
}
