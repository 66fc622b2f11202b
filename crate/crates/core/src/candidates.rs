//! Per-document candidate entity and aspect lists drawn from three sources:
//! the document's own initial pairs, surfaces that occur in its text, and
//! the initial pairs of its nearest neighbors.

use std::collections::{BTreeMap, BTreeSet};

use aho_corasick::{AhoCorasick, MatchKind};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_surface, CandidateSets, Document, PairSet, Vocabulary};
use crate::par::map_bounded;
use crate::text::{dot, l2_normalize};

pub const DEFAULT_KNN: usize = 10;
pub const DEFAULT_M: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborIndex {
    pub k: usize,
    /// doc_id -> neighbors by descending cosine, ties by ascending doc_id.
    pub neighbors: BTreeMap<String, Vec<String>>,
}

impl NeighborIndex {
    pub fn of(&self, doc_id: &str) -> &[String] {
        self.neighbors.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Exact top-k neighbors by cosine similarity.
pub fn build_neighbor_index(docs: &[Document], k: usize) -> Result<NeighborIndex> {
    let mut unit = Vec::with_capacity(docs.len());
    for d in docs {
        let mut v = d
            .embedding
            .clone()
            .ok_or_else(|| Error::invalid(format!("document {} has no embedding", d.doc_id)))?;
        l2_normalize(&mut v);
        unit.push(v);
    }
    if let Some(first) = unit.first() {
        if let Some(bad) = unit.iter().find(|v| v.len() != first.len()) {
            return Err(Error::DimensionMismatch {
                expected: first.len(),
                actual: bad.len(),
            });
        }
    }
    let idx: Vec<usize> = (0..docs.len()).collect();
    let lists = map_bounded(&idx, default_workers(), |&i| {
        let mut scored: Vec<(f64, &str)> = idx
            .iter()
            .filter(|&&j| j != i)
            .map(|&j| (dot(&unit[i], &unit[j]), docs[j].doc_id.as_str()))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.truncate(k);
        scored.into_iter().map(|(_, id)| id.to_string()).collect::<Vec<_>>()
    });
    Ok(NeighborIndex {
        k,
        neighbors: docs.iter().map(|d| d.doc_id.clone()).zip(lists).collect(),
    })
}

/// How a candidate's frequency is counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrequencyMode {
    /// Number of sources (0..=3) that contain the item.
    #[default]
    SourceCount,
    /// Raw occurrences: pairs mentioning it, text matches, and neighbors
    /// whose initial pairs contain it.
    Occurrences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateOptions {
    pub m: usize,
    pub knn: usize,
    pub frequency: FrequencyMode,
    pub use_lexical: bool,
    pub use_pseudo_relevant: bool,
    pub parallelism: usize,
}

impl Default for CandidateOptions {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            knn: DEFAULT_KNN,
            frequency: FrequencyMode::SourceCount,
            use_lexical: true,
            use_pseudo_relevant: true,
            parallelism: 4,
        }
    }
}

/// Word-boundary surface matcher over normalized text.
struct Lexicon {
    matcher: Option<AhoCorasick>,
    canonical: Vec<String>,
}

impl Lexicon {
    fn new(map: &BTreeMap<String, String>, canon: &BTreeSet<String>) -> Result<Self> {
        let mut surfaces: BTreeMap<&str, &str> = canon.iter().map(|c| (c.as_str(), c.as_str())).collect();
        surfaces.extend(map.iter().map(|(s, c)| (s.as_str(), c.as_str())));
        if surfaces.is_empty() {
            return Ok(Self {
                matcher: None,
                canonical: Vec::new(),
            });
        }
        let matcher = AhoCorasick::builder()
            .match_kind(MatchKind::Standard)
            .build(surfaces.keys())
            .map_err(|e| Error::invalid(format!("cannot build surface matcher: {e}")))?;
        Ok(Self {
            matcher: Some(matcher),
            canonical: surfaces.values().map(|c| c.to_string()).collect(),
        })
    }

    /// Canonical item -> number of word-bounded occurrences.
    fn scan(&self, text: &str) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        let Some(matcher) = &self.matcher else {
            return out;
        };
        let hay = normalize_surface(text);
        let bytes = hay.as_bytes();
        let is_word = |i: usize| hay[i..].chars().next().is_some_and(char::is_alphanumeric);
        let before_ok = |s: usize| s == 0 || !hay[..s].chars().next_back().is_some_and(char::is_alphanumeric);
        for m in matcher.find_overlapping_iter(&hay) {
            if before_ok(m.start()) && (m.end() == bytes.len() || !is_word(m.end())) {
                *out.entry(self.canonical[m.pattern().as_usize()].clone()).or_default() += 1;
            }
        }
        out
    }
}

struct Side {
    /// doc_id -> canonical item -> number of initial pairs mentioning it.
    init: BTreeMap<String, BTreeMap<String, usize>>,
    lexicon: Lexicon,
}

/// Shared, read-only state for building candidate lists.
pub struct CandidateBuilder<'a> {
    index: &'a NeighborIndex,
    entities: Side,
    aspects: Side,
    opts: CandidateOptions,
}

impl<'a> CandidateBuilder<'a> {
    pub fn new(
        pairs_init: &BTreeMap<String, PairSet>,
        vocab: &Vocabulary,
        index: &'a NeighborIndex,
        opts: CandidateOptions,
    ) -> Result<Self> {
        let mut ent_init: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        let mut asp_init: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        for (doc_id, set) in pairs_init {
            let e = ent_init.entry(doc_id.clone()).or_default();
            let a = asp_init.entry(doc_id.clone()).or_default();
            for p in &set.pairs {
                if let Some(c) = vocab.canonical_entity(&p.entity) {
                    *e.entry(c.to_string()).or_default() += 1;
                }
                if let Some(c) = vocab.canonical_aspect(&p.aspect) {
                    *a.entry(c.to_string()).or_default() += 1;
                }
            }
        }
        Ok(Self {
            index,
            entities: Side {
                init: ent_init,
                lexicon: Lexicon::new(&vocab.entity_map, &vocab.entities)?,
            },
            aspects: Side {
                init: asp_init,
                lexicon: Lexicon::new(&vocab.aspect_map, &vocab.aspects)?,
            },
            opts,
        })
    }

    fn frequencies(&self, side: &Side, doc: &Document) -> BTreeMap<String, usize> {
        let count = |n: usize| match self.opts.frequency {
            FrequencyMode::SourceCount => 1,
            FrequencyMode::Occurrences => n,
        };
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        if let Some(init) = side.init.get(&doc.doc_id) {
            for (item, &n) in init {
                *freq.entry(item.clone()).or_default() += count(n);
            }
        }
        if self.opts.use_lexical {
            for (item, n) in side.lexicon.scan(&doc.text) {
                *freq.entry(item).or_default() += count(n);
            }
        }
        if self.opts.use_pseudo_relevant {
            let mut pr: BTreeMap<&str, usize> = BTreeMap::new();
            for nb in self.index.of(&doc.doc_id) {
                for item in side.init.get(nb).into_iter().flat_map(BTreeMap::keys) {
                    *pr.entry(item).or_default() += 1;
                }
            }
            for (item, n) in pr {
                *freq.entry(item.to_string()).or_default() += count(n);
            }
        }
        freq
    }

    pub fn entity_frequencies(&self, doc: &Document) -> BTreeMap<String, usize> {
        self.frequencies(&self.entities, doc)
    }

    pub fn aspect_frequencies(&self, doc: &Document) -> BTreeMap<String, usize> {
        self.frequencies(&self.aspects, doc)
    }

    pub fn candidate_entities(&self, doc: &Document) -> Vec<String> {
        top_m(self.entity_frequencies(doc), self.opts.m)
    }

    pub fn candidate_aspects(&self, doc: &Document) -> Vec<String> {
        top_m(self.aspect_frequencies(doc), self.opts.m)
    }

    pub fn for_document(&self, doc: &Document) -> CandidateSets {
        let sets = CandidateSets {
            doc_id: doc.doc_id.clone(),
            candidate_entities: self.candidate_entities(doc),
            candidate_aspects: self.candidate_aspects(doc),
        };
        if sets.candidate_entities.is_empty() || sets.candidate_aspects.is_empty() {
            tracing::warn!(doc = %doc.doc_id, "empty candidate list");
        }
        sets
    }

    pub fn for_corpus(&self, docs: &[Document]) -> BTreeMap<String, CandidateSets> {
        map_bounded(docs, self.opts.parallelism, |d| self.for_document(d))
            .into_iter()
            .map(|c| (c.doc_id.clone(), c))
            .collect()
    }
}

/// Highest frequency first, ties by name.
pub fn top_m(freq: BTreeMap<String, usize>, m: usize) -> Vec<String> {
    let mut items: Vec<(String, usize)> = freq.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    items.into_iter().take(m).map(|(s, _)| s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PairStage, SemanticPair};
    use crate::providers::{Embedder, TokenHashEmbedder};
    use proptest::prelude::*;

    fn embedded(id: &str, text: &str, v: Vec<f64>) -> Document {
        let mut d = Document::new(id, text);
        d.embedding = Some(v);
        d
    }

    fn set(id: &str, pairs: &[(&str, &str)]) -> PairSet {
        PairSet::from_pairs(id, PairStage::Initial, pairs.iter().map(|(e, a)| SemanticPair::new(e, a).unwrap()))
    }

    #[test]
    fn two_documents_neighbor_each_other() {
        let docs = [embedded("a", "x", vec![1.0, 0.0]), embedded("b", "y", vec![0.0, 1.0])];
        let idx = build_neighbor_index(&docs, 10).unwrap();
        assert_eq!(idx.of("a"), ["b".to_string()]);
        assert_eq!(idx.of("b"), ["a".to_string()]);
        let one = build_neighbor_index(&docs[..1], 10).unwrap();
        assert!(one.of("a").is_empty());
    }

    #[test]
    fn duplicate_embeddings_tie_break_by_id() {
        let docs = [
            embedded("q", "x", vec![1.0, 0.0]),
            embedded("c", "x", vec![1.0, 0.0]),
            embedded("b", "x", vec![1.0, 0.0]),
            embedded("a", "x", vec![0.0, 1.0]),
        ];
        let idx = build_neighbor_index(&docs, 2).unwrap();
        assert_eq!(idx.of("q"), ["b".to_string(), "c".to_string()]);
        assert!(build_neighbor_index(&[Document::new("z", "no vector")], 3).is_err());
    }

    #[test]
    fn topic_groups_mostly_neighbor_within_group() {
        let emb = TokenHashEmbedder::new(128, 9).unwrap();
        let topics = [
            "zeolite catalysis pore acidity framework",
            "protein folding chaperone misfold aggregate",
            "graphene conductivity lattice phonon sheet",
        ];
        let mut docs = Vec::new();
        for (g, t) in topics.iter().enumerate() {
            let words: Vec<&str> = t.split(' ').collect();
            for i in 0..12 {
                let text = format!("{} {} {} filler{} noise{}", words[i % 5], words[(i + 1) % 5], words[(i + 2) % 5], i, g * 100 + i);
                let v = emb.embed(std::slice::from_ref(&text)).unwrap().remove(0);
                docs.push(embedded(&format!("g{g}-{i:02}"), &text, v));
            }
        }
        let idx = build_neighbor_index(&docs, 10).unwrap();
        let (mut same, mut total) = (0, 0);
        for (id, nbs) in &idx.neighbors {
            for nb in nbs {
                total += 1;
                same += usize::from(nb[..2] == id[..2]);
            }
        }
        assert!(same as f64 / total as f64 >= 0.8, "{same}/{total}");
    }

    fn fixture() -> (Vec<Document>, BTreeMap<String, PairSet>, Vocabulary) {
        let docs = vec![
            embedded("d1", "We measure the Atomic  Weight of carbon.", vec![1.0, 0.0]),
            embedded("d2", "carbonate and carbon, carbon", vec![0.9, 0.1]),
            embedded("d3", "unrelated", vec![0.0, 1.0]),
        ];
        let pairs = BTreeMap::from([
            ("d1".to_string(), set("d1", &[("atomic weight", "value")])),
            ("d2".to_string(), set("d2", &[("carbon", "isotope"), ("atomic mass", "value")])),
            ("d3".to_string(), set("d3", &[("water", "density")])),
        ]);
        let mut vocab = Vocabulary::identity(
            ["atomic mass", "carbon", "water"].map(String::from),
            ["value", "isotope", "density"].map(String::from),
        );
        vocab.entity_map.insert("atomic weight".into(), "atomic mass".into());
        (docs, pairs, vocab)
    }

    #[test]
    fn three_sources_are_counted_per_source() {
        let (docs, pairs, vocab) = fixture();
        let idx = build_neighbor_index(&docs, 1).unwrap();
        let b = CandidateBuilder::new(&pairs, &vocab, &idx, CandidateOptions::default()).unwrap();
        let f = b.entity_frequencies(&docs[0]);
        // init (via synonym) + lexical + neighbor d2.
        assert_eq!(f["atomic mass"], 3);
        // lexical + neighbor; "carbonate" is not a word-bounded match.
        assert_eq!(f["carbon"], 2);
        assert!(!f.contains_key("water"));
        assert_eq!(b.candidate_entities(&docs[0]), vec!["atomic mass", "carbon"]);

        let occ = CandidateBuilder::new(
            &pairs,
            &vocab,
            &idx,
            CandidateOptions {
                frequency: FrequencyMode::Occurrences,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(occ.entity_frequencies(&docs[1])["carbon"], 3);
    }

    #[test]
    fn m_one_tie_breaks_by_name() {
        assert_eq!(top_m(BTreeMap::from([("b".into(), 2), ("a".into(), 2)]), 1), vec!["a"]);
        assert_eq!(top_m(BTreeMap::from([("b".into(), 3), ("a".into(), 2)]), 1), vec!["b"]);
    }

    #[test]
    fn candidates_cover_initial_pairs_and_are_canonical() {
        let (docs, pairs, vocab) = fixture();
        let idx = build_neighbor_index(&docs, 2).unwrap();
        let b = CandidateBuilder::new(&pairs, &vocab, &idx, CandidateOptions::default()).unwrap();
        for (id, c) in b.for_corpus(&docs) {
            for p in &pairs[&id].pairs {
                assert!(c.candidate_entities.contains(&vocab.canonical_entity(&p.entity).unwrap().to_string()));
                assert!(c.candidate_aspects.contains(&vocab.canonical_aspect(&p.aspect).unwrap().to_string()));
            }
            for e in &c.candidate_entities {
                assert_eq!(vocab.canonical_entity(e), Some(e.as_str()));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn size_cap_and_pseudo_relevant_monotonicity(
            doc_pairs in prop::collection::vec(prop::collection::vec((0usize..8, 0usize..6), 0..5), 2..8),
            m in 1usize..6,
            k in 1usize..4,
            seed in 0u64..50,
        ) {
            let ents: Vec<String> = (0..8).map(|i| format!("ent{i}")).collect();
            let asps: Vec<String> = (0..6).map(|i| format!("asp{i}")).collect();
            let vocab = Vocabulary::identity(ents.clone(), asps.clone());
            let emb = TokenHashEmbedder::new(16, seed).unwrap();
            let mut docs = Vec::new();
            let mut pairs = BTreeMap::new();
            for (i, ps) in doc_pairs.iter().enumerate() {
                let id = format!("d{i}");
                let text = format!("text {} ent{}", i, (i + seed as usize) % 8);
                let v = emb.embed(std::slice::from_ref(&text)).unwrap().remove(0);
                docs.push(embedded(&id, &text, v));
                let named: Vec<(&str, &str)> = ps.iter().map(|&(e, a)| (ents[e].as_str(), asps[a].as_str())).collect();
                pairs.insert(id.clone(), set(&id, &named));
            }
            let idx = build_neighbor_index(&docs, k).unwrap();
            let opts = CandidateOptions { m, ..Default::default() };
            let with = CandidateBuilder::new(&pairs, &vocab, &idx, opts.clone()).unwrap();
            let without = CandidateBuilder::new(&pairs, &vocab, &idx, CandidateOptions { use_pseudo_relevant: false, ..opts }).unwrap();
            for d in &docs {
                let c = with.for_document(d);
                prop_assert!(c.candidate_entities.len() <= m && c.candidate_aspects.len() <= m);
                let (fw, fo) = (with.entity_frequencies(d), without.entity_frequencies(d));
                for (item, n) in &fo {
                    prop_assert!(fw[item] >= *n);
                }
                prop_assert!(fw.values().all(|&n| (1..=3).contains(&n)));
            }
        }
    }
}
