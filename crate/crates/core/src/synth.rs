//! Synthetic corpus with planted (entity, aspect) structure, so the whole
//! pipeline can be checked without a real LLM or embedding model.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::model::{Document, PairSet, PairStage, Query, SemanticPair};
use crate::providers::PLANT_TEMPLATE;

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub const fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.min..=self.max)
    }

    fn check(&self, what: &str) -> Result<()> {
        if self.min == 0 || self.min > self.max {
            return Err(Error::invalid(format!("{what}: need 1 <= min <= max, got {}..={}", self.min, self.max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_docs: usize,
    pub n_entities: usize,
    pub n_aspects: usize,
    /// Mean size of each entity's allowed aspect set; sizes are the floor
    /// or ceiling of this value.
    pub aspects_per_entity: f64,
    pub entities_per_doc: Span,
    /// Aspects planted for each entity a document mentions.
    pub aspects_per_doc_entity: Span,
    /// Canonical names (entities and aspects alike) that get a second,
    /// lexically unrelated surface form.
    pub synonym_groups: usize,
    /// Chance that a planted mention uses the alternative surface.
    pub synonym_rate: f64,
    pub queries_per_doc: f64,
    pub pairs_per_query: Span,
    /// A document is relevant when it shares at least this many planted
    /// pairs with the query (capped at the query's size).
    pub qrel_min_shared: usize,
    pub distractor_vocab: usize,
    pub distractor_sentences: Span,
    /// Filler sentences mixed into each query; `min` may be 0.
    pub query_distractor_sentences: Span,
    pub distractor_words: Span,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_docs: 200,
            n_entities: 50,
            n_aspects: 60,
            aspects_per_entity: 6.75,
            entities_per_doc: Span::new(9, 13),
            aspects_per_doc_entity: Span::new(1, 3),
            synonym_groups: 110,
            synonym_rate: 0.5,
            queries_per_doc: 0.25,
            pairs_per_query: Span::new(6, 10),
            qrel_min_shared: 3,
            distractor_vocab: 400,
            distractor_sentences: Span::new(3, 8),
            query_distractor_sentences: Span::new(0, 0),
            distractor_words: Span::new(4, 9),
        }
    }
}

impl SynthSpec {
    /// Reads a JSON spec; omitted fields take their defaults.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let spec: Self = crate::model::load_json(path)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, n) in [
            ("n_docs", self.n_docs),
            ("n_entities", self.n_entities),
            ("n_aspects", self.n_aspects),
            ("distractor_vocab", self.distractor_vocab),
            ("qrel_min_shared", self.qrel_min_shared),
        ] {
            if n == 0 {
                return Err(Error::invalid(format!("{what} must be at least 1")));
            }
        }
        self.entities_per_doc.check("entities_per_doc")?;
        self.aspects_per_doc_entity.check("aspects_per_doc_entity")?;
        self.pairs_per_query.check("pairs_per_query")?;
        self.distractor_words.check("distractor_words")?;
        if self.distractor_sentences.min > self.distractor_sentences.max
            || self.query_distractor_sentences.min > self.query_distractor_sentences.max
        {
            return Err(Error::invalid("distractor sentence range has min > max"));
        }
        if !(self.aspects_per_entity >= 1.0 && self.aspects_per_entity <= self.n_aspects as f64) {
            return Err(Error::invalid(format!(
                "aspects_per_entity {} must lie in [1, n_aspects = {}]",
                self.aspects_per_entity, self.n_aspects
            )));
        }
        if self.entities_per_doc.max > self.n_entities {
            return Err(Error::invalid(format!(
                "up to {} entities per document but only {} entities exist",
                self.entities_per_doc.max, self.n_entities
            )));
        }
        let grid = self.n_entities * self.n_aspects;
        let allowed = (self.n_entities as f64 * self.aspects_per_entity.ceil()) as usize;
        let per_doc = self.entities_per_doc.max * self.aspects_per_doc_entity.max;
        if per_doc > grid {
            return Err(Error::invalid(format!("{per_doc} pairs per document exceed the {grid}-pair entity-aspect grid")));
        }
        if allowed < self.n_aspects {
            return Err(Error::invalid(format!(
                "{} entities with about {} aspects each cannot cover {} aspects",
                self.n_entities, self.aspects_per_entity, self.n_aspects
            )));
        }
        if self.aspects_per_doc_entity.min > self.aspects_per_entity.floor() as usize {
            return Err(Error::invalid("aspects_per_doc_entity.min exceeds the allowed aspects per entity"));
        }
        if !(0.0..=1.0).contains(&self.synonym_rate) || self.queries_per_doc < 0.0 {
            return Err(Error::invalid("synonym_rate must lie in [0, 1] and queries_per_doc be non-negative"));
        }
        if self.synonym_groups > self.n_entities + self.n_aspects {
            return Err(Error::invalid("more synonym groups than canonical names"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub docs: Vec<Document>,
    /// Canonical planted pairs per document.
    pub gold_pairs: BTreeMap<String, PairSet>,
    pub queries: Vec<Query>,
    pub query_pairs: BTreeMap<String, PairSet>,
    pub qrels: Qrels,
    /// Alternative surface to canonical name.
    pub synonyms: BTreeMap<String, String>,
    pub entities: BTreeSet<String>,
    pub aspects: BTreeSet<String>,
    /// Each entity's allowed aspects.
    pub allowed: BTreeMap<String, BTreeSet<String>>,
}

impl SynthCorpus {
    /// Mean number of distinct aspects each entity appears with.
    pub fn mean_aspects_per_entity(&self) -> f64 {
        let mut per: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for set in self.gold_pairs.values() {
            for p in &set.pairs {
                per.entry(&p.entity).or_default().insert(&p.aspect);
            }
        }
        per.values().map(|s| s.len() as f64).sum::<f64>() / per.len().max(1) as f64
    }

    pub fn mean_pairs_per_doc(&self) -> f64 {
        self.gold_pairs.values().map(PairSet::len).sum::<usize>() as f64 / self.docs.len().max(1) as f64
    }
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];
const CODAS: &[&str] = &["", "", "n", "r", "x", "l"];

/// Pronounceable pseudo-words, unique across every call on one generator.
struct Words<'r> {
    rng: &'r mut ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Words<'_> {
    fn fresh(&mut self, syllables: Span) -> String {
        loop {
            let n = syllables.sample(&mut *self.rng);
            let mut w = String::new();
            for _ in 0..n {
                w.push_str(ONSETS.choose(&mut *self.rng).expect("non-empty"));
                w.push_str(VOWELS.choose(&mut *self.rng).expect("non-empty"));
            }
            w.push_str(CODAS.choose(&mut *self.rng).expect("non-empty"));
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn many(&mut self, n: usize, syllables: Span) -> Vec<String> {
        (0..n).map(|_| self.fresh(syllables)).collect()
    }
}

fn filler(vocab: &[String], words: Span, rng: &mut ChaCha8Rng) -> String {
    let n = words.sample(rng);
    let mut s = (0..n).map(|_| vocab.choose(rng).expect("non-empty").as_str()).collect::<Vec<_>>().join(" ");
    if let Some(c) = s.get_mut(0..1) {
        c.make_ascii_uppercase();
    }
    s.push('.');
    s
}

fn render_pair(entity: &str, aspect: &str) -> String {
    PLANT_TEMPLATE.replace("{entity}", entity).replace("{aspect}", aspect)
}

/// Generates the corpus; a pure function of the spec.
pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let (entities, aspects, distractors, synonyms) = {
        let mut words = Words {
            rng: &mut rng,
            used: ["entity", "aspect"].iter().map(|s| s.to_string()).collect(),
        };
        let entities = words.many(spec.n_entities, Span::new(2, 3));
        let aspects = words.many(spec.n_aspects, Span::new(2, 3));
        let distractors = words.many(spec.distractor_vocab, Span::new(1, 3));
        let mut names: Vec<&String> = entities.iter().chain(&aspects).collect();
        names.shuffle(&mut *words.rng);
        let mut synonyms = BTreeMap::new();
        for name in names.into_iter().take(spec.synonym_groups) {
            let alt = words.fresh(Span::new(2, 3));
            synonyms.insert(name.clone(), alt);
        }
        (entities, aspects, distractors, synonyms)
    };

    // Allowed aspect sets, then make every aspect reachable.
    let base = spec.aspects_per_entity.floor() as usize;
    let frac = spec.aspects_per_entity - base as f64;
    let mut allowed: Vec<Vec<usize>> = (0..spec.n_entities)
        .map(|_| {
            let size = (base + usize::from(rng.random_bool(frac))).min(spec.n_aspects);
            let mut v = index::sample(&mut rng, spec.n_aspects, size).into_vec();
            v.sort_unstable();
            v
        })
        .collect();
    let mut uses = vec![0usize; spec.n_aspects];
    allowed.iter().flatten().for_each(|&a| uses[a] += 1);
    for a in 0..spec.n_aspects {
        if uses[a] > 0 {
            continue;
        }
        // Swap `a` in for some aspect another entity also allows.
        let mut order: Vec<usize> = (0..spec.n_entities).collect();
        order.shuffle(&mut rng);
        let (e, slot) = order
            .into_iter()
            .find_map(|e| allowed[e].iter().position(|&x| uses[x] > 1).map(|s| (e, s)))
            .ok_or_else(|| Error::invalid("cannot cover every aspect with the allowed-set sizes"))?;
        uses[allowed[e][slot]] -= 1;
        allowed[e][slot] = a;
        allowed[e].sort_unstable();
        uses[a] = 1;
    }

    // Planted pairs per document.
    let mut doc_pairs: Vec<Vec<(usize, usize)>> = (0..spec.n_docs)
        .map(|_| {
            let k = spec.entities_per_doc.sample(&mut rng);
            let mut ents = index::sample(&mut rng, spec.n_entities, k).into_vec();
            ents.sort_unstable();
            let mut pairs = Vec::new();
            for e in ents {
                let j = spec.aspects_per_doc_entity.sample(&mut rng).min(allowed[e].len());
                for &ai in allowed[e].choose_multiple(&mut rng, j) {
                    pairs.push((e, ai));
                }
            }
            pairs
        })
        .collect();
    // Every allowed pair occurs somewhere.
    let mut seen: BTreeSet<(usize, usize)> = doc_pairs.iter().flatten().copied().collect();
    for e in 0..spec.n_entities {
        for &a in &allowed[e] {
            if seen.insert((e, a)) {
                let with_e: Vec<usize> = (0..spec.n_docs).filter(|&d| doc_pairs[d].iter().any(|p| p.0 == e)).collect();
                let d = match with_e.choose(&mut rng) {
                    Some(&d) => d,
                    None => rng.random_range(0..spec.n_docs),
                };
                doc_pairs[d].push((e, a));
            }
        }
    }

    let mut docs = Vec::with_capacity(spec.n_docs);
    let mut gold_pairs = BTreeMap::new();
    let width = spec.n_docs.to_string().len().max(4);
    for (i, pairs) in doc_pairs.iter().enumerate() {
        let doc_id = format!("d{i:0width$}");
        let mut sentences: Vec<String> = pairs
            .iter()
            .map(|&(e, a)| {
                let mut surface = |name: &String| match synonyms.get(name) {
                    Some(alt) if rng.random_bool(spec.synonym_rate) => alt.clone(),
                    _ => name.clone(),
                };
                let es = surface(&entities[e]);
                let as_ = surface(&aspects[a]);
                render_pair(&es, &as_)
            })
            .collect();
        for _ in 0..spec.distractor_sentences.sample(&mut rng) {
            sentences.push(filler(&distractors, spec.distractor_words, &mut rng));
        }
        sentences.shuffle(&mut rng);
        let set = PairSet::from_pairs(
            &doc_id,
            PairStage::Final,
            pairs.iter().map(|&(e, a)| SemanticPair {
                entity: entities[e].clone(),
                aspect: aspects[a].clone(),
            }),
        );
        docs.push(Document::new(&doc_id, sentences.join(" ")));
        gold_pairs.insert(doc_id, set);
    }

    // Queries: a random subset of one target document's pairs.
    let n_queries = ((spec.n_docs as f64 * spec.queries_per_doc).round() as usize).max(1);
    let mut targets: Vec<usize> = Vec::new();
    while targets.len() < n_queries {
        let mut order: Vec<usize> = (0..spec.n_docs).collect();
        order.shuffle(&mut rng);
        targets.extend(order.into_iter().take(n_queries - targets.len()));
    }
    let qwidth = n_queries.to_string().len().max(3);
    let mut queries = Vec::with_capacity(n_queries);
    let mut query_pairs = BTreeMap::new();
    let mut qrels = Qrels::default();
    for (qi, &t) in targets.iter().enumerate() {
        let query_id = format!("q{qi:0qwidth$}");
        let gold = &gold_pairs[&docs[t].doc_id];
        let n = spec.pairs_per_query.sample(&mut rng).min(gold.len());
        let chosen: Vec<SemanticPair> = gold.pairs.choose_multiple(&mut rng, n).cloned().collect();
        let mut sentences: Vec<String> = chosen.iter().map(|p| render_pair(&p.entity, &p.aspect)).collect();
        for _ in 0..spec.query_distractor_sentences.sample(&mut rng) {
            sentences.push(filler(&distractors, spec.distractor_words, &mut rng));
        }
        sentences.shuffle(&mut rng);
        let text = sentences.join(" ");
        let need = spec.qrel_min_shared.min(chosen.len());
        let relevant: BTreeSet<String> = gold_pairs
            .iter()
            .filter(|(_, set)| chosen.iter().filter(|p| set.pairs.contains(p)).count() >= need)
            .map(|(id, _)| id.clone())
            .collect();
        qrels.0.insert(query_id.clone(), relevant);
        query_pairs.insert(query_id.clone(), PairSet::from_pairs(&query_id, PairStage::Final, chosen));
        queries.push(Query::new(query_id, text));
    }

    Ok(SynthCorpus {
        docs,
        gold_pairs,
        queries,
        query_pairs,
        qrels,
        synonyms: synonyms.into_iter().map(|(canon, alt)| (alt, canon)).collect(),
        allowed: (0..spec.n_entities)
            .map(|e| (entities[e].clone(), allowed[e].iter().map(|&a| aspects[a].clone()).collect()))
            .collect(),
        entities: entities.into_iter().collect(),
        aspects: aspects.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairgen::{generate_pairs_for_corpus, GenerationOptions, Grounding};
    use crate::providers::OracleExtractor;

    fn tiny() -> SynthSpec {
        SynthSpec {
            n_docs: 1,
            n_entities: 1,
            n_aspects: 1,
            aspects_per_entity: 1.0,
            entities_per_doc: Span::new(1, 1),
            aspects_per_doc_entity: Span::new(1, 1),
            synonym_groups: 0,
            pairs_per_query: Span::new(1, 1),
            ..SynthSpec::default()
        }
    }

    #[test]
    fn single_pair_corpus() {
        let c = generate_corpus(&tiny()).unwrap();
        assert_eq!(c.docs.len(), 1);
        assert_eq!(c.gold_pairs.values().next().unwrap().len(), 1);
        assert_eq!(c.queries.len(), 1);
        assert_eq!(c.qrels.0.values().next().unwrap().len(), 1);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bad = [
            SynthSpec { entities_per_doc: Span::new(1, 60), ..SynthSpec::default() },
            SynthSpec { n_entities: 2, n_aspects: 2, entities_per_doc: Span::new(1, 2), aspects_per_doc_entity: Span::new(1, 3), aspects_per_entity: 2.0, ..SynthSpec::default() },
            SynthSpec { n_docs: 0, ..SynthSpec::default() },
            SynthSpec { aspects_per_entity: 0.5, ..SynthSpec::default() },
            SynthSpec { n_entities: 2, n_aspects: 40, entities_per_doc: Span::new(1, 2), aspects_per_entity: 6.0, ..SynthSpec::default() },
        ];
        for s in bad {
            assert!(generate_corpus(&s).is_err(), "{s:?}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = serde_json::to_string(&generate_corpus(&SynthSpec::default()).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_corpus(&SynthSpec::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_string(&generate_corpus(&SynthSpec { seed: 8, ..SynthSpec::default() }).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shape_matches_spec() {
        let c = generate_corpus(&SynthSpec::default()).unwrap();
        assert_eq!(c.docs.len(), 200);
        assert_eq!(c.entities.len(), 50);
        assert_eq!(c.aspects.len(), 60);
        let used_a: BTreeSet<&str> = c.gold_pairs.values().flat_map(|s| s.aspects()).collect();
        let used_e: BTreeSet<&str> = c.gold_pairs.values().flat_map(|s| s.entities()).collect();
        assert_eq!(used_a.len(), 60);
        assert_eq!(used_e.len(), 50);
        let m = c.mean_aspects_per_entity();
        assert!((m - 6.75).abs() < 0.5, "{m}");
        assert!(c.mean_pairs_per_doc() > 15.0);
        assert_eq!(c.queries.len(), 50);
        for (qid, rel) in &c.qrels.0 {
            assert!(!rel.is_empty(), "{qid}");
        }
        // Every planted pair respects the entity's allowed aspects.
        for set in c.gold_pairs.values() {
            for p in &set.pairs {
                assert!(c.allowed[&p.entity].contains(&p.aspect));
            }
        }
    }

    #[test]
    fn oracle_recovers_planted_pairs() {
        let c = generate_corpus(&SynthSpec::default()).unwrap();
        let oracle = OracleExtractor::new(c.synonyms.clone());
        let out = generate_pairs_for_corpus(&c.docs, Grounding::ZeroShot, &oracle, &GenerationOptions::default()).unwrap();
        for (id, gold) in &c.gold_pairs {
            let got: BTreeSet<(String, String)> = out.pairs[id]
                .pairs
                .iter()
                .map(|p| {
                    let canon = |s: &String| c.synonyms.get(s).cloned().unwrap_or_else(|| s.clone());
                    (canon(&p.entity), canon(&p.aspect))
                })
                .collect();
            let want: BTreeSet<(String, String)> = gold.pairs.iter().map(|p| (p.entity.clone(), p.aspect.clone())).collect();
            assert_eq!(got, want, "{id}");
        }
    }
}
