//! Online inference: query pair construction, pairwise and entity-level
//! similarity, and reciprocal-rank fusion over a base-retriever pool.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::candidates::top_m;
use crate::error::{Error, Result};
use crate::model::{CandidateSets, Document, PairSet, PairStage, Query, RelevanceVector, SemanticPair, Vocabulary};
use crate::pairgen::{generate_for_text, GenerationOptions, Grounding};
use crate::par::map_bounded;
use crate::predictors::{aspect_scores, relevance_vector, score_all, top_k, MlpModel, TargetSpace};
use crate::providers::LlmProvider;
use crate::text::cosine;

pub const DEFAULT_N_E: usize = 10;
pub const DEFAULT_N_A: usize = 5;
pub const DEFAULT_POOL: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Query pairs from the LLM with predictor-derived candidates.
    #[serde(alias = "pairsem")]
    Llm,
    /// Query pairs straight from the predictors.
    #[serde(alias = "pairsem_fast")]
    Fast,
    /// Base dense retriever only.
    Base,
}

impl std::str::FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "llm" | "pairsem" => Ok(Self::Llm),
            "fast" | "pairsem_fast" => Ok(Self::Fast),
            "base" => Ok(Self::Base),
            _ => Err(Error::invalid(format!("unknown query mode {s:?} (expected llm, fast or base)"))),
        }
    }
}

impl std::fmt::Display for QueryMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Llm => "llm",
            Self::Fast => "fast",
            Self::Base => "base",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub mode: QueryMode,
    pub n_e: usize,
    pub n_a: usize,
    pub rerank_pool_size: usize,
    /// Normalize both relevance vectors to distributions before the
    /// log inner product.
    pub normalize_entity: bool,
    /// Candidate list length for query-side LLM generation.
    pub m: usize,
    pub parallelism: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: QueryMode::Fast,
            n_e: DEFAULT_N_E,
            n_a: DEFAULT_N_A,
            rerank_pool_size: DEFAULT_POOL,
            normalize_entity: false,
            m: crate::candidates::DEFAULT_M,
            parallelism: 4,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_e == 0 || self.n_a == 0 {
            return Err(Error::invalid("N_e and N_a must be at least 1"));
        }
        if self.rerank_pool_size == 0 {
            return Err(Error::invalid("rerank pool size must be at least 1"));
        }
        if self.m == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDoc {
    pub doc_id: String,
    pub sim_base: f64,
    pub sim_pair: f64,
    pub sim_entity: f64,
    pub fused: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRanking {
    pub query_id: String,
    pub entries: Vec<RankedDoc>,
}

impl ScoredRanking {
    pub fn doc_ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }
}

/// Raw component scores of one pool document.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentScores {
    pub doc_id: String,
    pub sim_base: f64,
    pub sim_pair: f64,
    pub sim_entity: f64,
}

/// The two trained predictors with the target spaces they score against.
#[derive(Debug, Clone, Copy)]
pub struct Predictors<'a> {
    pub entity_model: &'a MlpModel,
    pub aspect_model: &'a MlpModel,
    pub entities: &'a TargetSpace,
    pub aspects: &'a TargetSpace,
}

fn query_embedding(q: &Query) -> Result<&[f64]> {
    q.embedding
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("query {} has no embedding", q.query_id)))
}

/// Top `n_e` entities by ŷ(e|q), then the top `n_a` aspects for each by
/// ŷ(a|q,e). Ties go to the smaller name.
pub fn query_pairs_fast(q: &Query, p: Predictors<'_>, n_e: usize, n_a: usize) -> Result<PairSet> {
    let eq = query_embedding(q)?;
    let entity_scores = score_all(p.entity_model, eq, p.entities)?;
    let mut pairs = Vec::with_capacity(n_e * n_a);
    for ei in top_k(&entity_scores, p.entities.names(), n_e) {
        let name = &p.entities.names()[ei];
        let ee = p.entities.vector(name).expect("own name");
        let scores = aspect_scores(p.aspect_model, eq, ee.as_slice().expect("row is contiguous"), p.aspects)?;
        for ai in top_k(&scores, p.aspects.names(), n_a) {
            pairs.push(SemanticPair {
                entity: name.clone(),
                aspect: p.aspects.names()[ai].clone(),
            });
        }
    }
    Ok(PairSet::from_pairs(&q.query_id, PairStage::Final, pairs))
}

/// The `m` entities and aspects occurring in the most documents, as a
/// query-side fallback when no predictors are available.
pub fn global_candidates(pairs: &BTreeMap<String, PairSet>, m: usize) -> (Vec<String>, Vec<String>) {
    let mut ef: BTreeMap<String, usize> = BTreeMap::new();
    let mut af: BTreeMap<String, usize> = BTreeMap::new();
    for set in pairs.values() {
        for e in set.entities().into_iter().collect::<BTreeSet<_>>() {
            *ef.entry(e.to_string()).or_default() += 1;
        }
        for a in set.aspects().into_iter().collect::<BTreeSet<_>>() {
            *af.entry(a.to_string()).or_default() += 1;
        }
    }
    (top_m(ef, m), top_m(af, m))
}

/// Query-side candidate lists: top-`m` entities by ŷ(e|q) and top-`m`
/// aspects by their best ŷ(a|q,e) over every entity.
pub fn query_candidates(q: &Query, predictors: Option<Predictors<'_>>, fallback: &(Vec<String>, Vec<String>), m: usize) -> Result<CandidateSets> {
    let Some(p) = predictors else {
        return Ok(CandidateSets {
            doc_id: q.query_id.clone(),
            candidate_entities: fallback.0.iter().take(m).cloned().collect(),
            candidate_aspects: fallback.1.iter().take(m).cloned().collect(),
        });
    };
    let eq = query_embedding(q)?;
    let es = score_all(p.entity_model, eq, p.entities)?;
    let mut best = vec![f64::NEG_INFINITY; p.aspects.len()];
    for name in p.entities.names() {
        let ee = p.entities.vector(name).expect("own name");
        let s = aspect_scores(p.aspect_model, eq, ee.as_slice().expect("row is contiguous"), p.aspects)?;
        best.iter_mut().zip(s).for_each(|(b, v)| *b = b.max(v));
    }
    let pick = |scores: &[f64], names: &[String]| top_k(scores, names, m).into_iter().map(|i| names[i].clone()).collect();
    Ok(CandidateSets {
        doc_id: q.query_id.clone(),
        candidate_entities: pick(&es, p.entities.names()),
        candidate_aspects: pick(&best, p.aspects.names()),
    })
}

/// Candidate-grounded generation applied to the query text.
pub fn query_pairs_llm(
    q: &Query,
    candidates: CandidateSets,
    vocab: &Vocabulary,
    llm: &dyn LlmProvider,
    opts: &GenerationOptions,
) -> Result<PairSet> {
    if q.text.trim().is_empty() {
        return Err(Error::invalid(format!("query {} has empty text", q.query_id)));
    }
    let doc = Document::new(&q.query_id, &q.text);
    let map = BTreeMap::from([(q.query_id.clone(), candidates)]);
    let out = generate_for_text(&doc, Grounding::Candidates { candidates: &map, vocab }, llm, opts)?;
    Ok(out.pairs)
}

/// Scores document pair sets against one query pair set, caching aspect
/// cosines across documents.
pub struct PairMatcher<'a> {
    /// Query pairs as (entity, index into `aspects`).
    query: Vec<(&'a str, usize)>,
    aspects: &'a TargetSpace,
    cache: HashMap<(usize, usize), f64>,
}

impl<'a> PairMatcher<'a> {
    pub fn new(pq: &'a PairSet, aspects: &'a TargetSpace) -> Result<Self> {
        let query = pq
            .pairs
            .iter()
            .map(|p| Ok((p.entity.as_str(), aspect_index(aspects, &p.aspect)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            query,
            aspects,
            cache: HashMap::new(),
        })
    }

    fn cos(&mut self, a: usize, b: usize) -> f64 {
        let key = (a.min(b), a.max(b));
        let aspects = self.aspects;
        *self.cache.entry(key).or_insert_with(|| {
            let row = |i: usize| aspects.matrix().row(i);
            cosine_view(row(key.0), row(key.1))
        })
    }

    /// `(1/|Pq|) Σ max over Pd of 1[e=e']·cos(a, a')`; 0 for an empty
    /// query set or an empty document set.
    pub fn score(&mut self, pd: &PairSet) -> Result<f64> {
        if self.query.is_empty() || pd.is_empty() {
            return Ok(0.0);
        }
        let doc: Vec<(&str, usize)> = pd
            .pairs
            .iter()
            .map(|p| Ok((p.entity.as_str(), aspect_index(self.aspects, &p.aspect)?)))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        for qi in 0..self.query.len() {
            let (qe, qa) = self.query[qi];
            let mut best = f64::NEG_INFINITY;
            for &(de, da) in &doc {
                let term = if de == qe { self.cos(qa, da) } else { 0.0 };
                best = best.max(term);
            }
            total += best;
        }
        Ok(total / self.query.len() as f64)
    }
}

fn aspect_index(aspects: &TargetSpace, name: &str) -> Result<usize> {
    aspects
        .index_of(name)
        .ok_or_else(|| Error::invalid(format!("aspect {name:?} has no embedding")))
}

fn cosine_view(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => cosine(a, b),
        _ => cosine(&a.to_vec(), &b.to_vec()),
    }
}

/// Pairwise semantic similarity of a query and a document.
pub fn sim_pair(pq: &PairSet, pd: &PairSet, aspects: &TargetSpace) -> Result<f64> {
    PairMatcher::new(pq, aspects)?.score(pd)
}

/// `Σ_e ŷ_q,e · ln ŷ_d,e`, optionally after normalizing both vectors to
/// sum to one.
pub fn sim_entity(yq: &RelevanceVector, yd: &RelevanceVector, normalize: bool) -> Result<f64> {
    if yq.values.len() != yd.values.len() || yq.values.keys().ne(yd.values.keys()) {
        return Err(Error::invalid(format!(
            "relevance vectors {} and {} cover different entities",
            yq.owner_id, yd.owner_id
        )));
    }
    yq.validate()?;
    yd.validate()?;
    let (sq, sd) = if normalize {
        (yq.values.values().sum::<f64>(), yd.values.values().sum::<f64>())
    } else {
        (1.0, 1.0)
    };
    Ok(yq
        .values
        .values()
        .zip(yd.values.values())
        .map(|(&q, &d)| (q / sq) * (d / sd).ln())
        .sum())
}

/// 1-based rank of each item under `score` descending, ties by doc_id.
fn ranks(items: &[ComponentScores], score: impl Fn(&ComponentScores) -> f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| {
        score(&items[b])
            .total_cmp(&score(&items[a]))
            .then_with(|| items[a].doc_id.cmp(&items[b].doc_id))
    });
    let mut r = vec![0; items.len()];
    for (pos, i) in idx.into_iter().enumerate() {
        r[i] = pos + 1;
    }
    r
}

/// Reciprocal-rank normalization.
pub fn h(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64)
}

/// `h(base) + (h(pair) + h(entity)) / 2` with ranks taken inside the pool.
pub fn fuse_and_rank(query_id: &str, pool: Vec<ComponentScores>) -> Result<ScoredRanking> {
    let mut seen = BTreeSet::new();
    for c in &pool {
        if !seen.insert(c.doc_id.as_str()) {
            return Err(Error::invalid(format!("document {} appears twice in the pool", c.doc_id)));
        }
        if ![c.sim_base, c.sim_pair, c.sim_entity].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("non-finite component score for {}", c.doc_id)));
        }
    }
    let rb = ranks(&pool, |c| c.sim_base);
    let rp = ranks(&pool, |c| c.sim_pair);
    let re = ranks(&pool, |c| c.sim_entity);
    let mut entries: Vec<RankedDoc> = pool
        .into_iter()
        .enumerate()
        .map(|(i, c)| RankedDoc {
            fused: h(rb[i]) + (h(rp[i]) + h(re[i])) / 2.0,
            doc_id: c.doc_id,
            sim_base: c.sim_base,
            sim_pair: c.sim_pair,
            sim_entity: c.sim_entity,
        })
        .collect();
    entries.sort_by(|a, b| {
        b.fused
            .total_cmp(&a.fused)
            .then_with(|| b.sim_base.total_cmp(&a.sim_base))
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    Ok(ScoredRanking {
        query_id: query_id.to_string(),
        entries,
    })
}

/// Everything retrieval reads, produced by the offline stages.
#[derive(Debug, Clone)]
pub struct RetrievalArtifacts {
    pub docs: Vec<Document>,
    pub pairs: BTreeMap<String, PairSet>,
    pub relevance: BTreeMap<String, RelevanceVector>,
    pub entities: TargetSpace,
    pub aspects: TargetSpace,
    pub entity_model: Option<MlpModel>,
    pub aspect_model: Option<MlpModel>,
}

/// LLM access for [`QueryMode::Llm`].
#[derive(Clone, Copy)]
pub struct LlmContext<'a> {
    pub llm: &'a dyn LlmProvider,
    pub vocab: &'a Vocabulary,
    pub opts: &'a GenerationOptions,
}

#[derive(Debug)]
pub struct Retriever {
    art: RetrievalArtifacts,
    cfg: InferenceConfig,
    fallback: (Vec<String>, Vec<String>),
}

fn missing(stage: &str, artifact: &str) -> Error {
    Error::MissingDependency {
        stage: stage.to_string(),
        artifact: artifact.to_string(),
    }
}

impl Retriever {
    pub fn new(art: RetrievalArtifacts, cfg: InferenceConfig) -> Result<Self> {
        cfg.validate()?;
        let dim = art.entities.dim();
        for d in &art.docs {
            d.validate(Some(dim))?;
            if d.embedding.is_none() {
                return Err(Error::invalid(format!("document {} has no embedding", d.doc_id)));
            }
        }
        if cfg.mode != QueryMode::Base {
            let em = art.entity_model.as_ref().ok_or_else(|| missing("train", "the entity model"))?;
            if em.input_dim() != dim || em.output_dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: em.output_dim(),
                });
            }
            for d in &art.docs {
                if !art.pairs.contains_key(&d.doc_id) {
                    return Err(missing("gen-pairs", &format!("final pairs for {}", d.doc_id)));
                }
                if !art.relevance.contains_key(&d.doc_id) {
                    return Err(missing("train", &format!("a relevance vector for {}", d.doc_id)));
                }
            }
        }
        if cfg.mode == QueryMode::Fast && art.aspect_model.is_none() {
            return Err(missing("train", "the aspect model"));
        }
        let fallback = global_candidates(&art.pairs, cfg.m);
        Ok(Self { art, cfg, fallback })
    }

    pub fn config(&self) -> &InferenceConfig {
        &self.cfg
    }

    fn predictors(&self) -> Option<Predictors<'_>> {
        Some(Predictors {
            entity_model: self.art.entity_model.as_ref()?,
            aspect_model: self.art.aspect_model.as_ref()?,
            entities: &self.art.entities,
            aspects: &self.art.aspects,
        })
    }

    /// The top `rerank_pool_size` documents by cosine, best first, ties by
    /// doc_id.
    pub fn base_pool(&self, q: &Query) -> Result<Vec<(usize, f64)>> {
        q.validate(Some(self.art.entities.dim()))?;
        let eq = query_embedding(q)?;
        let mut scored: Vec<(usize, f64)> = self
            .art
            .docs
            .iter()
            .enumerate()
            .map(|(i, d)| (i, cosine(eq, d.embedding.as_deref().expect("checked in new"))))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| self.art.docs[a.0].doc_id.cmp(&self.art.docs[b.0].doc_id)));
        scored.truncate(self.cfg.rerank_pool_size);
        Ok(scored)
    }

    /// Query pairs for the configured mode; empty in base mode.
    pub fn query_pairs(&self, q: &Query, llm: Option<LlmContext<'_>>) -> Result<PairSet> {
        match self.cfg.mode {
            QueryMode::Base => Ok(PairSet::new(&q.query_id, PairStage::Final)),
            QueryMode::Fast => query_pairs_fast(q, self.predictors().expect("checked in new"), self.cfg.n_e, self.cfg.n_a),
            QueryMode::Llm => {
                let ctx = llm.ok_or_else(|| Error::Config("llm query mode needs an LLM provider".into()))?;
                let cands = query_candidates(q, self.predictors(), &self.fallback, self.cfg.m)?;
                query_pairs_llm(q, cands, ctx.vocab, ctx.llm, ctx.opts)
            }
        }
    }

    /// Reranks the base pool with the given query pairs.
    pub fn rerank(&self, q: &Query, pq: &PairSet) -> Result<ScoredRanking> {
        let pool = self.base_pool(q)?;
        let em = self.art.entity_model.as_ref().ok_or_else(|| missing("train", "the entity model"))?;
        let yq = relevance_vector(em, &q.query_id, query_embedding(q)?, &self.art.entities)?;
        let mut matcher = PairMatcher::new(pq, &self.art.aspects)?;
        let mut comps = Vec::with_capacity(pool.len());
        for (i, base) in pool {
            let d = &self.art.docs[i];
            comps.push(ComponentScores {
                doc_id: d.doc_id.clone(),
                sim_base: base,
                sim_pair: matcher.score(&self.art.pairs[&d.doc_id])?,
                sim_entity: sim_entity(&yq, &self.art.relevance[&d.doc_id], self.cfg.normalize_entity)?,
            });
        }
        fuse_and_rank(&q.query_id, comps)
    }

    pub fn retrieve(&self, q: &Query, llm: Option<LlmContext<'_>>) -> Result<ScoredRanking> {
        if self.cfg.mode == QueryMode::Base {
            let entries = self
                .base_pool(q)?
                .into_iter()
                .map(|(i, s)| RankedDoc {
                    doc_id: self.art.docs[i].doc_id.clone(),
                    sim_base: s,
                    sim_pair: 0.0,
                    sim_entity: 0.0,
                    fused: s,
                })
                .collect();
            return Ok(ScoredRanking {
                query_id: q.query_id.clone(),
                entries,
            });
        }
        let pq = self.query_pairs(q, llm)?;
        if pq.is_empty() {
            tracing::warn!(query = %q.query_id, "no query pairs; pair similarity carries no signal");
        }
        self.rerank(q, &pq)
    }

    /// Retrieves every query, in input order.
    pub fn retrieve_all(&self, queries: &[Query], llm: Option<LlmContext<'_>>) -> Result<Vec<ScoredRanking>> {
        map_bounded(queries, self.cfg.parallelism, |q| self.retrieve(q, llm))
            .into_iter()
            .collect()
    }
}

/// Run-file view of rankings truncated to `k`.
pub fn to_run(rankings: &[ScoredRanking], k: usize) -> crate::eval::Run {
    let mut run = crate::eval::Run::default();
    for r in rankings {
        run.0.insert(
            r.query_id.clone(),
            r.entries.iter().take(k).map(|e| (e.doc_id.clone(), e.fused)).collect(),
        );
    }
    run
}
