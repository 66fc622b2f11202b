//! Corpus-level entity/aspect sets: clustering of surfaces, LLM-driven
//! synonym merging, and the surface-to-representative maps.

mod ward;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_surface, PairSet, Vocabulary};
use crate::pairgen::{parse_set_xml, render_cluster_prompt, ClusterSide};
use crate::par::map_bounded;
use crate::providers::{Embedder, LlmProvider};
use crate::text::l2_normalize;

pub use ward::{split_by_size, ward_tree, Merge};

pub const DEFAULT_MAX_CLUSTER_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    /// Sorted, unique surfaces.
    pub members: Vec<String>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynonymSet {
    pub surfaces: Vec<String>,
    pub representative: String,
}

/// Union of entities and of aspects over all pair sets.
pub fn collect_initial_sets(pairs: &BTreeMap<String, PairSet>) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let mut entities = BTreeSet::new();
    let mut aspects = BTreeSet::new();
    for set in pairs.values() {
        for p in &set.pairs {
            entities.insert(normalize_surface(&p.entity));
            aspects.insert(normalize_surface(&p.aspect));
        }
    }
    entities.remove("");
    aspects.remove("");
    if entities.is_empty() || aspects.is_empty() {
        return Err(Error::invalid("no pairs in any document; cannot build a vocabulary"));
    }
    Ok((entities, aspects))
}

/// Ward clustering of the items' L2-normalized embeddings, cut so that no
/// cluster exceeds `max_size` members.
pub fn agglomerative_cluster(items: &[String], max_size: usize, embedder: &dyn Embedder) -> Result<Vec<Cluster>> {
    if max_size == 0 {
        return Err(Error::invalid("max cluster size must be positive"));
    }
    let unique: Vec<String> = items.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.is_empty() {
        return Err(Error::invalid("nothing to cluster"));
    }
    let mut vectors = embedder.embed(&unique)?;
    for v in &mut vectors {
        if v.len() != embedder.dim() {
            return Err(Error::DimensionMismatch {
                expected: embedder.dim(),
                actual: v.len(),
            });
        }
        l2_normalize(v);
    }
    // `unique` is sorted, so the index doubles as the lexicographic key.
    let keys: Vec<usize> = (0..unique.len()).collect();
    let merges = ward_tree(&vectors, &keys);
    let mut clusters: Vec<Cluster> = split_by_size(unique.len(), &merges, max_size)
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            let dim = vectors[0].len();
            let mut centroid = vec![0.0; dim];
            for &i in &idx {
                centroid.iter_mut().zip(&vectors[i]).for_each(|(c, x)| *c += x);
            }
            centroid.iter_mut().for_each(|c| *c /= idx.len() as f64);
            Cluster {
                members: idx.iter().map(|&i| unique[i].clone()).collect(),
                centroid,
            }
        })
        .collect();
    clusters.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    Ok(clusters)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeOutcome {
    pub sets: Vec<SynonymSet>,
    /// The provider failed or the answer had no usable set.
    pub failed: bool,
}

/// Asks the LLM which members of a cluster are synonyms. Members the
/// answer leaves out become singletons; surfaces the answer invents are
/// ignored. Any failure falls back to all singletons.
pub fn merge_cluster_synonyms(cluster: &Cluster, side: ClusterSide, llm: &dyn LlmProvider) -> MergeOutcome {
    let singletons = |members: &[String]| -> Vec<SynonymSet> {
        members
            .iter()
            .map(|m| SynonymSet {
                surfaces: vec![m.clone()],
                representative: m.clone(),
            })
            .collect()
    };
    if cluster.members.len() <= 1 {
        return MergeOutcome {
            sets: singletons(&cluster.members),
            failed: false,
        };
    }
    let req = render_cluster_prompt(&cluster.members, side);
    let parsed = match llm.generate(&req) {
        Ok(c) => parse_set_xml(&c.text),
        Err(e) => {
            tracing::warn!(error = %e, size = cluster.members.len(), "synonym merge call failed; keeping singletons");
            return MergeOutcome {
                sets: singletons(&cluster.members),
                failed: true,
            };
        }
    };
    if parsed.sets.is_empty() {
        tracing::warn!(size = cluster.members.len(), "unparseable synonym answer; keeping singletons");
        return MergeOutcome {
            sets: singletons(&cluster.members),
            failed: true,
        };
    }
    let member_set: BTreeSet<&str> = cluster.members.iter().map(String::as_str).collect();
    let mut claimed: BTreeSet<String> = BTreeSet::new();
    let mut sets = Vec::new();
    for (surfaces, rep) in parsed.sets {
        let surfaces: Vec<String> = surfaces
            .into_iter()
            .filter(|s| member_set.contains(s.as_str()))
            .filter(|s| claimed.insert(s.clone()))
            .collect();
        if !surfaces.is_empty() {
            sets.push(SynonymSet {
                surfaces,
                representative: rep,
            });
        }
    }
    let leftovers: Vec<String> = cluster.members.iter().filter(|m| !claimed.contains(*m)).cloned().collect();
    sets.extend(singletons(&leftovers));
    MergeOutcome { sets, failed: false }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabOptions {
    pub max_cluster_size: usize,
    pub parallelism: usize,
}

impl Default for VocabOptions {
    fn default() -> Self {
        Self {
            max_cluster_size: DEFAULT_MAX_CLUSTER_SIZE,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SideStats {
    pub initial: usize,
    pub merged: usize,
    pub clusters: usize,
    /// cluster size -> number of clusters
    pub cluster_size_histogram: BTreeMap<usize, usize>,
    pub llm_failures: usize,
    /// Synonym sets folded into another set through a shared representative.
    pub representative_collisions: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VocabStats {
    pub entities: SideStats,
    pub aspects: SideStats,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Folds synonym sets into a canonical set and a total, idempotent map.
///
/// Surfaces and representatives are linked into components; each component
/// is named by its lexicographically smallest representative. This also
/// resolves collisions (two sets sharing a representative) and chains (a
/// representative that is itself a surface of another set).
pub fn fold_synonym_sets(sets: &[SynonymSet]) -> (BTreeSet<String>, BTreeMap<String, String>, usize) {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sets {
        for name in s.surfaces.iter().chain(std::iter::once(&s.representative)) {
            let next = ids.len();
            ids.entry(name.as_str()).or_insert(next);
        }
    }
    let mut uf = UnionFind((0..ids.len()).collect());
    for s in sets {
        let r = ids[s.representative.as_str()];
        for surface in &s.surfaces {
            uf.union(r, ids[surface.as_str()]);
        }
    }
    let mut names: BTreeMap<usize, &str> = BTreeMap::new();
    for s in sets {
        let root = uf.find(ids[s.representative.as_str()]);
        let entry = names.entry(root).or_insert(s.representative.as_str());
        if s.representative.as_str() < *entry {
            *entry = s.representative.as_str();
        }
    }
    let mut map = BTreeMap::new();
    for (&name, &id) in &ids {
        let root = uf.find(id);
        map.insert(name.to_string(), names[&root].to_string());
    }
    let canonical: BTreeSet<String> = names.values().map(|s| s.to_string()).collect();
    let collisions = sets.len() - canonical.len();
    (canonical, map, collisions)
}

fn build_side(
    initial: &BTreeSet<String>,
    side: ClusterSide,
    embedder: &dyn Embedder,
    llm: &dyn LlmProvider,
    opts: &VocabOptions,
) -> Result<(BTreeSet<String>, BTreeMap<String, String>, SideStats)> {
    let items: Vec<String> = initial.iter().cloned().collect();
    let clusters = agglomerative_cluster(&items, opts.max_cluster_size, embedder)?;
    let outcomes = map_bounded(&clusters, opts.parallelism, |c| merge_cluster_synonyms(c, side, llm));

    let mut stats = SideStats {
        initial: initial.len(),
        clusters: clusters.len(),
        ..Default::default()
    };
    for c in &clusters {
        *stats.cluster_size_histogram.entry(c.members.len()).or_default() += 1;
    }
    let mut sets = Vec::new();
    for o in outcomes {
        stats.llm_failures += usize::from(o.failed);
        sets.extend(o.sets);
    }
    let (canonical, map, collisions) = fold_synonym_sets(&sets);
    stats.merged = canonical.len();
    stats.representative_collisions = collisions;
    Ok((canonical, map, stats))
}

/// Clusters both initial sets, merges synonyms per cluster, and assembles
/// the vocabulary with its maps.
pub fn build_vocabulary(
    entities_init: &BTreeSet<String>,
    aspects_init: &BTreeSet<String>,
    embedder: &dyn Embedder,
    llm: &dyn LlmProvider,
    opts: &VocabOptions,
) -> Result<(Vocabulary, VocabStats)> {
    if entities_init.is_empty() || aspects_init.is_empty() {
        return Err(Error::invalid("initial entity and aspect sets must be non-empty"));
    }
    let (entities, entity_map, es) = build_side(entities_init, ClusterSide::Entity, embedder, llm, opts)?;
    let (aspects, aspect_map, asp) = build_side(aspects_init, ClusterSide::Aspect, embedder, llm, opts)?;
    let vocab = Vocabulary {
        entities,
        aspects,
        entity_map,
        aspect_map,
    };
    vocab.validate()?;
    Ok((
        vocab,
        VocabStats {
            entities: es,
            aspects: asp,
        },
    ))
}
