use std::collections::BTreeMap;

use regex::Regex;

use super::{estimate_tokens, Completion, LlmProvider, LlmRequest};
use crate::error::Result;
use crate::model::normalize_surface;
use crate::pairgen::{write_pair_xml, write_set_xml};

/// Sentence template the synthetic corpus uses to plant pairs in text.
pub const PLANT_TEMPLATE: &str = "ENTITY: {entity} | ASPECT: {aspect}.";

const CLUSTER_MARKER: &str = "find sets of synonyms";
const CANDIDATE_ENTITY_MARKER: &str = "entities from {";
const CANDIDATE_ASPECT_MARKER: &str = "aspects from {";

/// Deterministic LLM stand-in for end-to-end tests.
///
/// Pair prompts are answered by extracting the planted `ENTITY: .. | ASPECT: ..`
/// sentences from the user content. Synonym-merge prompts are answered by
/// grouping the listed items under a known surface-to-canonical table; items
/// the table does not know come back as singletons.
pub struct OracleExtractor {
    synonyms: BTreeMap<String, String>,
    planted: Regex,
    preamble: bool,
}

impl OracleExtractor {
    pub fn new(synonyms: BTreeMap<String, String>) -> Self {
        Self {
            synonyms: synonyms
                .into_iter()
                .map(|(k, v)| (normalize_surface(&k), normalize_surface(&v)))
                .collect(),
            planted: Regex::new(r"ENTITY:\s*([^|\n]+?)\s*\|\s*ASPECT:\s*([^.\n]+?)\s*\.").expect("valid regex"),
            preamble: false,
        }
    }

    /// Wraps answers in chatty prose, as real models tend to.
    pub fn with_preamble(mut self, on: bool) -> Self {
        self.preamble = on;
        self
    }

    fn canonical<'a>(&'a self, surface: &'a str) -> &'a str {
        self.synonyms.get(surface).map(String::as_str).unwrap_or(surface)
    }

    fn extract(&self, text: &str) -> Vec<(String, String)> {
        self.planted
            .captures_iter(text)
            .map(|c| (normalize_surface(&c[1]), normalize_surface(&c[2])))
            .collect()
    }

    fn answer_pairs(&self, req: &LlmRequest) -> String {
        let found = self.extract(&req.user_content);
        let cands = |marker: &str| {
            let start = req.system_prompt.find(marker)? + marker.len();
            let end = start + req.system_prompt[start..].find('}')?;
            Some(
                req.system_prompt[start..end]
                    .split(',')
                    .map(normalize_surface)
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>(),
            )
        };
        match (cands(CANDIDATE_ENTITY_MARKER), cands(CANDIDATE_ASPECT_MARKER)) {
            (Some(ents), Some(asps)) => {
                let pairs: Vec<(String, String)> = found
                    .iter()
                    .map(|(e, a)| (self.canonical(e).to_string(), self.canonical(a).to_string()))
                    .filter(|(e, a)| ents.contains(e) && asps.contains(a))
                    .collect();
                write_pair_xml(pairs.iter().map(|(e, a)| (e.as_str(), a.as_str())))
            }
            _ => write_pair_xml(found.iter().map(|(e, a)| (e.as_str(), a.as_str()))),
        }
    }

    fn answer_cluster(&self, req: &LlmRequest) -> String {
        let mut groups: Vec<(String, Vec<String>)> = Vec::new();
        for line in req.user_content.lines() {
            let Some(item) = line.trim().strip_prefix("- ") else {
                continue;
            };
            let item = normalize_surface(item);
            let rep = self.canonical(&item).to_string();
            match groups.iter_mut().find(|(r, _)| *r == rep) {
                Some((_, members)) => members.push(item),
                None => groups.push((rep, vec![item])),
            }
        }
        write_set_xml(groups.iter().map(|(rep, members)| (members.as_slice(), rep.as_str())))
    }
}

impl LlmProvider for OracleExtractor {
    fn generate(&self, req: &LlmRequest) -> Result<Completion> {
        let body = if req.system_prompt.contains(CLUSTER_MARKER) {
            self.answer_cluster(req)
        } else {
            self.answer_pairs(req)
        };
        let text = if self.preamble {
            format!("Sure! Here is the requested output:\n{body}\nLet me know if you need anything else.")
        } else {
            body
        };
        Ok(Completion {
            prompt_tokens: estimate_tokens(&req.system_prompt) + estimate_tokens(&req.user_content),
            completion_tokens: estimate_tokens(&text),
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CandidateSets, Document};
    use crate::pairgen::{parse_pair_xml, parse_set_xml, render_cluster_prompt, render_pair_prompt, ClusterSide};

    fn doc() -> Document {
        Document::new(
            "d1",
            "Noise words here. ENTITY: PFAS | ASPECT: detection. More noise. ENTITY: MOF film | ASPECT: active site.",
        )
    }

    #[test]
    fn zero_shot_extracts_planted_surfaces() {
        let oracle = OracleExtractor::new(BTreeMap::new()).with_preamble(true);
        let out = oracle.generate(&render_pair_prompt(&doc(), None, 10_000).unwrap()).unwrap();
        let parsed = parse_pair_xml(&out.text);
        let got: Vec<_> = parsed.pairs.iter().map(|p| (p.entity.as_str(), p.aspect.as_str())).collect();
        assert_eq!(got, vec![("pfas", "detection"), ("mof film", "active site")]);
    }

    #[test]
    fn candidate_mode_canonicalizes_and_filters() {
        let syn = BTreeMap::from([("mof film".to_string(), "metal-organic framework".to_string())]);
        let oracle = OracleExtractor::new(syn);
        let cands = CandidateSets {
            doc_id: "d1".into(),
            candidate_entities: vec!["metal-organic framework".into(), "water".into()],
            candidate_aspects: vec!["active site".into(), "detection".into()],
        };
        let req = render_pair_prompt(&doc(), Some(&cands), 10_000).unwrap();
        let parsed = parse_pair_xml(&oracle.generate(&req).unwrap().text);
        let got: Vec<_> = parsed.pairs.iter().map(|p| (p.entity.as_str(), p.aspect.as_str())).collect();
        // "pfas" is not a candidate entity, so it is dropped.
        assert_eq!(got, vec![("metal-organic framework", "active site")]);
    }

    #[test]
    fn cluster_mode_groups_by_table() {
        let syn = BTreeMap::from([
            ("atomic weight".to_string(), "atomic mass".to_string()),
            ("mass of atom".to_string(), "atomic mass".to_string()),
        ]);
        let oracle = OracleExtractor::new(syn);
        let items = vec!["atomic weight".to_string(), "mass of atom".to_string(), "atomic mass".to_string(), "boiling point".to_string()];
        let req = render_cluster_prompt(&items, ClusterSide::Entity);
        let sets = parse_set_xml(&oracle.generate(&req).unwrap().text).sets;
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].1, "atomic mass");
        assert_eq!(sets[0].0.len(), 3);
        assert_eq!(sets[1], (vec!["boiling point".to_string()], "boiling point".to_string()));
    }
}
