use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{CandidateSets, Document};
use crate::providers::{estimate_tokens, LlmRequest};

pub const PAIR_INSTRUCTION: &str = "Given a scientific document, identify all scientific entities. \
Then, for each entity, find all associated aspects and generate (entity, aspect) pairs";

pub const PAIR_FORMAT: &str = "Output only (entity, aspect) pairs using the following XML structure \
for each pair:<pair><entity>entity name</entity><aspect>aspect phrase</aspect></pair>";

pub const CANDIDATE_PAIR_INSTRUCTION: &str = "Given a scientific document, find all relevant entities \
from {candidate_entities}. Then, for each entity, find all associated aspects from {candidate_aspects}, \
and generate relevant (entity, aspect) pairs";

pub const CLUSTER_INSTRUCTION: &str = "Given a list of scientific entities, find sets of synonyms that \
describe the same academic concept. Then, for each synonym set, generate a representative entity.";

pub const CLUSTER_FORMAT: &str = "Output synonyms and representatives using the following XML structure \
for each set: <set><entities>entity1, entity2,...</entities><rep>representative entity</rep></set>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Pair,
    PairWithCandidates,
    ClusterMerge,
}

/// Which vocabulary a synonym-merge prompt is about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterSide {
    Entity,
    Aspect,
}

/// A system/user prompt pair with `{placeholder}` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn pair() -> Self {
        Self {
            kind: PromptKind::Pair,
            system: format!("{PAIR_INSTRUCTION}\n\n{PAIR_FORMAT}"),
            user: "Document:\n{document}".to_string(),
        }
    }

    pub fn pair_with_candidates() -> Self {
        Self {
            kind: PromptKind::PairWithCandidates,
            system: format!("{CANDIDATE_PAIR_INSTRUCTION}\n\n{PAIR_FORMAT}"),
            user: "Document:\n{document}".to_string(),
        }
    }

    /// The entity variant is the instruction as written; the aspect variant
    /// swaps the nouns.
    pub fn cluster_merge(side: ClusterSide) -> Self {
        let system = format!("{CLUSTER_INSTRUCTION}\n\n{CLUSTER_FORMAT}");
        let system = match side {
            ClusterSide::Entity => system,
            ClusterSide::Aspect => system
                .replace("scientific entities", "scientific aspects")
                .replace("representative entity", "representative aspect"),
        };
        Self {
            kind: PromptKind::ClusterMerge,
            system,
            user: "Items:\n{cluster_items}".to_string(),
        }
    }

    pub fn placeholders(&self) -> &'static [&'static str] {
        match self.kind {
            PromptKind::Pair => &["document"],
            PromptKind::PairWithCandidates => &["candidate_entities", "candidate_aspects", "document"],
            PromptKind::ClusterMerge => &["cluster_items"],
        }
    }

    /// Substitutes every placeholder; each must occur exactly once across
    /// the system and user parts.
    pub fn render(&self, values: &BTreeMap<&str, String>) -> Result<LlmRequest> {
        let mut system = self.system.clone();
        let mut user = self.user.clone();
        for name in self.placeholders() {
            let slot = format!("{{{name}}}");
            let count = system.matches(&slot).count() + user.matches(&slot).count();
            if count != 1 {
                return Err(Error::invalid(format!("placeholder {slot} occurs {count} times in template")));
            }
            let value = values
                .get(name)
                .ok_or_else(|| Error::invalid(format!("no value for placeholder {slot}")))?;
            system = system.replacen(&slot, value, 1);
            user = user.replacen(&slot, value, 1);
        }
        Ok(LlmRequest::new(system, user))
    }
}

fn braced(items: &[String]) -> String {
    format!("{{{}}}", items.join(", "))
}

/// Keeps the longest prefixes of both lists whose combined token estimate
/// fits `budget`, trimming the longer list first.
fn fit_candidates(entities: &[String], aspects: &[String], budget: usize) -> (usize, usize) {
    let cost = |xs: &[String]| xs.iter().map(|x| estimate_tokens(x) as usize + 1).sum::<usize>();
    let (mut ne, mut na) = (entities.len(), aspects.len());
    while ne + na > 2 && cost(&entities[..ne]) + cost(&aspects[..na]) > budget {
        if ne >= na {
            ne -= 1;
        } else {
            na -= 1;
        }
    }
    (ne, na)
}

/// Zero-shot prompt without candidates, candidate-grounded prompt with them.
pub fn render_pair_prompt(doc: &Document, candidates: Option<&CandidateSets>, candidate_token_budget: usize) -> Result<LlmRequest> {
    if doc.text.trim().is_empty() {
        return Err(Error::invalid(format!("document {} has empty text", doc.doc_id)));
    }
    let mut values = BTreeMap::from([("document", doc.text.clone())]);
    let template = match candidates {
        None => PromptTemplate::pair(),
        Some(c) => {
            if c.candidate_entities.is_empty() || c.candidate_aspects.is_empty() {
                return Err(Error::invalid(format!("empty candidate lists for {}", doc.doc_id)));
            }
            let (ne, na) = fit_candidates(&c.candidate_entities, &c.candidate_aspects, candidate_token_budget);
            if ne < c.candidate_entities.len() || na < c.candidate_aspects.len() {
                tracing::warn!(
                    doc = %doc.doc_id,
                    entities = ne,
                    aspects = na,
                    "candidate lists exceed the token budget; truncated"
                );
            }
            values.insert("candidate_entities", braced(&c.candidate_entities[..ne]));
            values.insert("candidate_aspects", braced(&c.candidate_aspects[..na]));
            PromptTemplate::pair_with_candidates()
        }
    };
    template.render(&values)
}

pub fn render_cluster_prompt(items: &[String], side: ClusterSide) -> LlmRequest {
    let listed = items.iter().map(|i| format!("- {i}")).collect::<Vec<_>>().join("\n");
    PromptTemplate::cluster_merge(side)
        .render(&BTreeMap::from([("cluster_items", listed)]))
        .expect("built-in cluster template is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc() -> Document {
        Document::new("d1", "MOF films detect PFAS in water.")
    }

    #[test]
    fn zero_shot_prompt_has_instruction_format_and_text() {
        let req = render_pair_prompt(&doc(), None, 1000).unwrap();
        assert!(req.system_prompt.contains("identify all scientific entities"));
        assert!(req.system_prompt.contains("Output only (entity, aspect) pairs"));
        assert!(req.user_content.contains("MOF films detect PFAS in water."));
        req.validate().unwrap();
    }

    #[test]
    fn candidate_prompt_interpolates_lists_in_order() {
        let c = CandidateSets {
            doc_id: "d1".into(),
            candidate_entities: vec!["pfas".into(), "metal-organic framework".into()],
            candidate_aspects: vec!["detection".into(), "active site".into()],
        };
        let req = render_pair_prompt(&doc(), Some(&c), 1000).unwrap();
        assert!(req.system_prompt.contains("find all relevant entities from {pfas, metal-organic framework}"));
        assert!(req.system_prompt.contains("aspects from {detection, active site}"));
        assert!(req.system_prompt.contains("<pair><entity>"));
    }

    #[test]
    fn empty_candidates_rejected() {
        let c = CandidateSets {
            doc_id: "d1".into(),
            candidate_entities: vec![],
            candidate_aspects: vec!["x".into()],
        };
        assert!(render_pair_prompt(&doc(), Some(&c), 1000).is_err());
        assert!(render_pair_prompt(&Document::new("d", " "), None, 1000).is_err());
    }

    #[test]
    fn over_budget_candidates_are_truncated_to_prefix() {
        let ents: Vec<String> = (0..50).map(|i| format!("entity number {i}")).collect();
        let asps: Vec<String> = (0..10).map(|i| format!("aspect{i}")).collect();
        let c = CandidateSets {
            doc_id: "d1".into(),
            candidate_entities: ents,
            candidate_aspects: asps,
        };
        let req = render_pair_prompt(&doc(), Some(&c), 60).unwrap();
        assert!(req.system_prompt.contains("{entity number 0, entity number 1"));
        assert!(!req.system_prompt.contains("entity number 49"));
    }

    #[test]
    fn placeholders_must_be_unique() {
        let mut t = PromptTemplate::pair();
        t.system.push_str(" {document}");
        assert!(t.render(&BTreeMap::from([("document", "x".to_string())])).is_err());
    }

    #[test]
    fn cluster_prompt_lists_items() {
        let req = render_cluster_prompt(&["atomic weight".into(), "atomic mass".into()], ClusterSide::Entity);
        assert!(req.system_prompt.contains("find sets of synonyms"));
        assert!(req.system_prompt.contains("Output synonyms and representatives"));
        assert_eq!(req.user_content, "Items:\n- atomic weight\n- atomic mass");
        let aspect = render_cluster_prompt(&["x".into()], ClusterSide::Aspect);
        assert!(aspect.system_prompt.contains("scientific aspects"));
    }
}
