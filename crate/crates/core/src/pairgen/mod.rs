//! Pair generation: prompt rendering, LLM calls, and parsing of the
//! structured answers, in zero-shot and candidate-grounded modes.

mod prompt;
mod xml;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CandidateSets, Document, PairSet, PairStage, Vocabulary};
use crate::par::map_bounded;
use crate::providers::LlmProvider;

pub use prompt::{
    render_cluster_prompt, render_pair_prompt, ClusterSide, PromptKind, PromptTemplate, CANDIDATE_PAIR_INSTRUCTION,
    CLUSTER_FORMAT, CLUSTER_INSTRUCTION, PAIR_FORMAT, PAIR_INSTRUCTION,
};
pub use xml::{parse_pair_xml, parse_set_xml, write_pair_xml, write_set_xml, PairParse, SetParse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    ZeroShot,
    Candidate,
}

/// What a generation pass is grounded on.
#[derive(Debug, Clone, Copy)]
pub enum Grounding<'a> {
    ZeroShot,
    Candidates {
        candidates: &'a BTreeMap<String, CandidateSets>,
        vocab: &'a Vocabulary,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub parallelism: usize,
    pub candidate_token_budget: usize,
    pub retry_on_empty: bool,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self {
            parallelism: 4,
            candidate_token_budget: 3000,
            retry_on_empty: true,
        }
    }
}

/// Outcome for one document or query.
#[derive(Debug, Clone, PartialEq)]
pub struct TextOutcome {
    pub pairs: PairSet,
    pub malformed: usize,
    pub retried: bool,
    /// Parsed pairs dropped because a side was not in the vocabulary.
    pub dropped_unknown: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub documents: usize,
    pub total_pairs: usize,
    pub mean_pairs_per_doc: f64,
    pub empty_documents: usize,
    pub failed: Vec<String>,
    pub malformed_fragments: usize,
    pub retries: usize,
    pub dropped_unknown: usize,
    /// Fraction of parsed pairs dropped as unknown (candidate mode).
    pub drop_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationReport {
    pub pairs: BTreeMap<String, PairSet>,
    pub stats: GenerationStats,
}

/// Runs one prompt for `doc`, retrying once on empty extraction.
pub fn generate_for_text(
    doc: &Document,
    grounding: Grounding<'_>,
    llm: &dyn LlmProvider,
    opts: &GenerationOptions,
) -> Result<TextOutcome> {
    let (cands, vocab) = match grounding {
        Grounding::ZeroShot => (None, None),
        Grounding::Candidates { candidates, vocab } => {
            let c = candidates
                .get(&doc.doc_id)
                .ok_or_else(|| Error::invalid(format!("no candidate sets for {}", doc.doc_id)))?;
            (Some(c), Some(vocab))
        }
    };
    // Empty candidate lists cannot ground a prompt; fall back to zero-shot
    // and still canonicalize the answer.
    let cands = cands.filter(|c| !c.candidate_entities.is_empty() && !c.candidate_aspects.is_empty());
    let req = render_pair_prompt(doc, cands, opts.candidate_token_budget)?;

    let mut parsed = parse_pair_xml(&llm.generate(&req)?.text);
    let mut malformed = parsed.malformed;
    let mut retried = false;
    if parsed.is_empty_extraction() && opts.retry_on_empty {
        retried = true;
        parsed = parse_pair_xml(&llm.generate(&req)?.text);
        malformed += parsed.malformed;
    }

    let (pairs, dropped_unknown) = match vocab {
        None => (PairSet::from_pairs(&doc.doc_id, PairStage::Initial, parsed.pairs), 0),
        Some(v) => {
            let total = parsed.pairs.len();
            let set = PairSet::from_pairs(
                &doc.doc_id,
                PairStage::Final,
                parsed.pairs.iter().filter_map(|p| v.canonical_pair(p)),
            );
            let kept = parsed.pairs.iter().filter(|p| v.canonical_pair(p).is_some()).count();
            (set, total - kept)
        }
    };
    Ok(TextOutcome {
        pairs,
        malformed,
        retried,
        dropped_unknown,
    })
}

/// Generates one pair set per document. Provider failures are recorded per
/// document and do not abort the pass.
pub fn generate_pairs_for_corpus(
    docs: &[Document],
    grounding: Grounding<'_>,
    llm: &dyn LlmProvider,
    opts: &GenerationOptions,
) -> Result<GenerationReport> {
    if let Grounding::Candidates { candidates, .. } = grounding {
        if let Some(d) = docs.iter().find(|d| !candidates.contains_key(&d.doc_id)) {
            return Err(Error::invalid(format!("candidate sets missing for document {}", d.doc_id)));
        }
    }
    let stage = match grounding {
        Grounding::ZeroShot => PairStage::Initial,
        Grounding::Candidates { .. } => PairStage::Final,
    };
    let outcomes = map_bounded(docs, opts.parallelism, |d| generate_for_text(d, grounding, llm, opts));

    let mut report = GenerationReport::default();
    let mut parsed_total = 0;
    for (doc, outcome) in docs.iter().zip(outcomes) {
        let set = match outcome {
            Ok(o) => {
                let s = &mut report.stats;
                s.malformed_fragments += o.malformed;
                s.retries += usize::from(o.retried);
                s.dropped_unknown += o.dropped_unknown;
                parsed_total += o.pairs.len() + o.dropped_unknown;
                o.pairs
            }
            Err(e) => {
                tracing::warn!(doc = %doc.doc_id, error = %e, "pair generation failed");
                report.stats.failed.push(doc.doc_id.clone());
                PairSet::new(&doc.doc_id, stage)
            }
        };
        report.stats.empty_documents += usize::from(set.is_empty());
        report.stats.total_pairs += set.len();
        report.pairs.insert(doc.doc_id.clone(), set);
    }
    let s = &mut report.stats;
    s.documents = docs.len();
    s.mean_pairs_per_doc = if docs.is_empty() { 0.0 } else { s.total_pairs as f64 / docs.len() as f64 };
    s.drop_rate = if parsed_total == 0 { 0.0 } else { s.dropped_unknown as f64 / parsed_total as f64 };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{Completion, LlmRequest};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Scripted {
        answers: Vec<&'static str>,
        calls: AtomicUsize,
    }

    impl Scripted {
        fn new(answers: Vec<&'static str>) -> Self {
            Self {
                answers,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl LlmProvider for Scripted {
        fn generate(&self, req: &LlmRequest) -> Result<Completion> {
            if req.user_content.contains("FAIL") {
                return Err(Error::Transport {
                    attempts: 1,
                    message: "boom".into(),
                });
            }
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(Completion {
                text: self.answers[i.min(self.answers.len() - 1)].to_string(),
                prompt_tokens: 1,
                completion_tokens: 1,
            })
        }
    }

    fn opts() -> GenerationOptions {
        GenerationOptions {
            parallelism: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_documents_give_empty_map() {
        let llm = Scripted::new(vec![""]);
        let r = generate_pairs_for_corpus(&[], Grounding::ZeroShot, &llm, &opts()).unwrap();
        assert!(r.pairs.is_empty());
        assert_eq!(llm.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn retries_once_on_empty_extraction() {
        let llm = Scripted::new(vec!["nothing", "<pair><entity>A</entity><aspect>x</aspect></pair>"]);
        let out = generate_for_text(&Document::new("d", "text"), Grounding::ZeroShot, &llm, &opts()).unwrap();
        assert!(out.retried);
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(llm.calls.load(Ordering::SeqCst), 2);

        let llm = Scripted::new(vec!["nothing"]);
        let out = generate_for_text(&Document::new("d", "text"), Grounding::ZeroShot, &llm, &opts()).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(llm.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn missing_candidates_fail_before_any_call() {
        let llm = Scripted::new(vec![""]);
        let vocab = Vocabulary::identity(["a".to_string()], ["x".to_string()]);
        let candidates = BTreeMap::new();
        let docs = [Document::new("d1", "text")];
        let r = generate_pairs_for_corpus(
            &docs,
            Grounding::Candidates {
                candidates: &candidates,
                vocab: &vocab,
            },
            &llm,
            &opts(),
        );
        assert!(r.is_err());
        assert_eq!(llm.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn candidate_mode_canonicalizes_and_drops_unknowns() {
        let mut vocab = Vocabulary::identity(["atomic mass".to_string()], ["value".to_string()]);
        vocab.entity_map.insert("atomic weight".into(), "atomic mass".into());
        let candidates = BTreeMap::from([(
            "d1".to_string(),
            CandidateSets {
                doc_id: "d1".into(),
                candidate_entities: vec!["atomic mass".into()],
                candidate_aspects: vec!["value".into()],
            },
        )]);
        let llm = Scripted::new(vec![
            "<pair><entity>Atomic Weight</entity><aspect>value</aspect></pair><pair><entity>unicorn</entity><aspect>value</aspect></pair>",
        ]);
        let docs = [Document::new("d1", "text")];
        let r = generate_pairs_for_corpus(
            &docs,
            Grounding::Candidates {
                candidates: &candidates,
                vocab: &vocab,
            },
            &llm,
            &opts(),
        )
        .unwrap();
        let set = &r.pairs["d1"];
        assert_eq!(set.stage, PairStage::Final);
        assert_eq!(set.pairs.len(), 1);
        assert_eq!(set.pairs[0].entity, "atomic mass");
        assert_eq!(r.stats.dropped_unknown, 1);
        assert!((r.stats.drop_rate - 0.5).abs() < 1e-12);
        set.validate(Some(&vocab)).unwrap();
    }

    #[test]
    fn provider_failure_is_recorded_and_pipeline_continues() {
        let llm = Scripted::new(vec!["<pair><entity>a</entity><aspect>x</aspect></pair>"]);
        let docs = [Document::new("d1", "FAIL"), Document::new("d2", "fine")];
        let r = generate_pairs_for_corpus(&docs, Grounding::ZeroShot, &llm, &opts()).unwrap();
        assert_eq!(r.stats.failed, vec!["d1".to_string()]);
        assert!(r.pairs["d1"].is_empty());
        assert_eq!(r.pairs["d2"].len(), 1);
        assert!((r.stats.mean_pairs_per_doc - 0.5).abs() < 1e-12);
    }
}
