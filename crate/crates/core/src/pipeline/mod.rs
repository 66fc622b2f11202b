//! Stage orchestration over a working directory.
//!
//! Each stage reads declared inputs, writes its artifacts atomically, and
//! leaves a stamp holding a fingerprint of its settings and input contents.
//! A stage whose stamp still matches is skipped; a stage whose upstream is
//! missing or out of date refuses to run unless forced.

mod config;
mod workspace;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::candidates::{build_neighbor_index, CandidateBuilder, NeighborIndex};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, Metric, Qrels, Run};
use crate::matching::{to_run, InferenceConfig, LlmContext, QueryMode, RetrievalArtifacts, Retriever};
use crate::model::{
    ensure_unique_ids, load_json, load_jsonl, save_json, save_jsonl, write_atomic, CandidateSets, Document,
    EmbeddingRecord, PairSet, Query, RelevanceVector, Vocabulary,
};
use crate::pairgen::{generate_pairs_for_corpus, Grounding};
use crate::predictors::{
    aspect_precision_at_k, default_grid, entity_precision_at_k, evaluate_predictors, grid_search, relevance_vector,
    train_aspect_predictor, train_entity_predictor, MlpModel, TargetSpace, TrainConfig, TrainedModel,
};
use crate::providers::{Embedder, MeteredLlm, UsageSnapshot};
use crate::relevance::{build_soft_labels, SoftLabelRecord, SoftLabelTable};
use crate::synth::{generate_corpus, SynthSpec};
use crate::vocab::{build_vocabulary, collect_initial_sets};

pub use config::{
    interpolate_env, EmbedderKind, EvalConfig, LabelConfig, LlmKind, PathsConfig, PipelineConfig, ProviderConfig,
    TrainSection,
};
pub use workspace::*;

/// What a stage did, for the report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    /// True when the stamp matched and nothing ran.
    pub up_to_date: bool,
    pub seconds: f64,
    pub llm: UsageSnapshot,
    pub cost_usd: f64,
    pub counts: BTreeMap<String, f64>,
    pub warnings: usize,
    pub details: Value,
}

#[derive(Default)]
struct StageOutput {
    counts: BTreeMap<String, f64>,
    warnings: usize,
    details: Value,
    llm: Option<UsageSnapshot>,
}

impl StageOutput {
    fn count(mut self, key: &str, v: impl Into<f64>) -> Self {
        self.counts.insert(key.to_string(), v.into());
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Re-run even when up to date, and accept stale upstream artifacts.
    pub force: bool,
    /// Fail a stage that finished with warnings.
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub run: String,
    pub report: EvalReport,
}

/// Hyperparameters the sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Candidate list length, for documents and queries.
    M,
    NE,
    NA,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "m" => Ok(Self::M),
            "n_e" | "ne" => Ok(Self::NE),
            "n_a" | "na" => Ok(Self::NA),
            _ => Err(Error::invalid(format!("unknown hyperparameter {s:?} (expected m, n_e or n_a)"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::M => "m",
            Self::NE => "n_e",
            Self::NA => "n_a",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Stages re-run for this value.
    pub stages_run: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub param: SweepParam,
    pub mode: QueryMode,
    pub base: BTreeMap<String, f64>,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// One row per value plus a `base` row.
    pub fn to_tsv(&self) -> String {
        let cols: Vec<&String> = self.base.keys().collect();
        let mut out = self.param.to_string();
        for c in &cols {
            let _ = write!(out, "\t{c}");
        }
        out.push('\n');
        let mut line = |label: String, m: &BTreeMap<String, f64>| {
            out.push_str(&label);
            for c in &cols {
                let _ = write!(out, "\t{:.4}", m.get(*c).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        };
        line("base".into(), &self.base);
        for r in &self.rows {
            line(r.value.to_string(), &r.metrics);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
    /// Run name to mean metrics.
    pub evaluations: BTreeMap<String, BTreeMap<String, f64>>,
    pub total_seconds: f64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
    pub warnings: usize,
}

impl PipelineReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<22} {:>9} {:>7} {:>10} {:>10} {:>9} {:>5}\n",
            "stage", "seconds", "calls", "prompt", "completion", "cost$", "warn"
        );
        for s in &self.stages {
            let _ = writeln!(
                out,
                "{:<22} {:>9.2} {:>7} {:>10} {:>10} {:>9.4} {:>5}",
                s.stage, s.seconds, s.llm.calls, s.llm.prompt_tokens, s.llm.completion_tokens, s.cost_usd, s.warnings
            );
        }
        let _ = writeln!(
            out,
            "{:<22} {:>9.2} {:>7} {:>10} {:>10} {:>9.4} {:>5}",
            "total", self.total_seconds, "", self.prompt_tokens, self.completion_tokens, self.cost_usd, self.warnings
        );
        for (run, means) in &self.evaluations {
            let _ = write!(out, "\n{run}:");
            for (m, v) in means {
                let _ = write!(out, " {m}={v:.4}");
            }
        }
        if !self.evaluations.is_empty() {
            out.push('\n');
        }
        out
    }
}

/// Drops keys that only affect speed, so changing them does not
/// invalidate artifacts.
fn strip_parallelism(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("parallelism");
            map.values_mut().for_each(strip_parallelism);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_parallelism),
        _ => {}
    }
}

fn by_owner(sets: Vec<PairSet>) -> BTreeMap<String, PairSet> {
    sets.into_iter().map(|s| (s.owner_id.clone(), s)).collect()
}

fn embed_names(emb: &dyn Embedder, names: &BTreeSet<String>) -> Result<Vec<EmbeddingRecord>> {
    let names: Vec<String> = names.iter().cloned().collect();
    let vectors = emb.embed(&names)?;
    Ok(names
        .into_iter()
        .zip(vectors)
        .map(|(id, vector)| EmbeddingRecord { id, vector })
        .collect())
}

fn target_space(path: &Path) -> Result<TargetSpace> {
    let recs: Vec<EmbeddingRecord> = load_jsonl(path)?;
    TargetSpace::new(recs.into_iter().map(|r| (r.id, r.vector)).collect())
}

pub struct Pipeline {
    cfg: PipelineConfig,
    ws: Workspace,
    opts: RunOptions,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Result<Self> {
        cfg.validate()?;
        let ws = Workspace::new(cfg.paths.work_dir.clone());
        Ok(Self { cfg, ws, opts })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn lock(&self) -> Result<LockGuard> {
        self.ws.lock()
    }

    fn settings(&self, stage: Stage) -> Value {
        let c = &self.cfg;
        let p = &c.provider;
        let mut v = match stage {
            Stage::GenPairsZeroShot | Stage::GenPairsCandidate => {
                json!({"generation": c.generation, "llm": p.llm_identity()})
            }
            Stage::BuildVocab => json!({"vocab": c.vocab, "llm": p.llm_identity(), "embedder": p.embedder_identity()}),
            Stage::GenCandidates => json!({"candidates": c.candidates, "embedder": p.embedder_identity()}),
            Stage::SoftLabels => json!({"labels": c.labels}),
            Stage::TrainEntity => json!({"train": c.train.entity, "grid": c.train.grid_search, "k": c.train.eval_k}),
            Stage::TrainAspect => json!({"train": c.train.aspect, "grid": c.train.grid_search, "k": c.train.eval_k}),
            Stage::EvalPredictors => json!({"k": c.train.eval_k}),
            Stage::Query(mode) => {
                let inference = InferenceConfig {
                    mode,
                    ..c.inference.clone()
                };
                let llm = mode == QueryMode::Llm;
                json!({
                    "inference": inference,
                    "depth": c.eval.run_depth,
                    "embedder": p.embedder_identity(),
                    "llm": llm.then(|| p.llm_identity()),
                    "generation": llm.then_some(&c.generation),
                })
            }
        };
        strip_parallelism(&mut v);
        v
    }

    fn external_inputs(&self, stage: Stage) -> Vec<PathBuf> {
        let mut v = Vec::new();
        if stage != Stage::BuildVocab {
            v.push(self.cfg.paths.docs.clone());
        }
        if let Stage::Query(_) = stage {
            v.push(self.cfg.paths.queries.clone());
        }
        if let (true, LlmKind::Oracle, Some(s)) = (stage.uses_llm(), self.cfg.provider.llm, &self.cfg.provider.synonyms) {
            v.push(s.clone());
        }
        v
    }

    pub fn fingerprint(&self, stage: Stage) -> Result<Option<String>> {
        self.ws.fingerprint(stage, &self.settings(stage), &self.external_inputs(stage))
    }

    pub fn status(&self, stage: Stage) -> Result<StageStatus> {
        let fp = self.fingerprint(stage)?;
        self.ws.status(stage, fp.as_deref())
    }

    fn check_dependencies(&self, stage: Stage) -> Result<()> {
        for d in stage.deps() {
            match self.status(d)? {
                StageStatus::NotRun => {
                    return Err(Error::MissingDependency {
                        stage: d.name(),
                        artifact: d.outputs().join(", "),
                    })
                }
                StageStatus::Stale if !self.opts.force => return Err(Error::StaleDependency { stage: d.name() }),
                _ => {}
            }
        }
        Ok(())
    }

    /// Runs one stage if its inputs are in place; a stage whose stamp
    /// matches is reported as up to date without running.
    pub fn run_stage(&self, stage: Stage) -> Result<StageReport> {
        self.check_dependencies(stage)?;
        let Some(fp) = self.fingerprint(stage)? else {
            let missing = self
                .external_inputs(stage)
                .into_iter()
                .chain(stage.artifact_inputs().into_iter().map(|a| self.ws.path(a)))
                .find(|p| !p.is_file())
                .map(|p| p.display().to_string())
                .unwrap_or_default();
            return Err(Error::MissingDependency {
                stage: stage.name(),
                artifact: format!("input {missing}"),
            });
        };
        if !self.opts.force && self.ws.status(stage, Some(&fp))? == StageStatus::UpToDate {
            tracing::info!(stage = %stage, "up to date");
            return Ok(StageReport {
                stage: stage.name(),
                up_to_date: true,
                ..StageReport::default()
            });
        }
        tracing::info!(stage = %stage, "running");
        let t0 = Instant::now();
        let out = self.execute(stage)?;
        self.ws.write_stamp(stage, fp)?;
        let llm = out.llm.unwrap_or_default();
        let p = &self.cfg.provider;
        let report = StageReport {
            stage: stage.name(),
            up_to_date: false,
            seconds: t0.elapsed().as_secs_f64(),
            cost_usd: llm.cost(p.usd_per_1k_prompt, p.usd_per_1k_completion),
            llm,
            counts: out.counts,
            warnings: out.warnings,
            details: out.details,
        };
        save_json(&report, &self.ws.report_path(&stage.file_stem()))?;
        if self.opts.strict && report.warnings > 0 {
            return Err(Error::Warnings {
                stage: stage.name(),
                count: report.warnings,
            });
        }
        Ok(report)
    }

    /// Brings `stage` and everything upstream up to date, returning the
    /// reports of the stages that actually ran.
    pub fn ensure(&self, stage: Stage) -> Result<Vec<StageReport>> {
        let mut done = BTreeSet::new();
        let mut reports = Vec::new();
        self.ensure_into(stage, &mut done, &mut reports)?;
        Ok(reports)
    }

    fn ensure_into(&self, stage: Stage, done: &mut BTreeSet<Stage>, reports: &mut Vec<StageReport>) -> Result<()> {
        if done.contains(&stage) {
            return Ok(());
        }
        for d in stage.deps() {
            self.ensure_into(d, done, reports)?;
        }
        if self.opts.force || self.status(stage)? != StageStatus::UpToDate {
            reports.push(self.run_stage(stage)?);
        }
        done.insert(stage);
        Ok(())
    }

    /// Every stage through the base, fast, and LLM query runs, then
    /// evaluation of all runs.
    pub fn run_all(&self) -> Result<(Vec<StageReport>, Vec<RunEvaluation>)> {
        let mut done = BTreeSet::new();
        let mut reports = Vec::new();
        for s in Stage::ALL {
            self.ensure_into(s, &mut done, &mut reports)?;
        }
        let evals = self.evaluate_runs(&[], None, None)?;
        Ok((reports, evals))
    }

    fn execute(&self, stage: Stage) -> Result<StageOutput> {
        match stage {
            Stage::GenPairsZeroShot => self.gen_pairs(false),
            Stage::BuildVocab => self.build_vocab(),
            Stage::GenCandidates => self.gen_candidates(),
            Stage::GenPairsCandidate => self.gen_pairs(true),
            Stage::SoftLabels => self.soft_labels(),
            Stage::TrainEntity => self.train_entity(),
            Stage::TrainAspect => self.train_aspect(),
            Stage::EvalPredictors => self.eval_predictors(),
            Stage::Query(mode) => self.query(mode),
        }
    }

    fn docs(&self) -> Result<Vec<Document>> {
        let docs: Vec<Document> = load_jsonl(&self.cfg.paths.docs)?;
        if docs.is_empty() {
            return Err(Error::invalid(format!("{} has no documents", self.cfg.paths.docs.display())));
        }
        ensure_unique_ids(docs.iter().map(|d| d.doc_id.as_str()))?;
        for d in &docs {
            d.validate(None)?;
        }
        Ok(docs)
    }

    fn embedded_docs(&self) -> Result<Vec<Document>> {
        let mut docs = self.docs()?;
        let recs: Vec<EmbeddingRecord> = load_jsonl(&self.ws.path(DOC_EMBEDDINGS))?;
        let mut vectors: HashMap<String, Vec<f64>> = recs.into_iter().map(|r| (r.id, r.vector)).collect();
        for d in &mut docs {
            let v = vectors.remove(&d.doc_id).ok_or_else(|| Error::StaleDependency {
                stage: Stage::GenCandidates.name(),
            })?;
            d.embedding = Some(v);
        }
        Ok(docs)
    }

    fn embedded_queries(&self, emb: &dyn Embedder) -> Result<Vec<Query>> {
        let mut queries: Vec<Query> = load_jsonl(&self.cfg.paths.queries)?;
        ensure_unique_ids(queries.iter().map(|q| q.query_id.as_str()))?;
        if queries.iter().any(|q| q.embedding.is_none()) {
            let texts: Vec<String> = queries.iter().map(|q| q.text.clone()).collect();
            for (q, v) in queries.iter_mut().zip(emb.embed(&texts)?) {
                q.embedding = Some(v);
            }
        }
        for q in &queries {
            q.validate(Some(emb.dim()))?;
        }
        Ok(queries)
    }

    fn pairs(&self, artifact: &str) -> Result<BTreeMap<String, PairSet>> {
        Ok(by_owner(load_jsonl(&self.ws.path(artifact))?))
    }

    fn metered_llm(&self) -> Result<MeteredLlm<std::sync::Arc<dyn crate::providers::LlmProvider>>> {
        Ok(MeteredLlm::new(self.cfg.provider.build_llm()?))
    }

    fn gen_pairs(&self, grounded: bool) -> Result<StageOutput> {
        let docs = self.docs()?;
        let llm = self.metered_llm()?;
        let opts = &self.cfg.generation;
        let (report, target) = if grounded {
            let vocab: Vocabulary = load_json(&self.ws.path(VOCAB))?;
            let sets: Vec<CandidateSets> = load_jsonl(&self.ws.path(CANDIDATES))?;
            let candidates: BTreeMap<String, CandidateSets> = sets.into_iter().map(|c| (c.doc_id.clone(), c)).collect();
            let grounding = Grounding::Candidates {
                candidates: &candidates,
                vocab: &vocab,
            };
            (generate_pairs_for_corpus(&docs, grounding, &llm, opts)?, PAIRS_FINAL)
        } else {
            (generate_pairs_for_corpus(&docs, Grounding::ZeroShot, &llm, opts)?, PAIRS_INIT)
        };
        save_jsonl(&report.pairs.values().collect::<Vec<_>>(), &self.ws.path(target))?;
        let s = &report.stats;
        Ok(StageOutput {
            warnings: s.failed.len(),
            details: serde_json::to_value(s).expect("plain struct"),
            llm: Some(llm.meter().snapshot()),
            ..StageOutput::default()
        }
        .count("documents", s.documents as f64)
        .count("pairs", s.total_pairs as f64)
        .count("mean_pairs_per_doc", s.mean_pairs_per_doc)
        .count("failed_documents", s.failed.len() as f64)
        .count("dropped_unknown", s.dropped_unknown as f64))
    }

    fn build_vocab(&self) -> Result<StageOutput> {
        let pairs = self.pairs(PAIRS_INIT)?;
        let (e_init, a_init) = collect_initial_sets(&pairs)?;
        let llm = self.metered_llm()?;
        let emb = self.cfg.provider.build_embedder()?;
        let (vocab, stats) = build_vocabulary(&e_init, &a_init, &*emb, &llm, &self.cfg.vocab)?;
        save_json(&vocab, &self.ws.path(VOCAB))?;
        save_jsonl(&embed_names(&*emb, &vocab.entities)?, &self.ws.path(ENTITY_EMBEDDINGS))?;
        save_jsonl(&embed_names(&*emb, &vocab.aspects)?, &self.ws.path(ASPECT_EMBEDDINGS))?;
        Ok(StageOutput {
            warnings: stats.entities.llm_failures + stats.aspects.llm_failures,
            details: serde_json::to_value(&stats).expect("plain struct"),
            llm: Some(llm.meter().snapshot()),
            ..StageOutput::default()
        }
        .count("initial_entities", e_init.len() as f64)
        .count("initial_aspects", a_init.len() as f64)
        .count("entities", vocab.entities.len() as f64)
        .count("aspects", vocab.aspects.len() as f64))
    }

    fn gen_candidates(&self) -> Result<StageOutput> {
        let mut docs = self.docs()?;
        let emb = self.cfg.provider.build_embedder()?;
        if docs.iter().any(|d| d.embedding.is_none()) {
            let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
            for (d, v) in docs.iter_mut().zip(emb.embed(&texts)?) {
                d.embedding = Some(v);
            }
        }
        for d in &docs {
            d.validate(Some(emb.dim()))?;
        }
        let records: Vec<EmbeddingRecord> = docs
            .iter()
            .map(|d| EmbeddingRecord {
                id: d.doc_id.clone(),
                vector: d.embedding.clone().expect("embedded above"),
            })
            .collect();
        save_jsonl(&records, &self.ws.path(DOC_EMBEDDINGS))?;

        let index = build_neighbor_index(&docs, self.cfg.candidates.knn)?;
        save_json(&index, &self.ws.path(NEIGHBORS))?;
        let pairs = self.pairs(PAIRS_INIT)?;
        let vocab: Vocabulary = load_json(&self.ws.path(VOCAB))?;
        let sets = CandidateBuilder::new(&pairs, &vocab, &index, self.cfg.candidates.clone())?.for_corpus(&docs);
        save_jsonl(&sets.values().collect::<Vec<_>>(), &self.ws.path(CANDIDATES))?;
        let n = sets.len().max(1) as f64;
        let mean = |f: fn(&CandidateSets) -> usize| sets.values().map(f).sum::<usize>() as f64 / n;
        Ok(StageOutput::default()
            .count("documents", docs.len() as f64)
            .count("mean_candidate_entities", mean(|c| c.candidate_entities.len()))
            .count("mean_candidate_aspects", mean(|c| c.candidate_aspects.len())))
    }

    fn soft_labels(&self) -> Result<StageOutput> {
        let docs = self.docs()?;
        let pairs = self.pairs(PAIRS_FINAL)?;
        let vocab: Vocabulary = load_json(&self.ws.path(VOCAB))?;
        let neighbors: NeighborIndex = load_json(&self.ws.path(NEIGHBORS))?;
        let table = build_soft_labels(
            &docs,
            &pairs,
            &vocab.entities,
            &neighbors,
            self.cfg.labels.normalization,
            self.cfg.labels.parallelism,
        )?;
        let records = table.to_records();
        save_jsonl(&records, &self.ws.path(LABELS))?;
        let values: Vec<f64> = records.iter().flat_map(|r| r.labels.values().copied()).collect();
        let mean = if values.is_empty() { 0.0 } else { values.iter().sum::<f64>() / values.len() as f64 };
        Ok(StageOutput::default()
            .count("documents", records.len() as f64)
            .count("labels", values.len() as f64)
            .count("mean_label", mean))
    }

    fn fit(
        &self,
        base: &TrainConfig,
        mut train: impl FnMut(&TrainConfig) -> Result<TrainedModel>,
        mut precision: impl FnMut(&MlpModel) -> Result<f64>,
    ) -> Result<(TrainConfig, TrainedModel, f64)> {
        let cfg = if self.cfg.train.grid_search {
            grid_search(base, &default_grid(), |c| precision(&train(c)?.model))?.0
        } else {
            base.clone()
        };
        let mut trained = train(&cfg)?;
        trained.model.quantize();
        let p = precision(&trained.model)?;
        Ok((cfg, trained, p))
    }

    fn train_output(cfg: &TrainConfig, trained: &TrainedModel, precision: f64, k: usize) -> StageOutput {
        StageOutput {
            details: json!({"config": cfg, "loss_history": trained.loss_history}),
            ..StageOutput::default()
        }
        .count("epochs_run", trained.epochs_run as f64)
        .count("final_loss", trained.loss_history.last().copied().unwrap_or(f64::NAN))
        .count(&format!("precision_at_{k}"), precision)
        .count("learning_rate", cfg.learning_rate)
    }

    fn train_entity(&self) -> Result<StageOutput> {
        let docs = self.embedded_docs()?;
        let pairs = self.pairs(PAIRS_FINAL)?;
        let records: Vec<SoftLabelRecord> = load_jsonl(&self.ws.path(LABELS))?;
        let labels = SoftLabelTable::from_records(records);
        let entities = target_space(&self.ws.path(ENTITY_EMBEDDINGS))?;
        let k = self.cfg.train.eval_k;
        let (cfg, trained, p) = self.fit(
            &self.cfg.train.entity,
            |c| train_entity_predictor(&docs, &pairs, &labels, &entities, c),
            |m| Ok(entity_precision_at_k(&docs, &pairs, m, &entities, k)?.0),
        )?;
        save_json(&trained.model, &self.ws.path(ENTITY_MODEL))?;
        let relevance = docs
            .iter()
            .map(|d| relevance_vector(&trained.model, &d.doc_id, d.embedding.as_deref().expect("embedded"), &entities))
            .collect::<Result<Vec<_>>>()?;
        save_jsonl(&relevance, &self.ws.path(RELEVANCE))?;
        Ok(Self::train_output(&cfg, &trained, p, k))
    }

    fn train_aspect(&self) -> Result<StageOutput> {
        let docs = self.embedded_docs()?;
        let pairs = self.pairs(PAIRS_FINAL)?;
        let entities = target_space(&self.ws.path(ENTITY_EMBEDDINGS))?;
        let aspects = target_space(&self.ws.path(ASPECT_EMBEDDINGS))?;
        let k = self.cfg.train.eval_k;
        let (cfg, trained, p) = self.fit(
            &self.cfg.train.aspect,
            |c| train_aspect_predictor(&docs, &pairs, &entities, &aspects, c),
            |m| Ok(aspect_precision_at_k(&docs, &pairs, m, &entities, &aspects, k)?.0),
        )?;
        save_json(&trained.model, &self.ws.path(ASPECT_MODEL))?;
        Ok(Self::train_output(&cfg, &trained, p, k))
    }

    fn eval_predictors(&self) -> Result<StageOutput> {
        let docs = self.embedded_docs()?;
        let pairs = self.pairs(PAIRS_FINAL)?;
        let em: MlpModel = load_json(&self.ws.path(ENTITY_MODEL))?;
        let am: MlpModel = load_json(&self.ws.path(ASPECT_MODEL))?;
        let entities = target_space(&self.ws.path(ENTITY_EMBEDDINGS))?;
        let aspects = target_space(&self.ws.path(ASPECT_EMBEDDINGS))?;
        let report = evaluate_predictors(&docs, &pairs, &em, &am, &entities, &aspects, self.cfg.train.eval_k)?;
        save_json(&report, &self.ws.path(PREDICTOR_EVAL))?;
        Ok(StageOutput {
            details: serde_json::to_value(&report).expect("plain struct"),
            ..StageOutput::default()
        }
        .count("entity_precision", report.entity_precision)
        .count("aspect_precision", report.aspect_precision)
        .count("documents", report.documents as f64))
    }

    fn query(&self, mode: QueryMode) -> Result<StageOutput> {
        let emb = self.cfg.provider.build_embedder()?;
        let docs = self.embedded_docs()?;
        let queries = self.embedded_queries(&*emb)?;
        let entities = target_space(&self.ws.path(ENTITY_EMBEDDINGS))?;
        let aspects = target_space(&self.ws.path(ASPECT_EMBEDDINGS))?;
        let mut art = RetrievalArtifacts {
            docs,
            pairs: BTreeMap::new(),
            relevance: BTreeMap::new(),
            entities,
            aspects,
            entity_model: None,
            aspect_model: None,
        };
        if mode != QueryMode::Base {
            art.pairs = self.pairs(PAIRS_FINAL)?;
            let rel: Vec<RelevanceVector> = load_jsonl(&self.ws.path(RELEVANCE))?;
            art.relevance = rel.into_iter().map(|r| (r.owner_id.clone(), r)).collect();
            art.entity_model = Some(load_json(&self.ws.path(ENTITY_MODEL))?);
            art.aspect_model = Some(load_json(&self.ws.path(ASPECT_MODEL))?);
        }
        let retriever = Retriever::new(
            art,
            InferenceConfig {
                mode,
                ..self.cfg.inference.clone()
            },
        )?;
        let (rankings, llm) = if mode == QueryMode::Llm {
            let llm = self.metered_llm()?;
            let vocab: Vocabulary = load_json(&self.ws.path(VOCAB))?;
            let ctx = LlmContext {
                llm: &llm,
                vocab: &vocab,
                opts: &self.cfg.generation,
            };
            (retriever.retrieve_all(&queries, Some(ctx))?, Some(llm.meter().snapshot()))
        } else {
            (retriever.retrieve_all(&queries, None)?, None)
        };
        to_run(&rankings, self.cfg.eval.run_depth).save(&self.ws.path(&run_file(mode)))?;
        save_jsonl(&rankings, &self.ws.path(&rankings_file(mode)))?;
        let pool = rankings.iter().map(|r| r.entries.len()).sum::<usize>() as f64 / rankings.len().max(1) as f64;
        Ok(StageOutput {
            llm,
            ..StageOutput::default()
        }
        .count("queries", queries.len() as f64)
        .count("mean_pool_size", pool))
    }

    /// Scores run files against qrels. With no runs given, every run in the
    /// working directory; qrels and metrics default to the config.
    pub fn evaluate_runs(&self, runs: &[PathBuf], qrels: Option<&Path>, metrics: Option<&[Metric]>) -> Result<Vec<RunEvaluation>> {
        let runs: Vec<PathBuf> = if runs.is_empty() {
            let dir = self.ws.path(RUN_DIR);
            let mut found: Vec<PathBuf> = match std::fs::read_dir(&dir) {
                Ok(entries) => entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
                    .collect(),
                Err(_) => Vec::new(),
            };
            found.sort();
            found
        } else {
            runs.to_vec()
        };
        if runs.is_empty() {
            return Err(Error::MissingDependency {
                stage: "query".into(),
                artifact: "a run file".into(),
            });
        }
        let qrels = Qrels::load(qrels.unwrap_or(&self.cfg.paths.qrels))?;
        let metrics = match metrics {
            Some(m) => m.to_vec(),
            None => self.cfg.eval.parsed_metrics()?,
        };
        let mut out = Vec::new();
        for path in runs {
            let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = evaluate(&Run::load(&path)?, &qrels, &metrics);
            save_json(&report, &self.ws.report_path(&format!("metrics-{name}")))?;
            let csv = report.per_query_csv();
            write_atomic(&self.ws.path(&format!("{REPORT_DIR}/metrics-{name}.csv")), |w| w.write_all(csv.as_bytes()))?;
            out.push(RunEvaluation { run: name, report });
        }
        Ok(out)
    }

    fn require_current(&self, stages: &[Stage]) -> Result<()> {
        for &s in stages {
            match self.status(s)? {
                StageStatus::NotRun => {
                    return Err(Error::MissingDependency {
                        stage: s.name(),
                        artifact: s.outputs().join(", "),
                    })
                }
                StageStatus::Stale if !self.opts.force => return Err(Error::StaleDependency { stage: s.name() }),
                _ => {}
            }
        }
        Ok(())
    }

    /// Re-runs only the stages downstream of `param` for each value, each
    /// in its own copy of the working directory under `sweeps/`.
    pub fn sweep(&self, param: SweepParam, values: &[usize], mode: QueryMode) -> Result<SweepReport> {
        if values.is_empty() {
            return Err(Error::invalid("sweep needs at least one value"));
        }
        if mode == QueryMode::Base {
            return Err(Error::invalid("the base retriever has no hyperparameters to sweep"));
        }
        if values.contains(&0) {
            return Err(Error::invalid(format!("{param} values must be positive")));
        }
        let invariant: &[Stage] = match param {
            SweepParam::M => &[Stage::GenPairsZeroShot, Stage::BuildVocab],
            SweepParam::NE | SweepParam::NA => &[
                Stage::GenPairsZeroShot,
                Stage::BuildVocab,
                Stage::GenCandidates,
                Stage::GenPairsCandidate,
                Stage::SoftLabels,
                Stage::TrainEntity,
                Stage::TrainAspect,
            ],
        };
        self.require_current(invariant)?;

        let metrics = self.cfg.eval.parsed_metrics()?;
        let qrels = Qrels::load(&self.cfg.paths.qrels)?;
        let score = |ws: &Workspace, m: QueryMode| -> Result<BTreeMap<String, f64>> {
            Ok(evaluate(&Run::load(&ws.path(&run_file(m)))?, &qrels, &metrics).means)
        };
        self.ensure(Stage::Query(QueryMode::Base))?;
        let base = score(&self.ws, QueryMode::Base)?;

        let mut rows = Vec::new();
        for &value in values {
            let dir = self.ws.path(SWEEP_DIR).join(format!("{param}-{value}"));
            self.ws.fork(&dir)?;
            let mut cfg = self.cfg.clone();
            cfg.paths.work_dir = dir;
            match param {
                SweepParam::M => {
                    cfg.candidates.m = value;
                    cfg.inference.m = value;
                }
                SweepParam::NE => cfg.inference.n_e = value,
                SweepParam::NA => cfg.inference.n_a = value,
            }
            let sub = Pipeline::new(
                cfg,
                RunOptions {
                    force: false,
                    strict: self.opts.strict,
                },
            )?;
            let ran = sub.ensure(Stage::Query(mode))?;
            rows.push(SweepRow {
                value,
                metrics: score(&sub.ws, mode)?,
                stages_run: ran.into_iter().map(|r| r.stage).collect(),
            });
        }
        let report = SweepReport { param, mode, base, rows };
        save_json(&report, &self.ws.report_path(&format!("sweep-{param}")))?;
        let tsv = report.to_tsv();
        write_atomic(&self.ws.path(&format!("{REPORT_DIR}/sweep-{param}.tsv")), |w| w.write_all(tsv.as_bytes()))?;
        Ok(report)
    }

    /// Collects the stage and evaluation reports written so far.
    pub fn report(&self) -> Result<PipelineReport> {
        let mut r = PipelineReport::default();
        for s in Stage::ALL {
            let p = self.ws.report_path(&s.file_stem());
            if p.is_file() {
                r.stages.push(load_json(&p)?);
            }
        }
        if let Ok(entries) = std::fs::read_dir(self.ws.path(REPORT_DIR)) {
            let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                if let Some(run) = name.strip_prefix("metrics-").and_then(|n| n.strip_suffix(".json")) {
                    let e: EvalReport = load_json(&p)?;
                    r.evaluations.insert(run.to_string(), e.means);
                }
            }
        }
        for s in &r.stages {
            r.total_seconds += s.seconds;
            r.prompt_tokens += s.llm.prompt_tokens;
            r.completion_tokens += s.llm.completion_tokens;
            r.cost_usd += s.cost_usd;
            r.warnings += s.warnings;
        }
        save_json(&r, &self.ws.report_path("summary"))?;
        Ok(r)
    }
}

/// Counts describing a written synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub documents: usize,
    pub queries: usize,
    pub entities: usize,
    pub aspects: usize,
    pub mean_pairs_per_doc: f64,
    pub mean_aspects_per_entity: f64,
    pub config_written: bool,
}

/// Generates a corpus into `out`: documents, queries, qrels, planted pairs,
/// the synonym map, the spec, and (unless one exists) a `pairsem.toml`
/// that runs the pipeline on it with the oracle extractor.
pub fn write_synthetic_corpus(spec: &SynthSpec, out: &Path) -> Result<SynthSummary> {
    let c = generate_corpus(spec)?;
    save_jsonl(&c.docs, &out.join("docs.jsonl"))?;
    save_jsonl(&c.queries, &out.join("queries.jsonl"))?;
    c.qrels.save(&out.join("qrels.tsv"))?;
    save_jsonl(&c.gold_pairs.values().collect::<Vec<_>>(), &out.join("gold_pairs.jsonl"))?;
    save_jsonl(&c.query_pairs.values().collect::<Vec<_>>(), &out.join("query_pairs.jsonl"))?;
    save_json(&c.synonyms, &out.join("synonyms.json"))?;
    save_json(spec, &out.join("spec.json"))?;
    let config = out.join("pairsem.toml");
    let config_written = !config.exists();
    if config_written {
        let text = PipelineConfig::synthetic_benchmark().to_toml()?;
        write_atomic(&config, |w| w.write_all(text.as_bytes()))?;
    }
    Ok(SynthSummary {
        documents: c.docs.len(),
        queries: c.queries.len(),
        entities: c.entities.len(),
        aspects: c.aspects.len(),
        mean_pairs_per_doc: c.mean_pairs_per_doc(),
        mean_aspects_per_entity: c.mean_aspects_per_entity(),
        config_written,
    })
}
