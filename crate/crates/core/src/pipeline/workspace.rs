use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matching::QueryMode;
use crate::model::{load_json, save_json};

pub const PAIRS_INIT: &str = "pairs_init.jsonl";
pub const VOCAB: &str = "vocab.json";
pub const ENTITY_EMBEDDINGS: &str = "entity_embeddings.jsonl";
pub const ASPECT_EMBEDDINGS: &str = "aspect_embeddings.jsonl";
pub const DOC_EMBEDDINGS: &str = "doc_embeddings.jsonl";
pub const NEIGHBORS: &str = "neighbors.json";
pub const CANDIDATES: &str = "candidates.jsonl";
pub const PAIRS_FINAL: &str = "pairs_final.jsonl";
pub const LABELS: &str = "labels.jsonl";
pub const ENTITY_MODEL: &str = "entity_model.json";
pub const ASPECT_MODEL: &str = "aspect_model.json";
pub const RELEVANCE: &str = "relevance.jsonl";
pub const PREDICTOR_EVAL: &str = "predictor_eval.json";

pub const STAMP_DIR: &str = ".stamps";
pub const REPORT_DIR: &str = "reports";
pub const RUN_DIR: &str = "runs";
pub const SWEEP_DIR: &str = "sweeps";
pub const LOCK_FILE: &str = ".pairsem.lock";

pub fn run_file(mode: QueryMode) -> String {
    format!("{RUN_DIR}/{mode}.tsv")
}

pub fn rankings_file(mode: QueryMode) -> String {
    format!("{RUN_DIR}/{mode}.jsonl")
}

/// The stamped stages of the offline and online pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    GenPairsZeroShot,
    BuildVocab,
    GenCandidates,
    GenPairsCandidate,
    SoftLabels,
    TrainEntity,
    TrainAspect,
    EvalPredictors,
    Query(QueryMode),
}

/// A file a stage reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Input {
    /// Produced by another stage, relative to the working directory.
    Artifact(String),
    /// Supplied by the user.
    External(PathBuf),
}

impl Stage {
    pub const ALL: [Stage; 11] = [
        Stage::GenPairsZeroShot,
        Stage::BuildVocab,
        Stage::GenCandidates,
        Stage::GenPairsCandidate,
        Stage::SoftLabels,
        Stage::TrainEntity,
        Stage::TrainAspect,
        Stage::EvalPredictors,
        Stage::Query(QueryMode::Base),
        Stage::Query(QueryMode::Fast),
        Stage::Query(QueryMode::Llm),
    ];

    pub fn name(self) -> String {
        match self {
            Stage::GenPairsZeroShot => "gen-pairs:zero-shot".into(),
            Stage::BuildVocab => "build-vocab".into(),
            Stage::GenCandidates => "gen-candidates".into(),
            Stage::GenPairsCandidate => "gen-pairs:candidate".into(),
            Stage::SoftLabels => "soft-labels".into(),
            Stage::TrainEntity => "train:entity".into(),
            Stage::TrainAspect => "train:aspect".into(),
            Stage::EvalPredictors => "eval-predictors".into(),
            Stage::Query(m) => format!("query:{m}"),
        }
    }

    /// File-system safe form of [`Stage::name`].
    pub fn file_stem(self) -> String {
        self.name().replace(':', "-")
    }

    pub fn outputs(self) -> Vec<String> {
        let v: &[&str] = match self {
            Stage::GenPairsZeroShot => &[PAIRS_INIT],
            Stage::BuildVocab => &[VOCAB, ENTITY_EMBEDDINGS, ASPECT_EMBEDDINGS],
            Stage::GenCandidates => &[DOC_EMBEDDINGS, NEIGHBORS, CANDIDATES],
            Stage::GenPairsCandidate => &[PAIRS_FINAL],
            Stage::SoftLabels => &[LABELS],
            Stage::TrainEntity => &[ENTITY_MODEL, RELEVANCE],
            Stage::TrainAspect => &[ASPECT_MODEL],
            Stage::EvalPredictors => &[PREDICTOR_EVAL],
            Stage::Query(m) => return vec![run_file(m), rankings_file(m)],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Artifacts read from other stages.
    pub fn artifact_inputs(self) -> Vec<&'static str> {
        match self {
            Stage::GenPairsZeroShot => vec![],
            Stage::BuildVocab => vec![PAIRS_INIT],
            Stage::GenCandidates => vec![PAIRS_INIT, VOCAB],
            Stage::GenPairsCandidate => vec![CANDIDATES, VOCAB],
            Stage::SoftLabels => vec![PAIRS_FINAL, NEIGHBORS, VOCAB],
            Stage::TrainEntity => vec![DOC_EMBEDDINGS, PAIRS_FINAL, LABELS, ENTITY_EMBEDDINGS],
            Stage::TrainAspect => vec![DOC_EMBEDDINGS, PAIRS_FINAL, ENTITY_EMBEDDINGS, ASPECT_EMBEDDINGS],
            Stage::EvalPredictors => vec![
                DOC_EMBEDDINGS,
                PAIRS_FINAL,
                ENTITY_MODEL,
                ASPECT_MODEL,
                ENTITY_EMBEDDINGS,
                ASPECT_EMBEDDINGS,
            ],
            Stage::Query(QueryMode::Base) => vec![DOC_EMBEDDINGS, ENTITY_EMBEDDINGS, ASPECT_EMBEDDINGS],
            Stage::Query(m) => {
                let mut v = vec![
                    DOC_EMBEDDINGS,
                    PAIRS_FINAL,
                    RELEVANCE,
                    ENTITY_MODEL,
                    ASPECT_MODEL,
                    ENTITY_EMBEDDINGS,
                    ASPECT_EMBEDDINGS,
                ];
                if m == QueryMode::Llm {
                    v.push(VOCAB);
                }
                v
            }
        }
    }

    /// Whether the stage calls the LLM.
    pub fn uses_llm(self) -> bool {
        matches!(
            self,
            Stage::GenPairsZeroShot | Stage::BuildVocab | Stage::GenPairsCandidate | Stage::Query(QueryMode::Llm)
        )
    }

    /// The stage producing `artifact`.
    pub fn owner(artifact: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.outputs().iter().any(|o| o == artifact))
    }

    /// Upstream stages, in pipeline order.
    pub fn deps(self) -> Vec<Stage> {
        let mut d: Vec<Stage> = self
            .artifact_inputs()
            .into_iter()
            .map(|a| Stage::owner(a).expect("every artifact input has an owner"))
            .collect();
        d.sort();
        d.dedup();
        d
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Record left by a completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    /// Hash over the stage's settings and every input's content.
    pub fingerprint: String,
    /// Output path to content hash.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    NotRun,
    UpToDate,
    /// Inputs, settings, or outputs changed since the stamp was written.
    Stale,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.root.join(STAMP_DIR).join(format!("{}.json", stage.file_stem()))
    }

    pub fn report_path(&self, stem: &str) -> PathBuf {
        self.root.join(REPORT_DIR).join(format!("{stem}.json"))
    }

    pub fn read_stamp(&self, stage: Stage) -> Result<Option<Stamp>> {
        let p = self.stamp_path(stage);
        if !p.exists() {
            return Ok(None);
        }
        load_json(&p).map(Some)
    }

    pub fn write_stamp(&self, stage: Stage, fingerprint: String) -> Result<Stamp> {
        let outputs = stage
            .outputs()
            .into_iter()
            .map(|o| Ok((o.clone(), hash_file(&self.path(&o))?)))
            .collect::<Result<_>>()?;
        let stamp = Stamp {
            stage: stage.name(),
            fingerprint,
            outputs,
        };
        save_json(&stamp, &self.stamp_path(stage))?;
        Ok(stamp)
    }

    /// Hash over the settings and input contents (not their locations);
    /// `None` when an input is missing.
    pub fn fingerprint(&self, stage: Stage, settings: &serde_json::Value, external: &[PathBuf]) -> Result<Option<String>> {
        let mut h = Sha256::new();
        h.update(stage.name().as_bytes());
        h.update(b"\n");
        h.update(settings.to_string().as_bytes());
        let inputs = stage
            .artifact_inputs()
            .into_iter()
            .map(|a| Input::Artifact(a.to_string()))
            .chain(external.iter().cloned().map(Input::External));
        for (i, input) in inputs.enumerate() {
            let (label, path) = match input {
                Input::Artifact(a) => (a.clone(), self.path(&a)),
                Input::External(p) => (format!("external-{i}"), p),
            };
            if !path.is_file() {
                return Ok(None);
            }
            h.update(b"\n");
            h.update(label.as_bytes());
            h.update(b"=");
            h.update(hash_file(&path)?.as_bytes());
        }
        Ok(Some(hex::encode(h.finalize())))
    }

    pub fn status(&self, stage: Stage, current: Option<&str>) -> Result<StageStatus> {
        let Some(stamp) = self.read_stamp(stage)? else {
            return Ok(StageStatus::NotRun);
        };
        if current != Some(stamp.fingerprint.as_str()) {
            return Ok(StageStatus::Stale);
        }
        for (out, hash) in &stamp.outputs {
            let p = self.path(out);
            if !p.is_file() || &hash_file(&p)? != hash {
                return Ok(StageStatus::Stale);
            }
        }
        Ok(StageStatus::UpToDate)
    }

    /// Takes the per-directory lock; released when the guard drops.
    pub fn lock(&self) -> Result<LockGuard> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Copies artifacts, runs, and stamps into `dest` (leaving out reports
    /// and sweeps) so dependent stages can be re-run there.
    pub fn fork(&self, dest: &Path) -> Result<Workspace> {
        if dest.exists() {
            fs::remove_dir_all(dest).map_err(|e| Error::io(dest, e))?;
        }
        copy_tree(&self.root, dest, &|name| ![REPORT_DIR, SWEEP_DIR, LOCK_FILE].contains(&name))?;
        Ok(Workspace::new(dest))
    }
}

fn copy_tree(src: &Path, dest: &Path, keep: &dyn Fn(&str) -> bool) -> Result<()> {
    fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    for entry in fs::read_dir(src).map_err(|e| Error::io(src, e))? {
        let entry = entry.map_err(|e| Error::io(src, e))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if !keep(&name) {
            continue;
        }
        let from = entry.path();
        let to = dest.join(&*name);
        if from.is_dir() {
            copy_tree(&from, &to, &|_| true)?;
        } else {
            fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
        }
    }
    Ok(())
}

#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
