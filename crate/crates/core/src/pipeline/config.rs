use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::candidates::CandidateOptions;
use crate::error::{Error, Result};
use crate::eval::{Metric, parse_metrics};
use crate::matching::InferenceConfig;
use crate::pairgen::GenerationOptions;
use crate::predictors::TrainConfig;
use crate::providers::{
    Embedder, HttpConfig, LlmProvider, OpenAiEmbedder, OpenAiLlm, OracleExtractor, RecordingLlm, ReplayLlm,
    TokenHashEmbedder,
};
use crate::relevance::LabelNormalization;
use crate::vocab::VocabOptions;

/// Everything one working directory needs, read from a single TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub provider: ProviderConfig,
    pub generation: GenerationOptions,
    pub vocab: VocabOptions,
    pub candidates: CandidateOptions,
    pub labels: LabelConfig,
    pub train: TrainSection,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Where stage artifacts, stamps, and reports live.
    pub work_dir: PathBuf,
    pub docs: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            work_dir: "work".into(),
            docs: "docs.jsonl".into(),
            queries: "queries.jsonl".into(),
            qrels: "qrels.tsv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LlmKind {
    /// Rule-based extractor for synthetic corpora.
    Oracle,
    /// Recorded responses only; unrecorded requests fail.
    Replay,
    Openai,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    TokenHash,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub llm: LlmKind,
    /// Surface-to-canonical map for the oracle extractor (JSON object).
    pub synonyms: Option<PathBuf>,
    /// Fixture directory: read by `replay`, written by `openai` when set.
    pub replay_dir: Option<PathBuf>,
    pub embedder: EmbedderKind,
    pub dim: usize,
    /// Token-hash seed.
    pub seed: u64,
    pub batch_size: usize,
    pub usd_per_1k_prompt: f64,
    pub usd_per_1k_completion: f64,
    pub http: HttpConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            llm: LlmKind::Oracle,
            synonyms: None,
            replay_dir: None,
            embedder: EmbedderKind::TokenHash,
            dim: 256,
            seed: 0,
            batch_size: 64,
            usd_per_1k_prompt: 0.0,
            usd_per_1k_completion: 0.0,
            http: HttpConfig::default(),
        }
    }
}

impl ProviderConfig {
    pub fn build_llm(&self) -> Result<Arc<dyn LlmProvider>> {
        Ok(match self.llm {
            LlmKind::Oracle => {
                let synonyms = match &self.synonyms {
                    Some(p) => crate::model::load_json(p)?,
                    None => Default::default(),
                };
                Arc::new(OracleExtractor::new(synonyms))
            }
            LlmKind::Replay => {
                let dir = self
                    .replay_dir
                    .clone()
                    .ok_or_else(|| Error::Config("provider.llm = \"replay\" needs provider.replay_dir".into()))?;
                Arc::new(ReplayLlm::new(dir))
            }
            LlmKind::Openai => {
                let client = OpenAiLlm::new(self.http.clone().with_env());
                match &self.replay_dir {
                    Some(dir) => Arc::new(RecordingLlm::new(client, dir.clone())),
                    None => Arc::new(client),
                }
            }
        })
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn Embedder>> {
        Ok(match self.embedder {
            EmbedderKind::TokenHash => Arc::new(TokenHashEmbedder::new(self.dim, self.seed)?),
            EmbedderKind::Openai => Arc::new(OpenAiEmbedder::new(self.http.clone().with_env(), self.dim, self.batch_size)?),
        })
    }

    /// The settings that change what the LLM returns, without secrets or
    /// paths (file contents are fingerprinted separately).
    pub(crate) fn llm_identity(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.llm,
            "model": (self.llm == LlmKind::Openai).then_some(&self.http.chat_model),
        })
    }

    pub(crate) fn embedder_identity(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": self.embedder,
            "dim": self.dim,
            "seed": (self.embedder == EmbedderKind::TokenHash).then_some(self.seed),
            "model": (self.embedder == EmbedderKind::Openai).then_some(&self.http.embedding_model),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub normalization: LabelNormalization,
    pub parallelism: usize,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            normalization: LabelNormalization::default(),
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub entity: TrainConfig,
    pub aspect: TrainConfig,
    /// Search learning rate and weight decay on corpus P@k before the
    /// final fit.
    pub grid_search: bool,
    /// k for predictor P@k.
    pub eval_k: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            entity: TrainConfig::default(),
            aspect: TrainConfig::default(),
            grid_search: false,
            eval_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metrics: Vec<String>,
    /// Documents kept per query in written run files.
    pub run_depth: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: ["ndcg@10", "ndcg@20", "recall@20", "recall@50"].map(String::from).to_vec(),
            run_depth: 100,
        }
    }
}

impl EvalConfig {
    pub fn parsed_metrics(&self) -> Result<Vec<Metric>> {
        parse_metrics(&self.metrics.join(","))
    }
}

static VAR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"));

/// Replaces every `${NAME}` with the environment variable's value; an unset
/// variable is an error.
pub fn interpolate_env(text: &str) -> Result<String> {
    let mut missing = Vec::new();
    let out = VAR.replace_all(text, |c: &regex::Captures<'_>| match std::env::var(&c[1]) {
        Ok(v) => v,
        Err(_) => {
            missing.push(c[1].to_string());
            String::new()
        }
    });
    if !missing.is_empty() {
        return Err(Error::Config(format!("unset environment variable(s): {}", missing.join(", "))));
    }
    Ok(out.into_owned())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses TOML after environment interpolation; relative paths are taken
    /// relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let text = interpolate_env(text)?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [
            &mut cfg.paths.work_dir,
            &mut cfg.paths.docs,
            &mut cfg.paths.queries,
            &mut cfg.paths.qrels,
        ] {
            resolve(base_dir, p);
        }
        for p in [&mut cfg.provider.synonyms, &mut cfg.provider.replay_dir].into_iter().flatten() {
            resolve(base_dir, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.provider;
        if p.dim == 0 || p.batch_size == 0 {
            return Err(Error::Config("provider.dim and provider.batch_size must be positive".into()));
        }
        if self.candidates.m == 0 || self.candidates.knn == 0 {
            return Err(Error::Config("candidates.m and candidates.knn must be positive".into()));
        }
        if self.vocab.max_cluster_size == 0 {
            return Err(Error::Config("vocab.max_cluster_size must be positive".into()));
        }
        if self.train.eval_k == 0 || self.eval.run_depth == 0 {
            return Err(Error::Config("train.eval_k and eval.run_depth must be positive".into()));
        }
        self.train.entity.validate().map_err(|e| Error::Config(format!("train.entity: {e}")))?;
        self.train.aspect.validate().map_err(|e| Error::Config(format!("train.aspect: {e}")))?;
        self.inference.validate().map_err(|e| Error::Config(format!("inference: {e}")))?;
        self.eval.parsed_metrics().map_err(|e| Error::Config(format!("eval.metrics: {e}")))?;
        Ok(())
    }

    /// Settings that separate the synthetic benchmark from the library
    /// defaults: the oracle extractor, and a learning rate and epoch budget
    /// the token-hash embeddings need to converge.
    pub fn synthetic_benchmark() -> Self {
        let mut cfg = Self::default();
        cfg.provider.synonyms = Some("synonyms.json".into());
        cfg.train.entity = TrainConfig {
            learning_rate: 1e-2,
            epochs: 150,
            ..TrainConfig::default()
        };
        cfg.train.aspect = TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            ..TrainConfig::default()
        };
        cfg
    }
}
