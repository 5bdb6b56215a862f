//! Runs the generate → embed → rerank ablation grid and the baselines over one
//! split, producing comparable metric summaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    filter_by_likelihood, CorpusError, DialoguePoint, LabelCatalog, Likelihood, Split, SplitAssignment,
};
use crate::embedder::{
    cosine_similarity, EmbedError, Embedder, EmbedderSpec, HashEmbedder, RemoteEmbedder, EMBED_API_BASE_ENV,
    EMBED_API_KEY_ENV,
};
use crate::llm::{
    ContentCache, LlmClient, LlmError, OracleBackend, RemoteChatBackend, RetryPolicy, ScriptRule, ScriptedBackend,
};
use crate::metrics::{summarize, MetricSummary, MetricsError, RankRecord, DEFAULT_K_VALUES};
use crate::retrieval::{
    build_index, catalog_digest, rank_text, tfidf_fit, tfidf_rank, LabelIndex, RankedList, RetrievalError,
    TfIdfEmbedder, TfIdfRanker, DEFAULT_K,
};
use crate::stages::{
    self, generate_hypothesis, rerank, serialize_dialogue, zero_shot_classify, CallSettings, Hypothesis,
    PromptStrategy, RerankOutcome, StageError, StrategyName, MAX_RERANK_K, TEMPLATE_VERSION,
};

pub const GENERATION_MAX_TOKENS: u32 = 64;
pub const RERANK_MAX_TOKENS: u32 = 128;
pub const ZERO_SHOT_MAX_TOKENS: u32 = 128;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config {name:?}: {reason}")]
    Config { name: String, reason: String },
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("backend {id:?}: {source}")]
    Backend {
        id: String,
        #[source]
        source: LlmError,
    },
    #[error("split {split} has no points at likelihood >= {threshold}")]
    EmptySplit { split: Split, threshold: u8 },
    #[error("point {point_id} has label {label_id}, which is not in split {split}")]
    Leakage { point_id: String, label_id: usize, split: Split },
    #[error("run config list is empty")]
    NoConfigs,
    #[error("duplicate run name {0:?}")]
    DuplicateName(String),
    #[error("point {point_id}: {source}")]
    Point {
        point_id: String,
        #[source]
        source: Box<PipelineError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FullPipeline,
    EmbedOnlyDialogue,
    TfidfBaseline,
    ZeroShotClassification,
}

/// Which documents the TF-IDF vocabulary and idf are fitted on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfidfFit {
    #[default]
    Labels,
    LabelsAndTrainDialogues,
}

fn default_strategy() -> StrategyName {
    StrategyName::WithExamples
}
fn default_k() -> usize {
    DEFAULT_K
}
fn default_split() -> Split {
    Split::Test
}
fn default_threshold() -> Likelihood {
    Likelihood::DEFAULT_THRESHOLD
}
fn default_k_values() -> Vec<usize> {
    DEFAULT_K_VALUES.to_vec()
}

/// One cell of the experiment matrix. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub method: Method,
    #[serde(default)]
    pub use_generation: bool,
    #[serde(default)]
    pub use_rerank: bool,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyName,
    #[serde(default)]
    pub embedder: EmbedderSpec,
    /// Generation backend; also the classifier for the zero-shot baseline.
    #[serde(default)]
    pub gen_backend: Option<String>,
    #[serde(default)]
    pub rerank_backend: Option<String>,
    #[serde(default = "default_k")]
    pub k: usize,
    /// When set, must equal the seed of the split being evaluated.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_split")]
    pub split: Split,
    #[serde(default = "default_threshold")]
    pub likelihood_threshold: Likelihood,
    #[serde(default)]
    pub tfidf_fit: TfidfFit,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub temperature: f64,
}

impl RunConfig {
    pub fn new(name: impl Into<String>, method: Method) -> Self {
        Self {
            name: name.into(),
            method,
            use_generation: false,
            use_rerank: false,
            strategy: default_strategy(),
            embedder: EmbedderSpec::default(),
            gen_backend: None,
            rerank_backend: None,
            k: DEFAULT_K,
            seed: None,
            split: Split::Test,
            likelihood_threshold: Likelihood::DEFAULT_THRESHOLD,
            tfidf_fit: TfidfFit::Labels,
            k_values: default_k_values(),
            temperature: 0.0,
        }
    }

    /// A full-pipeline cell with the given stage toggles.
    pub fn cell(name: impl Into<String>, generate: Option<&str>, rerank: Option<&str>) -> Self {
        let mut c = Self::new(name, Method::FullPipeline);
        c.use_generation = generate.is_some();
        c.gen_backend = generate.map(str::to_string);
        c.use_rerank = rerank.is_some();
        c.rerank_backend = rerank.map(str::to_string);
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |reason: &str| Err(PipelineError::Config { name: self.name.clone(), reason: reason.to_string() });
        if self.name.trim().is_empty() {
            return fail("name is empty");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.use_rerank && self.k > MAX_RERANK_K {
            return fail("rerank depth k must be at most 50");
        }
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return fail("k_values must be non-empty and positive");
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be >= 0");
        }
        match self.method {
            Method::FullPipeline => {
                if self.use_generation && self.gen_backend.is_none() {
                    return fail("use_generation requires gen_backend");
                }
                if self.use_rerank && self.rerank_backend.is_none() {
                    return fail("use_rerank requires rerank_backend");
                }
            }
            Method::ZeroShotClassification => {
                if self.gen_backend.is_none() {
                    return fail("zero_shot_classification requires gen_backend");
                }
                if self.use_generation || self.use_rerank {
                    return fail("baselines do not take stage toggles");
                }
            }
            Method::EmbedOnlyDialogue | Method::TfidfBaseline => {
                if self.use_generation || self.use_rerank {
                    return fail("baselines do not take stage toggles");
                }
            }
        }
        Ok(())
    }

    fn backend_ids(&self) -> Vec<&str> {
        let mut ids = Vec::new();
        let gen_used = (self.method == Method::FullPipeline && self.use_generation)
            || self.method == Method::ZeroShotClassification;
        if gen_used {
            ids.extend(self.gen_backend.as_deref());
        }
        if self.method == Method::FullPipeline && self.use_rerank {
            ids.extend(self.rerank_backend.as_deref());
        }
        ids
    }
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_backend_in_flight() -> usize {
    8
}

/// How to reach a chat backend; the map key is the backend id used in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// OpenAI-style endpoint; base URL from `base_url` or `LLM_API_BASE`.
    Remote {
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_url: Option<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
        #[serde(default = "default_backend_in_flight")]
        max_in_flight: usize,
    },
    /// Answers from ground truth.
    Oracle,
    Scripted {
        rules: Vec<ScriptRule>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<String>,
    },
}

/// The built-in oracle backend id, available without declaration.
pub const ORACLE_BACKEND: &str = "oracle";

fn digest_json(value: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("JSON values always serialize")))
}

pub struct ResolvedBackend {
    pub client: LlmClient,
    /// Model string sent in requests, and hence part of every cache key.
    pub model: String,
}

/// Backend specs plus lazily resolved clients sharing one cache.
pub struct BackendRegistry {
    specs: BTreeMap<String, BackendSpec>,
    cache: Option<ContentCache>,
    retry: RetryPolicy,
    resolved: Mutex<HashMap<String, Arc<ResolvedBackend>>>,
}

impl BackendRegistry {
    pub fn new(specs: BTreeMap<String, BackendSpec>, cache: Option<ContentCache>) -> Self {
        Self { specs, cache, retry: RetryPolicy::default(), resolved: Mutex::new(HashMap::new()) }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn cache(&self) -> Option<&ContentCache> {
        self.cache.as_ref()
    }

    pub fn spec(&self, id: &str) -> Option<BackendSpec> {
        match self.specs.get(id) {
            Some(s) => Some(s.clone()),
            None if id == ORACLE_BACKEND => Some(BackendSpec::Oracle),
            None => None,
        }
    }

    pub fn resolve(
        &self,
        id: &str,
        points: &[DialoguePoint],
        catalog: &LabelCatalog,
    ) -> Result<Arc<ResolvedBackend>, PipelineError> {
        let spec = self.spec(id).ok_or_else(|| PipelineError::UnknownBackend(id.to_string()))?;
        // The oracle answers from the corpus it was built over, so it is
        // memoized per corpus rather than per id.
        let oracle_model = matches!(spec, BackendSpec::Oracle).then(|| {
            let truth: Vec<_> =
                points.iter().map(|p| json!([stages::serialize_point(p), catalog.text(p.misconception_id)])).collect();
            format!("oracle:{}", &digest_json(&json!(truth))[..16])
        });
        let memo_key = match &oracle_model {
            Some(model) => format!("{id}\n{model}"),
            None => id.to_string(),
        };
        let mut resolved = self.resolved.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(b) = resolved.get(&memo_key) {
            return Ok(b.clone());
        }
        let backend_err = |source| PipelineError::Backend { id: id.to_string(), source };
        let (backend, model, in_flight): (Arc<dyn crate::llm::ChatBackend>, String, usize) = match &spec {
            BackendSpec::Remote { model, base_url, timeout_secs, max_in_flight } => {
                let remote = RemoteChatBackend::from_env(id, base_url.as_deref(), Duration::from_secs(*timeout_secs))
                    .map_err(backend_err)?;
                (Arc::new(remote), model.clone(), *max_in_flight)
            }
            BackendSpec::Oracle => {
                let model = oracle_model.expect("computed for oracle specs");
                (Arc::new(OracleBackend::new(id, points, catalog)), model, 64)
            }
            BackendSpec::Scripted { rules, default } => {
                let model = format!("scripted:{}", &digest_json(&json!({"rules": rules, "default": default}))[..16]);
                let scripted = ScriptedBackend::new(id, rules.clone(), default.clone()).map_err(backend_err)?;
                (Arc::new(scripted), model, 64)
            }
        };
        let mut client = LlmClient::new(backend).with_retry(self.retry).with_max_in_flight(in_flight);
        if let Some(cache) = &self.cache {
            client = client.with_cache(cache.clone());
        }
        let entry = Arc::new(ResolvedBackend { client, model });
        resolved.insert(memo_key, entry.clone());
        Ok(entry)
    }
}

/// Inputs shared by every run of a matrix.
pub struct Experiment<'a> {
    pub catalog: &'a LabelCatalog,
    /// The whole corpus; runs filter and select their split themselves.
    pub points: &'a [DialoguePoint],
    pub split: &'a SplitAssignment,
    pub backends: &'a BackendRegistry,
    /// Worker threads per run.
    pub max_in_flight: usize,
}

/// An embedder together with the label index it produced.
pub struct PreparedEmbedder {
    pub embedder: Box<dyn Embedder>,
    pub index: LabelIndex,
}

fn tfidf_documents<'a>(fit: TfidfFit, exp: &Experiment<'a>) -> Vec<&'a str> {
    let mut docs: Vec<&str> = exp.catalog.texts().iter().map(String::as_str).collect();
    if fit == TfidfFit::LabelsAndTrainDialogues {
        let train = exp.split.labels(Split::Train);
        docs.extend(
            exp.points
                .iter()
                .filter(|p| train.contains(&p.misconception_id))
                .flat_map(|p| p.student_turns().map(|t| t.text.as_str())),
        );
    }
    docs
}

pub fn prepare_embedder(
    spec: &EmbedderSpec,
    tfidf: TfidfFit,
    exp: &Experiment<'_>,
) -> Result<PreparedEmbedder, PipelineError> {
    let embedder: Box<dyn Embedder> = match spec {
        EmbedderSpec::HashLocal { dim, ngram } => Box::new(HashEmbedder::new(*dim, *ngram)?),
        EmbedderSpec::Tfidf => Box::new(TfIdfEmbedder::new(tfidf_fit(&tfidf_documents(tfidf, exp))?)),
        EmbedderSpec::RemoteApi { model, dim, base_url, batch_size, max_in_flight } => {
            let base = match base_url {
                Some(b) => b.clone(),
                None => std::env::var(EMBED_API_BASE_ENV).map_err(|_| {
                    EmbedError::Config(format!("{EMBED_API_BASE_ENV} is not set and no base_url configured"))
                })?,
            };
            let mut remote = RemoteEmbedder::new(
                model.clone(),
                *dim,
                &base,
                std::env::var(EMBED_API_KEY_ENV).ok(),
                *batch_size,
                *max_in_flight,
                Duration::from_secs(120),
            )?;
            if let Some(cache) = exp.backends.cache() {
                remote = remote.with_cache(cache.clone());
            }
            Box::new(remote)
        }
    };
    let index = build_index(exp.catalog, embedder.as_ref())?;
    Ok(PreparedEmbedder { embedder, index })
}

/// Per-point trace of every stage that ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub point_id: String,
    pub true_label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<Hypothesis>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hypothesis_cosine: Option<f64>,
    /// True label's rank before reranking (for baselines, the method's rank).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank: Option<RerankOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zero_shot_fallback: Option<bool>,
    pub final_rank: Option<usize>,
    pub final_top_k: Vec<usize>,
    /// Set when the point could not be processed; it is then scored at the
    /// penalty rank.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl PointResult {
    fn new(point: &DialoguePoint) -> Self {
        Self {
            point_id: point.id.clone(),
            true_label: point.misconception_id,
            hypothesis: None,
            hypothesis_cosine: None,
            retrieval_rank: None,
            rerank: None,
            zero_shot_fallback: None,
            final_rank: None,
            final_top_k: Vec::new(),
            failure: None,
        }
    }

    fn finish(mut self, list: &RankedList, k: usize) -> Self {
        self.final_rank = list.true_rank();
        self.final_top_k = list.top(k).to_vec();
        self
    }

    fn failed(mut self, reason: String, penalty_rank: usize) -> Self {
        log::warn!("{}: {reason}; scoring at penalty rank {penalty_rank}", self.point_id);
        self.failure = Some(reason);
        self.final_rank = Some(penalty_rank);
        self
    }

    pub fn record(&self) -> RankRecord {
        RankRecord {
            point_id: self.point_id.clone(),
            true_rank: self.final_rank,
            hypothesis_cosine: self.hypothesis_cosine,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankStats {
    pub reranked: usize,
    /// Points whose true label was inside the reranked head.
    pub true_in_top_k: usize,
    pub promoted_to_rank1: usize,
    pub demoted_from_rank1: usize,
    pub parse_fallbacks: usize,
}

/// Conventions that affect how numbers in a report should be read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub template_version: String,
    pub embedder_fingerprint: String,
    pub catalog_size: usize,
    pub catalog_digest: String,
    pub split_seed: u64,
    pub split_basis: String,
    pub tie_break: String,
    pub tfidf_weighting: String,
    pub absent_rank_policy: String,
    pub rerank_tail_policy: String,
    pub zero_shot_tail_policy: String,
    pub temperature: f64,
    pub max_tokens: BTreeMap<String, u32>,
    pub backend_models: BTreeMap<String, String>,
    pub n_failures: usize,
    pub n_over_length_hypotheses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub name: String,
    pub fingerprint: String,
    pub config: RunConfig,
    pub metadata: RunMetadata,
    pub summary: MetricSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rerank_stats: Option<RerankStats>,
    pub points: Vec<PointResult>,
}

impl RunArtifact {
    pub fn records(&self) -> Vec<RankRecord> {
        self.points.iter().map(PointResult::record).collect()
    }
}

/// Points evaluated by `config`: likelihood-filtered, then restricted to the
/// configured split's labels.
pub fn select_points(config: &RunConfig, exp: &Experiment<'_>) -> Result<Vec<DialoguePoint>, PipelineError> {
    let filtered = filter_by_likelihood(exp.points, config.likelihood_threshold);
    let selected: Vec<DialoguePoint> = exp.split.select(&filtered, config.split).into_iter().cloned().collect();
    let labels = exp.split.labels(config.split);
    if let Some(p) = selected.iter().find(|p| !labels.contains(&p.misconception_id)) {
        return Err(PipelineError::Leakage {
            point_id: p.id.clone(),
            label_id: p.misconception_id,
            split: config.split,
        });
    }
    if selected.is_empty() {
        return Err(PipelineError::EmptySplit { split: config.split, threshold: config.likelihood_threshold.value() });
    }
    Ok(selected)
}

struct RunResources<'a> {
    config: &'a RunConfig,
    catalog: &'a LabelCatalog,
    prepared: &'a PreparedEmbedder,
    tfidf: Option<TfIdfRanker>,
    generator: Option<Arc<ResolvedBackend>>,
    reranker: Option<Arc<ResolvedBackend>>,
    strategy: PromptStrategy,
}

enum PointOutcome {
    Done(PointResult),
    Failed(PointResult, String),
}

fn is_point_level(err: &PipelineError) -> bool {
    matches!(
        err,
        PipelineError::Stage(StageError::EmptyHypothesis { .. })
            | PipelineError::Retrieval(RetrievalError::Embed(EmbedError::EmptyText { .. }))
            | PipelineError::Embed(EmbedError::EmptyText { .. })
    )
}

fn process_point(point: &DialoguePoint, res: &RunResources<'_>) -> Result<PointOutcome, PipelineError> {
    let mut result = PointResult::new(point);
    let k_report = res.config.k;
    let outcome: Result<PointResult, PipelineError> = (|| match res.config.method {
        Method::EmbedOnlyDialogue => {
            let list = crate::retrieval::direct_embedding_baseline(
                point,
                &res.prepared.index,
                res.prepared.embedder.as_ref(),
            )?;
            result.retrieval_rank = list.true_rank();
            Ok(result.clone().finish(&list, k_report))
        }
        Method::TfidfBaseline => {
            let ranker = res.tfidf.as_ref().expect("tf-idf ranker is prepared for tf-idf runs");
            let list = tfidf_rank(point, ranker);
            result.retrieval_rank = list.true_rank();
            Ok(result.clone().finish(&list, k_report))
        }
        Method::ZeroShotClassification => {
            let backend = res.generator.as_ref().expect("zero-shot runs resolve a backend");
            let settings = CallSettings {
                model: backend.model.clone(),
                max_tokens: ZERO_SHOT_MAX_TOKENS,
                temperature: res.config.temperature,
            };
            let (zs, list) = zero_shot_classify(point, res.catalog, res.config.k, &settings, &backend.client)?;
            result.zero_shot_fallback = Some(zs.fallback_used);
            result.retrieval_rank = list.true_rank();
            Ok(result.clone().finish(&list, k_report))
        }
        Method::FullPipeline => {
            let query = match &res.generator {
                Some(backend) => {
                    let settings = CallSettings {
                        model: backend.model.clone(),
                        max_tokens: GENERATION_MAX_TOKENS,
                        temperature: res.config.temperature,
                    };
                    let hyp = generate_hypothesis(point, &res.strategy, &settings, &backend.client)?;
                    let text = hyp.text.clone();
                    result.hypothesis = Some(hyp);
                    text
                }
                None => serialize_dialogue(point),
            };
            let embedder = res.prepared.embedder.as_ref();
            let list = rank_text(&query, point, &res.prepared.index, embedder)?;
            if result.hypothesis.is_some() {
                let hyp_vec = embedder.embed(&query)?;
                let truth = res
                    .prepared
                    .index
                    .vector(point.misconception_id)
                    .ok_or(StageError::UnknownLabel(point.misconception_id))?;
                result.hypothesis_cosine = Some(cosine_similarity(truth, &hyp_vec)?);
            }
            result.retrieval_rank = list.true_rank();
            let list = match &res.reranker {
                Some(backend) => {
                    let settings = CallSettings {
                        model: backend.model.clone(),
                        max_tokens: RERANK_MAX_TOKENS,
                        temperature: res.config.temperature,
                    };
                    let depth = res.config.k.min(res.catalog.len());
                    let (outcome, merged) = rerank(&query, &list, res.catalog, depth, &settings, &backend.client)?;
                    result.rerank = Some(outcome);
                    merged
                }
                None => list,
            };
            Ok(result.clone().finish(&list, k_report))
        }
    })();
    match outcome {
        Ok(done) => Ok(PointOutcome::Done(done)),
        Err(err) if is_point_level(&err) => Ok(PointOutcome::Failed(result, err.to_string())),
        Err(err) => Err(PipelineError::Point { point_id: point.id.clone(), source: Box::new(err) }),
    }
}

fn fingerprint(
    config: &RunConfig,
    exp: &Experiment<'_>,
    prepared: &PreparedEmbedder,
    models: &BTreeMap<String, String>,
) -> String {
    let value = json!({
        "config": config,
        "backend_models": models,
        "backend_specs": config.backend_ids().iter().map(|id| (id.to_string(), exp.backends.spec(id))).collect::<BTreeMap<_, _>>(),
        "embedder": prepared.embedder.fingerprint(),
        "template_version": TEMPLATE_VERSION,
        "catalog": catalog_digest(exp.catalog),
        "split": exp.split,
    });
    digest_json(&value)
}

fn rerank_stats(points: &[PointResult], k: usize) -> RerankStats {
    let mut stats = RerankStats::default();
    for p in points.iter().filter(|p| p.rerank.is_some()) {
        let outcome = p.rerank.as_ref().expect("filtered");
        stats.reranked += 1;
        if p.retrieval_rank.is_some_and(|r| r <= k) {
            stats.true_in_top_k += 1;
        }
        if p.retrieval_rank.is_some_and(|r| r > 1) && p.final_rank == Some(1) {
            stats.promoted_to_rank1 += 1;
        }
        if p.retrieval_rank == Some(1) && p.final_rank != Some(1) {
            stats.demoted_from_rank1 += 1;
        }
        if outcome.fallback_used {
            stats.parse_fallbacks += 1;
        }
    }
    stats
}

/// Runs one configuration, building its embedder and index.
pub fn run(config: &RunConfig, exp: &Experiment<'_>) -> Result<RunArtifact, PipelineError> {
    config.validate()?;
    let prepared = prepare_embedder(&config.embedder, config.tfidf_fit, exp)?;
    run_prepared(config, exp, &prepared)
}

/// Runs one configuration against an already built embedder and index.
pub fn run_prepared(
    config: &RunConfig,
    exp: &Experiment<'_>,
    prepared: &PreparedEmbedder,
) -> Result<RunArtifact, PipelineError> {
    config.validate()?;
    if let Some(seed) = config.seed {
        if seed != exp.split.seed {
            return Err(PipelineError::Config {
                name: config.name.clone(),
                reason: format!("config seed {seed} does not match split seed {}", exp.split.seed),
            });
        }
    }
    prepared.index.check_catalog(exp.catalog)?;
    prepared.index.check_embedder(prepared.embedder.as_ref())?;
    let points = select_points(config, exp)?;

    let strategy = PromptStrategy::preset(config.strategy);
    strategy.validate()?;
    let mut models = BTreeMap::new();
    let mut resolve = |id: Option<&String>| -> Result<Option<Arc<ResolvedBackend>>, PipelineError> {
        match id {
            Some(id) => {
                let b = exp.backends.resolve(id, exp.points, exp.catalog)?;
                models.insert(id.clone(), b.model.clone());
                Ok(Some(b))
            }
            None => Ok(None),
        }
    };
    let (generator, reranker) = match config.method {
        Method::FullPipeline => (
            if config.use_generation { resolve(config.gen_backend.as_ref())? } else { None },
            if config.use_rerank { resolve(config.rerank_backend.as_ref())? } else { None },
        ),
        Method::ZeroShotClassification => (resolve(config.gen_backend.as_ref())?, None),
        _ => (None, None),
    };
    let tfidf = match config.method {
        Method::TfidfBaseline => {
            Some(TfIdfRanker::new(tfidf_fit(&tfidf_documents(config.tfidf_fit, exp))?, exp.catalog))
        }
        _ => None,
    };
    let res =
        RunResources { config, catalog: exp.catalog, prepared, tfidf, generator, reranker, strategy: strategy.clone() };

    let penalty = exp.catalog.len();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.max_in_flight.max(1))
        .build()
        .map_err(|e| PipelineError::Config { name: config.name.clone(), reason: format!("thread pool: {e}") })?;
    let outcomes: Vec<PointOutcome> =
        pool.install(|| points.par_iter().map(|p| process_point(p, &res)).collect::<Result<Vec<_>, _>>())?;
    let mut results: Vec<PointResult> = outcomes
        .into_iter()
        .map(|o| match o {
            PointOutcome::Done(r) => r,
            PointOutcome::Failed(r, reason) => r.failed(reason, penalty),
        })
        .collect();
    results.sort_by(|a, b| a.point_id.cmp(&b.point_id));

    let records: Vec<RankRecord> = results.iter().map(PointResult::record).collect();
    let summary = summarize(&records, &config.k_values, penalty)?;
    let n_over_length =
        results.iter().filter_map(|r| r.hypothesis.as_ref()).filter(|h| !strategy.within_bounds(h.word_count)).count();
    let rerank_stats = (config.method == Method::FullPipeline && config.use_rerank)
        .then(|| rerank_stats(&results, config.k.min(penalty)));

    let metadata = RunMetadata {
        template_version: TEMPLATE_VERSION.to_string(),
        embedder_fingerprint: prepared.embedder.fingerprint(),
        catalog_size: exp.catalog.len(),
        catalog_digest: catalog_digest(exp.catalog),
        split_seed: exp.split.seed,
        split_basis: "labels disjoint across splits; greedy assignment targets 70/10/20 of datapoints".into(),
        tie_break: "descending score, then ascending label id".into(),
        tfidf_weighting: "raw tf; idf = ln((1+N)/(1+df)) + 1; L2-normalized".into(),
        absent_rank_policy: format!(
            "unranked true label scores 0 in MAP/NDCG/recall and rank {penalty} (catalog size) in mean/median; failed points are scored at rank {penalty}"
        ),
        rerank_tail_policy: "positions after k keep embedding order".into(),
        zero_shot_tail_policy: "parsed labels first, remaining labels in ascending id".into(),
        temperature: config.temperature,
        max_tokens: BTreeMap::from([
            ("generation".to_string(), GENERATION_MAX_TOKENS),
            ("rerank".to_string(), RERANK_MAX_TOKENS),
            ("zero_shot".to_string(), ZERO_SHOT_MAX_TOKENS),
        ]),
        n_failures: results.iter().filter(|r| r.failure.is_some()).count(),
        n_over_length_hypotheses: n_over_length,
        backend_models: models.clone(),
    };
    Ok(RunArtifact {
        name: config.name.clone(),
        fingerprint: fingerprint(config, exp, prepared, &models),
        config: config.clone(),
        metadata,
        summary,
        rerank_stats,
        points: results,
    })
}

/// Runs every config in order over the same split, sharing label indexes
/// between configs with the same embedder.
pub fn run_matrix(configs: &[RunConfig], exp: &Experiment<'_>) -> Result<Vec<RunArtifact>, PipelineError> {
    if configs.is_empty() {
        return Err(PipelineError::NoConfigs);
    }
    let mut names = BTreeSet::new();
    for c in configs {
        if !names.insert(c.name.as_str()) {
            return Err(PipelineError::DuplicateName(c.name.clone()));
        }
        c.validate()?;
    }
    let mut prepared: HashMap<String, PreparedEmbedder> = HashMap::new();
    let mut artifacts = Vec::with_capacity(configs.len());
    for c in configs {
        let key = serde_json::to_string(&(&c.embedder, c.tfidf_fit)).expect("embedder specs serialize");
        if !prepared.contains_key(&key) {
            prepared.insert(key.clone(), prepare_embedder(&c.embedder, c.tfidf_fit, exp)?);
        }
        log::info!("running {}", c.name);
        artifacts.push(run_prepared(c, exp, &prepared[&key])?);
    }
    Ok(artifacts)
}

/// The full ablation grid: every backend in each of the four
/// generate/rerank cells, plus the three baselines (15 configs for three
/// backends). The zero-shot baseline uses the first backend.
pub fn ablation_matrix(backends: &[&str], embedder: &EmbedderSpec) -> Vec<RunConfig> {
    let mut configs = Vec::new();
    for &b in backends {
        for (generate, rerank) in [(true, true), (true, false), (false, true), (false, false)] {
            let name = format!("{b} [G{} E R{}]", if generate { "+" } else { "-" }, if rerank { "+" } else { "-" });
            let mut c = RunConfig::cell(name, generate.then_some(b), rerank.then_some(b));
            c.embedder = embedder.clone();
            configs.push(c);
        }
    }
    let mut direct = RunConfig::new("baseline: direct embedding", Method::EmbedOnlyDialogue);
    direct.embedder = embedder.clone();
    configs.push(direct);
    let mut tfidf = RunConfig::new("baseline: tf-idf", Method::TfidfBaseline);
    tfidf.embedder = embedder.clone();
    configs.push(tfidf);
    if let Some(first) = backends.first() {
        let mut zs = RunConfig::new(format!("baseline: zero-shot ({first})"), Method::ZeroShotClassification);
        zs.gen_backend = Some(first.to_string());
        zs.embedder = embedder.clone();
        configs.push(zs);
    }
    configs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, split_by_misconception, SplitFractions, SyntheticConfig};
    use crate::llm::Matcher;

    struct Fixture {
        catalog: LabelCatalog,
        points: Vec<DialoguePoint>,
        split: SplitAssignment,
    }

    fn fixture() -> Fixture {
        let (catalog, points) = generate_synthetic_corpus(&SyntheticConfig::new(60, 30, 4)).unwrap();
        let split = split_by_misconception(&points, &catalog, SplitFractions::default(), 4).unwrap();
        Fixture { catalog, points, split }
    }

    fn exp<'a>(f: &'a Fixture, backends: &'a BackendRegistry) -> Experiment<'a> {
        Experiment { catalog: &f.catalog, points: &f.points, split: &f.split, backends, max_in_flight: 4 }
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new("x", Method::FullPipeline);
        c.use_rerank = true;
        assert!(c.validate().is_err());
        c.rerank_backend = Some("oracle".into());
        c.validate().unwrap();
        c.k = 51;
        assert!(c.validate().is_err());
        let zs = RunConfig::new("z", Method::ZeroShotClassification);
        assert!(zs.validate().is_err());
        let mut baseline = RunConfig::new("b", Method::TfidfBaseline);
        baseline.use_generation = true;
        assert!(baseline.validate().is_err());
    }

    #[test]
    fn config_file_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"name":"n","method":"embed_only_dialogue"}"#).unwrap();
        assert_eq!(c, RunConfig::new("n", Method::EmbedOnlyDialogue));
        assert!(serde_json::from_str::<RunConfig>(r#"{"name":"n","method":"tfidf_baseline","bogus":1}"#).is_err());
    }

    #[test]
    fn oracle_cells_reach_rank_one() {
        let f = fixture();
        let registry = BackendRegistry::new(BTreeMap::new(), None);
        let e = exp(&f, &registry);
        let art = run(&RunConfig::cell("g r", Some("oracle"), Some("oracle")), &e).unwrap();
        assert_eq!(art.summary.map_at_k[&1], 1.0);
        assert_eq!(art.summary.mean_rank, 1.0);
        assert_eq!(art.summary.mean_cosine, Some(1.0));
        let stats = art.rerank_stats.unwrap();
        assert_eq!(stats.reranked, art.points.len());
        assert_eq!(stats.parse_fallbacks, 0);
    }

    #[test]
    fn unknown_backend_aborts() {
        let f = fixture();
        let registry = BackendRegistry::new(BTreeMap::new(), None);
        let err = run(&RunConfig::cell("x", Some("nope"), None), &exp(&f, &registry)).unwrap_err();
        assert!(matches!(err, PipelineError::UnknownBackend(id) if id == "nope"));
    }

    #[test]
    fn empty_hypothesis_is_penalized_not_fatal() {
        let f = fixture();
        let specs = BTreeMap::from([(
            "blank".to_string(),
            BackendSpec::Scripted { rules: vec![], default: Some("  \"\" ".into()) },
        )]);
        let registry = BackendRegistry::new(specs, None);
        let art = run(&RunConfig::cell("blank", Some("blank"), None), &exp(&f, &registry)).unwrap();
        assert!(art.points.iter().all(|p| p.failure.is_some() && p.final_rank == Some(f.catalog.len())));
        assert_eq!(art.metadata.n_failures, art.points.len());
        assert_eq!(art.summary.mean_rank, f.catalog.len() as f64);
    }

    #[test]
    fn scripted_rerank_reverses_head() {
        let f = fixture();
        let reverse: String = (1..=10).rev().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        let specs = BTreeMap::from([(
            "rev".to_string(),
            BackendSpec::Scripted {
                rules: vec![ScriptRule { matcher: Matcher::Contains("Rerank these".into()), response: reverse }],
                default: None,
            },
        )]);
        let registry = BackendRegistry::new(specs, None);
        let e = exp(&f, &registry);
        let plain = run(&RunConfig::cell("plain", Some("oracle"), None), &e).unwrap();
        let reversed = run(&RunConfig::cell("rev", Some("oracle"), Some("rev")), &e).unwrap();
        for (a, b) in plain.points.iter().zip(&reversed.points) {
            assert_eq!(a.final_rank, Some(1));
            assert_eq!(b.final_rank, Some(10));
        }
        assert_eq!(reversed.rerank_stats.unwrap().demoted_from_rank1, reversed.points.len());
    }

    #[test]
    fn matrix_rejects_bad_lists() {
        let f = fixture();
        let registry = BackendRegistry::new(BTreeMap::new(), None);
        let e = exp(&f, &registry);
        assert!(matches!(run_matrix(&[], &e), Err(PipelineError::NoConfigs)));
        let c = RunConfig::new("same", Method::TfidfBaseline);
        assert!(matches!(run_matrix(&[c.clone(), c], &e), Err(PipelineError::DuplicateName(_))));
    }

    #[test]
    fn ablation_grid_shape() {
        let configs = ablation_matrix(&["vendor-a", "open-7b", "open-8b"], &EmbedderSpec::default());
        assert_eq!(configs.len(), 15);
        let full = configs.iter().filter(|c| c.method == Method::FullPipeline).count();
        assert_eq!(full, 12);
        let names: BTreeSet<_> = configs.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names.len(), 15);
        for c in &configs {
            c.validate().unwrap();
        }
    }

    #[test]
    fn seed_mismatch_is_rejected() {
        let f = fixture();
        let registry = BackendRegistry::new(BTreeMap::new(), None);
        let mut c = RunConfig::new("s", Method::TfidfBaseline);
        c.seed = Some(f.split.seed + 1);
        assert!(matches!(run(&c, &exp(&f, &registry)), Err(PipelineError::Config { .. })));
        c.seed = Some(f.split.seed);
        run(&c, &exp(&f, &registry)).unwrap();
    }

    #[test]
    fn only_split_points_are_evaluated() {
        let f = fixture();
        let registry = BackendRegistry::new(BTreeMap::new(), None);
        for split in Split::ALL {
            let mut c = RunConfig::new(format!("{split}"), Method::EmbedOnlyDialogue);
            c.split = split;
            let art = run(&c, &exp(&f, &registry)).unwrap();
            let labels = f.split.labels(split);
            assert!(art.points.iter().all(|p| labels.contains(&p.true_label)));
            assert_eq!(art.points.len(), f.split.select(&f.points, split).len());
        }
    }
}
