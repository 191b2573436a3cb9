//! Run orchestration: one TOML configuration shared by every command and
//! one entry point per pipeline stage.
//!
//! Provenance: every artifact records the configuration hash, the corpus
//! hash, and the code version. The configuration hash covers every section
//! except `[paths]`, so relocating a run directory does not change a run's
//! identity. JSON artifacts embed the stamp under a `meta` key, JSON-lines
//! files get a `<name>.meta.json` sidecar, and CSV files open with `#`
//! comment lines. In check mode commands recompute their outputs and
//! verify byte equality against the files on disk instead of writing.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    filter_corpus, load_reviews, sort_chronologically, Corpus, CorpusError, FilterRules, Reject,
};
use crate::embedding::{
    cosine, CachedEmbedder, EmbedError, EmbeddingProvider, HashedNgramEmbedder, HttpEmbedder,
};
use crate::extraction::{
    join_records, read_annotation_records, run_stage2, AnnotatedInteraction, CallOptions,
    ExtractError, Stage2Options,
};
use crate::gateway::{
    CompletionBackend, GatewayError, HttpBackend, PromptTemplates, RetryPolicy, ScriptEntry,
    ScriptedBackend,
};
use crate::hallucination::{compute_report, HallucinationError, MetricReport};
use crate::hashing;
use crate::recommender::{
    cer as cer_value, chronological_split, make_samples, stratified_eval, EvalMetrics,
    FactorModel, Hyperparams, RatingSample, RecError, StratumReport,
};
use crate::synth::{
    generate_corpus, script_pipeline_responses, GroundTruth, ScriptPlan, SynthError, WorldSpec,
};
use crate::vocab::{build_vocabulary, vocab_overlap, AspectVocabulary, VocabError, VocabParams};

/// Version stamp recorded in every artifact.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Invalid configuration or an unmet input precondition. Mapped to the
    /// configuration exit code by the command line front end.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("artifact {path} is invalid: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error("check failed for {path}: {reason}")]
    CheckFailed { path: PathBuf, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Metric(#[from] HallucinationError),
    #[error(transparent)]
    Rec(#[from] RecError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl PipelineError {
    /// True for errors the user fixes by editing the configuration or
    /// running prerequisite commands, as opposed to runtime failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Http,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "scripted" => Ok(Self::Scripted),
            "http" => Ok(Self::Http),
            other => Err(format!(
                "unknown backend kind {other:?} (expected \"scripted\" or \"http\")"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Hashed,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory all derived artifacts live under.
    pub out_dir: PathBuf,
    /// Input review file for `ingest`; also where `synth` writes its
    /// corpus. Defaults to `<out_dir>/raw_reviews.jsonl`.
    pub raw_reviews: Option<PathBuf>,
    /// Prompt template directory; the built-in templates when absent.
    pub templates: Option<PathBuf>,
    /// Scripted backend file. Defaults to `<out_dir>/script.jsonl`.
    pub script: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            raw_reviews: None,
            templates: None,
            script: None,
        }
    }
}

/// Concrete artifact locations for one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPaths {
    pub out_dir: PathBuf,
    pub raw_reviews: PathBuf,
    pub corpus: PathBuf,
    pub rejects: PathBuf,
    pub vocab: PathBuf,
    pub similarity: PathBuf,
    pub annotations: PathBuf,
    pub metrics: PathBuf,
    pub interaction_scores: PathBuf,
    pub model: PathBuf,
    pub eval: PathBuf,
    pub stratified: PathBuf,
    pub cer: PathBuf,
    pub ground_truth: PathBuf,
    pub script: PathBuf,
    pub embed_cache: PathBuf,
    pub templates: Option<PathBuf>,
}

impl PathsConfig {
    pub fn resolve(&self) -> ResolvedPaths {
        let d = &self.out_dir;
        ResolvedPaths {
            out_dir: d.clone(),
            raw_reviews: self
                .raw_reviews
                .clone()
                .unwrap_or_else(|| d.join("raw_reviews.jsonl")),
            corpus: d.join("corpus.jsonl"),
            rejects: d.join("rejects.json"),
            vocab: d.join("vocab.json"),
            similarity: d.join("similarity.csv"),
            annotations: d.join("annotations.jsonl"),
            metrics: d.join("metrics.json"),
            interaction_scores: d.join("interaction_scores.csv"),
            model: d.join("model.json"),
            eval: d.join("eval.json"),
            stratified: d.join("stratified.csv"),
            cer: d.join("cer.csv"),
            ground_truth: d.join("ground_truth.json"),
            script: self.script.clone().unwrap_or_else(|| d.join("script.jsonl")),
            embed_cache: d.join("embed_cache.json"),
            templates: self.templates.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Users with this many records or fewer are dropped (to a fixpoint).
    pub min_user_records: usize,
    pub min_item_records: usize,
    /// Interactions strictly before this timestamp are dropped.
    pub since: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Fraction of the corpus sampled before partitioning.
    pub ratio: f64,
    /// Number of disjoint partitions the sample is split into.
    pub partitions: usize,
    /// Cluster count the aspect candidates are merged down to.
    pub clusters: usize,
    pub seed: u64,
    /// Approximate word budget per abstraction batch.
    pub token_budget: usize,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Stage1Config {
    fn default() -> Self {
        let call = CallOptions::default();
        Self {
            ratio: 0.2,
            partitions: 5,
            clusters: 15,
            seed: 0,
            token_budget: 400,
            model_id: call.model_id,
            temperature: call.temperature,
            max_tokens: call.max_tokens,
        }
    }
}

impl Stage1Config {
    pub fn call(&self) -> CallOptions {
        CallOptions {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    pub fn params(&self, ratio: f64) -> VocabParams {
        VocabParams {
            ratio,
            partitions: self.partitions,
            clusters: self.clusters,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let call = CallOptions::default();
        Self {
            model_id: call.model_id,
            temperature: call.temperature,
            max_tokens: call.max_tokens,
        }
    }
}

impl Stage2Config {
    pub fn call(&self) -> CallOptions {
        CallOptions {
            model_id: self.model_id.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Span length window for opinion grounding.
    pub delta: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { delta: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecommenderConfig {
    pub factors: usize,
    pub step: f64,
    pub l2: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Per-user fraction of most recent interactions held out for testing.
    pub test_ratio: f64,
    /// Strata with fewer test samples than this report no metrics.
    pub min_stratum_n: usize,
    /// When false the model trains without aspect features.
    pub use_aspects: bool,
}

impl Default for RecommenderConfig {
    fn default() -> Self {
        let hp = Hyperparams::<f64>::default();
        Self {
            factors: hp.factors,
            step: hp.step,
            l2: hp.l2,
            epochs: hp.epochs,
            seed: hp.seed,
            test_ratio: 0.2,
            min_stratum_n: 10,
            use_aspects: true,
        }
    }
}

impl RecommenderConfig {
    pub fn hyperparams(&self) -> Hyperparams<f64> {
        Hyperparams {
            factors: self.factors,
            step: self.step,
            l2: self.l2,
            epochs: self.epochs,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CerConfig {
    /// Stage-one sampling ratios to sweep. Must contain 0.0 (no aspects)
    /// and 1.0 (the full-sampling reference).
    pub ratios: Vec<f64>,
    /// Vocabulary slice compared against the full-sampling vocabulary.
    pub top_n: usize,
}

impl Default for CerConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.1, 0.2, 0.4, 0.8, 1.0],
            top_n: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat-completions endpoint URL; http backend only.
    pub endpoint: String,
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: String::new(),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    /// Embedding endpoint URL; http embedder only.
    pub endpoint: String,
    /// Embedding model name; http embedder only.
    pub model: String,
    /// Persist embeddings to the run directory between commands.
    pub cache: bool,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            kind: EmbeddingKind::Hashed,
            dim: crate::embedding::DEFAULT_HASHED_DIM,
            endpoint: String::new(),
            model: String::new(),
            cache: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub world: WorldSpec,
    /// Probability each scripted aspect is replaced by an off-vocabulary
    /// token.
    pub drift_q: f64,
    /// Number of leading opinion words rewritten through the synonym
    /// table.
    pub paraphrase_level: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::default(),
            drift_q: 0.0,
            paraphrase_level: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub ingest: IngestConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub metrics: MetricsConfig,
    pub recommender: RecommenderConfig,
    pub cer: CerConfig,
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|err| {
            PipelineError::Config(format!("cannot read config {}: {err}", path.display()))
        })?;
        toml::from_str(&text).map_err(|err| {
            PipelineError::Config(format!("cannot parse config {}: {err}", path.display()))
        })
    }

    /// Hash of every section except `[paths]`. Serialization goes through
    /// JSON with sorted keys, so the hash is stable across field order.
    pub fn config_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("config is an object")
            .remove("paths");
        let canonical = serde_json::to_string(&value).expect("config value serializes");
        hashing::sha256_hex(&[canonical.as_bytes()])
    }

    /// Collects every violated invariant instead of stopping at the first.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let mut problems: Vec<String> = Vec::new();
        let mut bad = |msg: String| problems.push(msg);

        let s1 = &self.stage1;
        if !(s1.ratio.is_finite() && s1.ratio > 0.0 && s1.ratio <= 1.0) {
            bad(format!("[stage1] ratio {} must lie in (0, 1]", s1.ratio));
        }
        if s1.partitions == 0 {
            bad("[stage1] partitions must be at least 1".into());
        }
        if s1.clusters == 0 {
            bad("[stage1] clusters must be at least 1".into());
        }
        if s1.token_budget == 0 {
            bad("[stage1] token_budget must be at least 1".into());
        }
        if s1.model_id.trim().is_empty() {
            bad("[stage1] model_id must not be empty".into());
        }
        if !(s1.temperature.is_finite() && s1.temperature >= 0.0) {
            bad(format!(
                "[stage1] temperature {} must be finite and nonnegative",
                s1.temperature
            ));
        }

        let s2 = &self.stage2;
        if s2.model_id.trim().is_empty() {
            bad("[stage2] model_id must not be empty".into());
        }
        if !(s2.temperature.is_finite() && s2.temperature >= 0.0) {
            bad(format!(
                "[stage2] temperature {} must be finite and nonnegative",
                s2.temperature
            ));
        }
        if s2.max_tokens == 0 {
            bad("[stage2] max_tokens must be at least 1".into());
        }

        if let Err(err) = self.recommender.hyperparams().validate() {
            bad(format!("[recommender] {err}"));
        }
        let tr = self.recommender.test_ratio;
        if !(tr.is_finite() && (0.0..1.0).contains(&tr)) {
            bad(format!("[recommender] test_ratio {tr} must lie in [0, 1)"));
        }

        let ratios = &self.cer.ratios;
        if ratios.is_empty() {
            bad("[cer] ratios must not be empty".into());
        }
        if ratios
            .iter()
            .any(|r| !(r.is_finite() && (0.0..=1.0).contains(r)))
        {
            bad("[cer] every ratio must lie in [0, 1]".into());
        }
        if !ratios.contains(&0.0) {
            bad("[cer] ratios must include 0.0, the no-aspect baseline".into());
        }
        if !ratios.contains(&1.0) {
            bad("[cer] ratios must include 1.0, the full-sampling reference".into());
        }
        let mut sorted = ratios.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            bad("[cer] ratios must be distinct".into());
        }
        if self.cer.top_n == 0 {
            bad("[cer] top_n must be at least 1".into());
        }

        if self.backend.kind == BackendKind::Http && self.backend.endpoint.trim().is_empty() {
            bad("[backend] endpoint is required for the http backend".into());
        }

        let e = &self.embedding;
        if e.dim == 0 {
            bad("[embedding] dim must be at least 1".into());
        }
        if e.kind == EmbeddingKind::Http
            && (e.endpoint.trim().is_empty() || e.model.trim().is_empty())
        {
            bad("[embedding] endpoint and model are required for the http embedder".into());
        }

        if let Err(err) = self.synth.world.validate() {
            bad(format!("[synth.world] {err}"));
        }
        let q = self.synth.drift_q;
        if !(q.is_finite() && (0.0..=1.0).contains(&q)) {
            bad(format!("[synth] drift_q {q} must lie in [0, 1]"));
        }

        if problems.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(problems.join("\n  ")))
        }
    }

    /// Command line precedence: flags override file values.
    pub fn apply_overrides(&mut self, seed: Option<u64>, backend: Option<BackendKind>) {
        if let Some(seed) = seed {
            self.stage1.seed = seed;
            self.recommender.seed = seed;
            self.synth.world.seed = seed;
        }
        if let Some(kind) = backend {
            self.backend.kind = kind;
        }
    }
}

/// Provenance stamp shared by all artifacts of one command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub corpus_hash: String,
    pub code_version: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarMeta {
    artifact: String,
    #[serde(flatten)]
    meta: ArtifactMeta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArtifactAction {
    Wrote,
    Verified,
}

#[derive(Debug, Clone)]
pub struct ArtifactOutcome {
    pub path: PathBuf,
    pub action: ArtifactAction,
}

impl fmt::Display for ArtifactOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.action {
            ArtifactAction::Wrote => write!(f, "wrote {}", self.path.display()),
            ArtifactAction::Verified => write!(f, "verified {}", self.path.display()),
        }
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{name}.meta.json"))
}

/// Writes artifacts, or in check mode verifies them byte for byte.
struct ArtifactSink {
    check: bool,
    outcomes: Vec<ArtifactOutcome>,
}

impl ArtifactSink {
    fn new(check: bool) -> Self {
        Self {
            check,
            outcomes: Vec::new(),
        }
    }

    fn put(&mut self, path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
        if self.check {
            let existing = fs::read(path).map_err(|_| PipelineError::CheckFailed {
                path: path.to_path_buf(),
                reason: "artifact missing".into(),
            })?;
            if existing != bytes {
                let reason = if existing.len() != bytes.len() {
                    format!(
                        "{} bytes on disk, {} recomputed",
                        existing.len(),
                        bytes.len()
                    )
                } else {
                    let at = existing
                        .iter()
                        .zip(bytes)
                        .position(|(a, b)| a != b)
                        .unwrap_or(0);
                    format!("content differs at byte {at}")
                };
                return Err(PipelineError::CheckFailed {
                    path: path.to_path_buf(),
                    reason,
                });
            }
            self.outcomes.push(ArtifactOutcome {
                path: path.to_path_buf(),
                action: ArtifactAction::Verified,
            });
        } else {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|source| PipelineError::Io {
                    path: parent.to_path_buf(),
                    source,
                })?;
            }
            fs::write(path, bytes).map_err(|source| PipelineError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            self.outcomes.push(ArtifactOutcome {
                path: path.to_path_buf(),
                action: ArtifactAction::Wrote,
            });
        }
        Ok(())
    }

    fn put_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(value).expect("artifact serializes");
        bytes.push(b'\n');
        self.put(path, &bytes)
    }

    fn put_meta(&mut self, artifact: &Path, meta: &ArtifactMeta) -> Result<(), PipelineError> {
        let side = sidecar_path(artifact);
        let value = SidecarMeta {
            artifact: artifact
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            meta: meta.clone(),
        };
        self.put_json(&side, &value)
    }

    /// Records a file a callee already wrote through its own writer.
    fn external(&mut self, path: &Path) {
        self.outcomes.push(ArtifactOutcome {
            path: path.to_path_buf(),
            action: ArtifactAction::Wrote,
        });
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.12}")
}

fn csv_bytes(meta: &ArtifactMeta, header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut out = format!(
        "# config_hash={}\n# corpus_hash={}\n# code_version={}\n",
        meta.config_hash, meta.corpus_hash, meta.code_version
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header).expect("csv header");
        for row in rows {
            w.write_record(row).expect("csv row");
        }
        w.flush().expect("csv flush");
    }
    out
}

fn corpus_jsonl_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    for x in corpus.interactions() {
        out.extend_from_slice(serde_json::to_string(x).expect("serializes").as_bytes());
        out.push(b'\n');
    }
    out
}

fn script_jsonl_bytes(entries: &[ScriptEntry]) -> Vec<u8> {
    let mut out = Vec::new();
    for entry in entries {
        out.extend_from_slice(
            serde_json::to_string(entry)
                .expect("entry serializes")
                .as_bytes(),
        );
        out.push(b'\n');
    }
    out
}

fn annotations_jsonl_bytes(annotations: &[AnnotatedInteraction]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in annotations {
        out.extend_from_slice(
            serde_json::to_string(&a.record())
                .expect("record serializes")
                .as_bytes(),
        );
        out.push(b'\n');
    }
    out
}

fn vocab_json_bytes(vocab: &AspectVocabulary) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(vocab).expect("vocabulary serializes");
    bytes.push(b'\n');
    bytes
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|err| PipelineError::Artifact {
        path: path.to_path_buf(),
        reason: err.to_string(),
    })
}

/// Loads the cleaned corpus artifact; any invalid row means the artifact
/// was corrupted after `ingest` wrote it.
fn read_corpus_artifact(path: &Path) -> Result<Corpus, PipelineError> {
    let outcome = load_reviews(path)?;
    if !outcome.rejects.is_empty() {
        return Err(PipelineError::Artifact {
            path: path.to_path_buf(),
            reason: format!(
                "{} invalid rows (first at line {})",
                outcome.rejects.len(),
                outcome.rejects[0].line_no
            ),
        });
    }
    Ok(outcome.corpus)
}

fn ensure_same_corpus(
    vocab: &AspectVocabulary,
    corpus: &Corpus,
) -> Result<(), PipelineError> {
    if vocab.corpus_hash() != corpus.id() {
        return Err(PipelineError::Config(format!(
            "vocabulary was built from corpus {} but the current corpus is {}; rerun vocab",
            short(vocab.corpus_hash()),
            short(corpus.id())
        )));
    }
    Ok(())
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub enum BackendHandle {
    Scripted(ScriptedBackend),
    Http(HttpBackend),
}

impl BackendHandle {
    fn as_dyn(&self) -> &dyn CompletionBackend {
        match self {
            Self::Scripted(b) => b,
            Self::Http(b) => b,
        }
    }
}

pub enum EmbedderHandle {
    Hashed(HashedNgramEmbedder<f64>),
    Http(HttpEmbedder<f64>),
    Cached(CachedEmbedder<f64>),
}

impl EmbedderHandle {
    fn provider(&self) -> &dyn EmbeddingProvider<f64> {
        match self {
            Self::Hashed(p) => p,
            Self::Http(p) => p,
            Self::Cached(p) => p,
        }
    }

    /// Saves the cache file when caching is on. Skipped in check mode,
    /// which must not touch the run directory.
    fn persist(&self, ctx: &RunContext) -> Result<(), PipelineError> {
        if let Self::Cached(cached) = self {
            if !ctx.check {
                cached.save(&ctx.paths.embed_cache)?;
            }
        }
        Ok(())
    }
}

/// Validated configuration plus everything derived from it.
pub struct RunContext {
    pub config: RunConfig,
    pub paths: ResolvedPaths,
    pub config_hash: String,
    pub check: bool,
}

impl RunContext {
    pub fn new(config: RunConfig, check: bool) -> Result<Self, PipelineError> {
        config.validate()?;
        let paths = config.paths.resolve();
        let config_hash = config.config_hash();
        Ok(Self {
            config,
            paths,
            config_hash,
            check,
        })
    }

    fn meta(&self, corpus_hash: &str) -> ArtifactMeta {
        ArtifactMeta {
            config_hash: self.config_hash.clone(),
            corpus_hash: corpus_hash.to_string(),
            code_version: CODE_VERSION.to_string(),
        }
    }

    fn templates(&self) -> Result<PromptTemplates, PipelineError> {
        match &self.paths.templates {
            Some(dir) => Ok(PromptTemplates::from_dir(dir)?),
            None => Ok(PromptTemplates::default()),
        }
    }

    fn backend(&self) -> Result<BackendHandle, PipelineError> {
        match self.config.backend.kind {
            BackendKind::Scripted => {
                self.require_inputs(std::slice::from_ref(&self.paths.script))?;
                Ok(BackendHandle::Scripted(ScriptedBackend::from_path(
                    &self.paths.script,
                )?))
            }
            BackendKind::Http => Ok(BackendHandle::Http(HttpBackend::new(
                &self.config.backend.endpoint,
                std::env::var("LLM_API_KEY").ok(),
                self.config.backend.retry,
            )?)),
        }
    }

    fn embedder(&self) -> Result<EmbedderHandle, PipelineError> {
        let e = &self.config.embedding;
        if e.cache {
            let inner: Box<dyn EmbeddingProvider<f64>> = match e.kind {
                EmbeddingKind::Hashed => Box::new(HashedNgramEmbedder::<f64>::new(e.dim)?),
                EmbeddingKind::Http => Box::new(HttpEmbedder::<f64>::new(
                    &e.endpoint,
                    &e.model,
                    e.dim,
                    std::env::var("LLM_API_KEY").ok(),
                )?),
            };
            let cached = CachedEmbedder::new(inner);
            if self.paths.embed_cache.exists() {
                cached.load(&self.paths.embed_cache)?;
            }
            Ok(EmbedderHandle::Cached(cached))
        } else {
            Ok(match e.kind {
                EmbeddingKind::Hashed => {
                    EmbedderHandle::Hashed(HashedNgramEmbedder::new(e.dim)?)
                }
                EmbeddingKind::Http => EmbedderHandle::Http(HttpEmbedder::new(
                    &e.endpoint,
                    &e.model,
                    e.dim,
                    std::env::var("LLM_API_KEY").ok(),
                )?),
            })
        }
    }

    /// Input preconditions, reported all at once.
    fn require_inputs(&self, inputs: &[PathBuf]) -> Result<(), PipelineError> {
        let missing: Vec<String> = inputs
            .iter()
            .filter(|p| !p.exists())
            .map(|p| format!("missing input {}", p.display()))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(PipelineError::Config(missing.join("\n  ")))
        }
    }

    /// Scripted runs read the script file; http runs have no file input.
    fn backend_inputs(&self) -> Vec<PathBuf> {
        match self.config.backend.kind {
            BackendKind::Scripted => vec![self.paths.script.clone()],
            BackendKind::Http => Vec::new(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RejectsArtifact {
    pub meta: ArtifactMeta,
    pub n_input: usize,
    pub n_rejected: usize,
    pub n_filtered: usize,
    pub n_kept: usize,
    pub rejects: Vec<Reject>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub meta: ArtifactMeta,
    pub report: MetricReport,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub meta: ArtifactMeta,
    pub n_train: usize,
    pub n_test: usize,
    pub epoch_mse: Vec<f64>,
    pub model: FactorModel<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub meta: ArtifactMeta,
    pub n_train: usize,
    pub n_test: usize,
    pub train: EvalMetrics,
    pub test: EvalMetrics,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TruthArtifact {
    pub meta: ArtifactMeta,
    pub world: WorldSpec,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub n_input: usize,
    pub n_rejected: usize,
    pub n_filtered: usize,
    pub n_kept: usize,
    pub corpus_hash: String,
}

impl fmt::Display for IngestSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ingest: kept {} of {} interactions ({} invalid, {} filtered), corpus {}",
            self.n_kept,
            self.n_input,
            self.n_rejected,
            self.n_filtered,
            short(&self.corpus_hash)
        )
    }
}

pub fn run_ingest(
    ctx: &RunContext,
) -> Result<(IngestSummary, Vec<ArtifactOutcome>), PipelineError> {
    ctx.require_inputs(std::slice::from_ref(&ctx.paths.raw_reviews))?;
    let loaded = load_reviews(&ctx.paths.raw_reviews)?;
    let n_input = loaded.corpus.len() + loaded.rejects.len();
    let rules = FilterRules {
        min_user_records: ctx.config.ingest.min_user_records,
        min_item_records: ctx.config.ingest.min_item_records,
        since: ctx.config.ingest.since,
    };
    let filtered = filter_corpus(&loaded.corpus, &rules);
    let n_filtered = loaded.corpus.len() - filtered.len();
    let corpus = sort_chronologically(&filtered);
    let meta = ctx.meta(corpus.id());

    let mut sink = ArtifactSink::new(ctx.check);
    sink.put(&ctx.paths.corpus, &corpus_jsonl_bytes(&corpus))?;
    sink.put_meta(&ctx.paths.corpus, &meta)?;
    let artifact = RejectsArtifact {
        meta,
        n_input,
        n_rejected: loaded.rejects.len(),
        n_filtered,
        n_kept: corpus.len(),
        rejects: loaded.rejects,
    };
    sink.put_json(&ctx.paths.rejects, &artifact)?;

    Ok((
        IngestSummary {
            n_input,
            n_rejected: artifact.n_rejected,
            n_filtered,
            n_kept: corpus.len(),
            corpus_hash: corpus.id().to_string(),
        },
        sink.outcomes,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabSummary {
    pub n_aspects: usize,
    pub corpus_hash: String,
}

impl fmt::Display for VocabSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "vocab: {} aspects induced from corpus {}",
            self.n_aspects,
            short(&self.corpus_hash)
        )
    }
}

pub fn run_vocab(
    ctx: &RunContext,
) -> Result<(VocabSummary, Vec<ArtifactOutcome>), PipelineError> {
    let mut inputs = vec![ctx.paths.corpus.clone()];
    inputs.extend(ctx.backend_inputs());
    ctx.require_inputs(&inputs)?;

    let corpus = read_corpus_artifact(&ctx.paths.corpus)?;
    let templates = ctx.templates()?;
    let backend = ctx.backend()?;
    let embedder = ctx.embedder()?;
    let s1 = &ctx.config.stage1;
    let vocab = build_vocabulary(
        &corpus,
        s1.params(s1.ratio),
        &templates,
        backend.as_dyn(),
        embedder.provider(),
        &s1.call(),
        s1.token_budget,
    )?;
    let meta = ctx.meta(corpus.id());

    let mut sink = ArtifactSink::new(ctx.check);
    sink.put(&ctx.paths.vocab, &vocab_json_bytes(&vocab))?;
    sink.put_meta(&ctx.paths.vocab, &meta)?;

    // Pairwise similarity matrix over the final aspects.
    let provider = embedder.provider();
    let mut vectors = Vec::with_capacity(vocab.len());
    for aspect in vocab.aspects() {
        vectors.push(provider.embed(aspect)?);
    }
    let mut header: Vec<String> = vec!["aspect".into()];
    header.extend(vocab.aspects().iter().cloned());
    let mut rows = Vec::with_capacity(vocab.len());
    for (i, aspect) in vocab.aspects().iter().enumerate() {
        let mut row = vec![aspect.clone()];
        for j in 0..vocab.len() {
            row.push(fmt_f(cosine(&vectors[i], &vectors[j])?));
        }
        rows.push(row);
    }
    sink.put(&ctx.paths.similarity, &csv_bytes(&meta, &header, &rows))?;
    embedder.persist(ctx)?;

    Ok((
        VocabSummary {
            n_aspects: vocab.len(),
            corpus_hash: corpus.id().to_string(),
        },
        sink.outcomes,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSummary {
    pub n: usize,
    pub failed: usize,
    pub resumed: usize,
}

impl fmt::Display for ExtractSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "extract: {} interactions annotated ({} failed, {} resumed from checkpoint)",
            self.n, self.failed, self.resumed
        )
    }
}

pub fn run_extract(
    ctx: &RunContext,
) -> Result<(ExtractSummary, Vec<ArtifactOutcome>), PipelineError> {
    let mut inputs = vec![ctx.paths.corpus.clone(), ctx.paths.vocab.clone()];
    inputs.extend(ctx.backend_inputs());
    ctx.require_inputs(&inputs)?;

    let corpus = read_corpus_artifact(&ctx.paths.corpus)?;
    let vocab = AspectVocabulary::from_json_file(&ctx.paths.vocab)?;
    ensure_same_corpus(&vocab, &corpus)?;
    let templates = ctx.templates()?;
    let backend = ctx.backend()?;
    let options = Stage2Options {
        call: ctx.config.stage2.call(),
        checkpoint: if ctx.check {
            None
        } else {
            Some(ctx.paths.annotations.clone())
        },
    };
    let outcome = run_stage2(&corpus, &vocab, &templates, backend.as_dyn(), &options)?;
    let meta = ctx.meta(corpus.id());

    let mut sink = ArtifactSink::new(ctx.check);
    if ctx.check {
        sink.put(
            &ctx.paths.annotations,
            &annotations_jsonl_bytes(&outcome.annotations),
        )?;
    } else {
        sink.external(&ctx.paths.annotations);
    }
    sink.put_meta(&ctx.paths.annotations, &meta)?;

    Ok((
        ExtractSummary {
            n: outcome.annotations.len(),
            failed: outcome.failed,
            resumed: outcome.resumed,
        },
        sink.outcomes,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub adr: f64,
    pub ofr: f64,
    pub n_scored: usize,
    pub n_skipped: usize,
}

impl fmt::Display for MetricsSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "metrics: ADR {:.4}, OFR {:.4} over {} interactions ({} without triples skipped)",
            self.adr, self.ofr, self.n_scored, self.n_skipped
        )
    }
}

pub fn run_metrics(
    ctx: &RunContext,
) -> Result<(MetricsSummary, Vec<ArtifactOutcome>), PipelineError> {
    ctx.require_inputs(&[
        ctx.paths.corpus.clone(),
        ctx.paths.vocab.clone(),
        ctx.paths.annotations.clone(),
    ])?;

    let corpus = read_corpus_artifact(&ctx.paths.corpus)?;
    let vocab = AspectVocabulary::from_json_file(&ctx.paths.vocab)?;
    ensure_same_corpus(&vocab, &corpus)?;
    let records = read_annotation_records(&ctx.paths.annotations)?;
    let annotations = join_records(&corpus, &records)?;
    let embedder = ctx.embedder()?;
    let (report, scores) = compute_report(
        embedder.provider(),
        &annotations,
        &vocab,
        ctx.config.metrics.delta,
        corpus.id(),
    )?;
    let meta = ctx.meta(corpus.id());

    let mut sink = ArtifactSink::new(ctx.check);
    let artifact = MetricsArtifact {
        meta: meta.clone(),
        report: report.clone(),
    };
    sink.put_json(&ctx.paths.metrics, &artifact)?;

    let header: Vec<String> = [
        "user_id",
        "item_id",
        "timestamp",
        "n_triples",
        "drift_fraction",
        "mean_semsim",
    ]
    .iter()
    .map(|s| (*s).to_string())
    .collect();
    let rows: Vec<Vec<String>> = scores
        .iter()
        .map(|s| {
            vec![
                s.user_id.clone(),
                s.item_id.clone(),
                s.timestamp.to_string(),
                s.n_triples.to_string(),
                fmt_f(s.drift_fraction),
                fmt_f(s.mean_semsim),
            ]
        })
        .collect();
    sink.put(
        &ctx.paths.interaction_scores,
        &csv_bytes(&meta, &header, &rows),
    )?;
    embedder.persist(ctx)?;

    Ok((
        MetricsSummary {
            adr: report.adr,
            ofr: report.ofr,
            n_scored: report.n_interactions,
            n_skipped: report.n_skipped_empty,
        },
        sink.outcomes,
    ))
}

/// Annotations joined to the corpus plus the derived samples and split.
struct RecData {
    annotations: Vec<AnnotatedInteraction>,
    samples: Vec<RatingSample<f64>>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

fn prepare_rec_data(ctx: &RunContext, corpus: &Corpus) -> Result<RecData, PipelineError> {
    let records = read_annotation_records(&ctx.paths.annotations)?;
    let annotations = join_records(corpus, &records)?;
    let vocab = if ctx.config.recommender.use_aspects {
        let vocab = AspectVocabulary::from_json_file(&ctx.paths.vocab)?;
        ensure_same_corpus(&vocab, corpus)?;
        Some(vocab)
    } else {
        None
    };
    let samples = make_samples::<f64>(&annotations, vocab.as_ref());
    let (train_idx, test_idx) =
        chronological_split(&annotations, ctx.config.recommender.test_ratio)?;
    Ok(RecData {
        annotations,
        samples,
        train_idx,
        test_idx,
    })
}

fn gather(samples: &[RatingSample<f64>], idx: &[usize]) -> Vec<RatingSample<f64>> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn rec_inputs(ctx: &RunContext) -> Vec<PathBuf> {
    let mut inputs = vec![ctx.paths.corpus.clone(), ctx.paths.annotations.clone()];
    if ctx.config.recommender.use_aspects {
        inputs.push(ctx.paths.vocab.clone());
    }
    inputs
}

/// Loads the trained model, refusing one produced under a different
/// configuration or corpus.
fn read_model_artifact(ctx: &RunContext, corpus: &Corpus) -> Result<ModelArtifact, PipelineError> {
    let artifact: ModelArtifact = read_json(&ctx.paths.model)?;
    if artifact.meta.config_hash != ctx.config_hash {
        return Err(PipelineError::Config(format!(
            "model was trained under configuration {} but the current configuration is {}; rerun rec train",
            short(&artifact.meta.config_hash),
            short(&ctx.config_hash)
        )));
    }
    if artifact.meta.corpus_hash != corpus.id() {
        return Err(PipelineError::Config(format!(
            "model was trained on corpus {} but the current corpus is {}; rerun rec train",
            short(&artifact.meta.corpus_hash),
            short(corpus.id())
        )));
    }
    Ok(artifact)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub n_train: usize,
    pub n_test: usize,
    pub n_features: usize,
    pub final_epoch_mse: f64,
}

impl fmt::Display for TrainSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rec train: {} samples with {} aspect features, final epoch MSE {:.6} ({} held out)",
            self.n_train, self.n_features, self.final_epoch_mse, self.n_test
        )
    }
}

pub fn run_rec_train(
    ctx: &RunContext,
) -> Result<(TrainSummary, Vec<ArtifactOutcome>), PipelineError> {
    ctx.require_inputs(&rec_inputs(ctx))?;
    let corpus = read_corpus_artifact(&ctx.paths.corpus)?;
    let data = prepare_rec_data(ctx, &corpus)?;
    let train = gather(&data.samples, &data.train_idx);
    let (model, report) =
        FactorModel::train(&train, &ctx.config.recommender.hyperparams())?;
    let meta = ctx.meta(corpus.id());

    let mut sink = ArtifactSink::new(ctx.check);
    let n_features = model.n_features();
    let final_epoch_mse = report.epoch_mse.last().copied().unwrap_or(f64::NAN);
    let artifact = ModelArtifact {
        meta,
        n_train: train.len(),
        n_test: data.test_idx.len(),
        epoch_mse: report.epoch_mse,
        model,
    };
    sink.put_json(&ctx.paths.model, &artifact)?;

    Ok((
        TrainSummary {
            n_train: artifact.n_train,
            n_test: artifact.n_test,
            n_features,
            final_epoch_mse,
        },
        sink.outcomes,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub train: EvalMetrics,
    pub test: EvalMetrics,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rec eval: train MSE {:.6} MAE {:.6} (n={}), test MSE {:.6} MAE {:.6} (n={})",
            self.train.mse, self.train.mae, self.train.n, self.test.mse, self.test.mae,
            self.test.n
        )
    }
}

pub fn run_rec_eval(
    ctx: &RunContext,
) -> Result<(EvalSummary, Vec<ArtifactOutcome>), PipelineError> {
    let mut inputs = rec_inputs(ctx);
    inputs.push(ctx.paths.model.clone());
    ctx.require_inputs(&inputs)?;
    let corpus = read_corpus_artifact(&ctx.paths.corpus)?;
    let artifact = read_model_artifact(ctx, &corpus)?;
    let data = prepare_rec_data(ctx, &corpus)?;
    let train = gather(&data.samples, &data.train_idx);
    let test = gather(&data.samples, &data.test_idx);
    let train_metrics = artifact.model.evaluate(&train)?;
    let test_metrics = artifact.model.evaluate(&test)?;

    let mut sink = ArtifactSink::new(ctx.check);
    let eval = EvalArtifact {
        meta: ctx.meta(corpus.id()),
        n_train: train.len(),
        n_test: test.len(),
        train: train_metrics,
        test: test_metrics,
    };
    sink.put_json(&ctx.paths.eval, &eval)?;

    Ok((
        EvalSummary {
            train: train_metrics,
            test: test_metrics,
        },
        sink.outcomes,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedSummary {
    pub rows: Vec<StratumReport>,
}

impl fmt::Display for StratifiedSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rec stratified:")?;
        for row in &self.rows {
            match &row.metrics {
                Some(m) => write!(
                    f,
                    "\n  {}: n={} MSE {:.6} MAE {:.6}",
                    row.label, row.n, m.mse, m.mae
                )?,
                None => write!(f, "\n  {}: n={} (below floor, omitted)", row.label, row.n)?,
            }
        }
        Ok(())
    }
}

pub fn run_rec_stratified(
    ctx: &RunContext,
) -> Result<(StratifiedSummary, Vec<ArtifactOutcome>), PipelineError> {
    let mut inputs = rec_inputs(ctx);
    inputs.push(ctx.paths.model.clone());
    ctx.require_inputs(&inputs)?;
    let corpus = read_corpus_artifact(&ctx.paths.corpus)?;
    let artifact = read_model_artifact(ctx, &corpus)?;
    let data = prepare_rec_data(ctx, &corpus)?;
    let entries: Vec<(RatingSample<f64>, usize)> = data
        .test_idx
        .iter()
        .map(|&i| {
            (
                data.samples[i].clone(),
                data.annotations[i].interaction.word_count(),
            )
        })
        .collect();
    let reports = stratified_eval(
        &artifact.model,
        &entries,
        ctx.config.recommender.min_stratum_n,
    )?;
    let meta = ctx.meta(corpus.id());

    let header: Vec<String> = ["stratum", "n", "mse", "mae"]
        .iter()
        .map(|s| (*s).to_string())
        .collect();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| match &r.metrics {
            Some(m) => vec![
                r.label.clone(),
                r.n.to_string(),
                fmt_f(m.mse),
                fmt_f(m.mae),
            ],
            None => vec![r.label.clone(), r.n.to_string(), String::new(), String::new()],
        })
        .collect();
    let mut sink = ArtifactSink::new(ctx.check);
    sink.put(&ctx.paths.stratified, &csv_bytes(&meta, &header, &rows))?;

    Ok((StratifiedSummary { rows: reports }, sink.outcomes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CerRow {
    pub ratio: f64,
    pub mse: f64,
    pub cer: f64,
    /// Overlap of the top slice with the full-sampling vocabulary; absent
    /// for the no-aspect baseline row.
    pub overlap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CerSummary {
    pub rows: Vec<CerRow>,
}

impl fmt::Display for CerSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "cer:")?;
        for row in &self.rows {
            match row.overlap {
                Some(overlap) => write!(
                    f,
                    "\n  ratio {}: MSE {:.6}, CER {:.4}, vocab overlap {:.4}",
                    row.ratio, row.mse, row.cer, overlap
                )?,
                None => write!(
                    f,
                    "\n  ratio {}: MSE {:.6}, CER {:.4} (no vocabulary)",
                    row.ratio, row.mse, row.cer
                )?,
            }
        }
        Ok(())
    }
}

/// Sweeps the stage-one sampling ratio: at each ratio the vocabulary is
/// re-induced, the corpus re-annotated, and the predictor retrained; the
/// improvement over the no-aspect baseline is reported as a fraction of
/// the full-sampling improvement. Ratio 0 trains without aspect features.
pub fn run_cer(ctx: &RunContext) -> Result<(CerSummary, Vec<ArtifactOutcome>), PipelineError> {
    let mut inputs = vec![ctx.paths.corpus.clone()];
    inputs.extend(ctx.backend_inputs());
    ctx.require_inputs(&inputs)?;

    let corpus = read_corpus_artifact(&ctx.paths.corpus)?;
    let templates = ctx.templates()?;
    let backend = ctx.backend()?;
    let embedder = ctx.embedder()?;
    let s1 = &ctx.config.stage1;
    let hp = ctx.config.recommender.hyperparams();
    let mut ratios = ctx.config.cer.ratios.clone();
    ratios.sort_by(f64::total_cmp);

    let mut evals: Vec<(f64, f64, Option<AspectVocabulary>)> = Vec::with_capacity(ratios.len());
    let mut split: Option<(Vec<usize>, Vec<usize>)> = None;
    for &ratio in &ratios {
        log::info!("cer: evaluating sampling ratio {ratio}");
        let (annotations, vocab) = if ratio == 0.0 {
            let empty: Vec<AnnotatedInteraction> = corpus
                .interactions()
                .iter()
                .map(|x| AnnotatedInteraction {
                    interaction: x.clone(),
                    triples: Vec::new(),
                    history_snapshot: Vec::new(),
                    drifted: Vec::new(),
                    failed: false,
                    error: None,
                })
                .collect();
            (empty, None)
        } else {
            let vocab = build_vocabulary(
                &corpus,
                s1.params(ratio),
                &templates,
                backend.as_dyn(),
                embedder.provider(),
                &s1.call(),
                s1.token_budget,
            )?;
            let outcome = run_stage2(
                &corpus,
                &vocab,
                &templates,
                backend.as_dyn(),
                &Stage2Options {
                    call: ctx.config.stage2.call(),
                    checkpoint: None,
                },
            )?;
            (outcome.annotations, Some(vocab))
        };
        let samples = make_samples::<f64>(&annotations, vocab.as_ref());
        if split.is_none() {
            split = Some(chronological_split(
                &annotations,
                ctx.config.recommender.test_ratio,
            )?);
        }
        let (train_idx, test_idx) = split.as_ref().expect("split computed");
        let train = gather(&samples, train_idx);
        let test = gather(&samples, test_idx);
        let (model, _) = FactorModel::train(&train, &hp)?;
        let metrics = model.evaluate(&test)?;
        evals.push((ratio, metrics.mse, vocab));
    }

    let mse_zero = evals
        .iter()
        .find(|(r, _, _)| *r == 0.0)
        .expect("validated to contain 0.0")
        .1;
    let (_, mse_full, full_vocab) = evals
        .iter()
        .find(|(r, _, _)| *r == 1.0)
        .expect("validated to contain 1.0");
    let full_vocab = full_vocab.as_ref().expect("ratio 1.0 induces a vocabulary");

    let mut rows = Vec::with_capacity(evals.len());
    for (ratio, mse, vocab) in &evals {
        let cer = cer_value(mse_zero, *mse_full, *mse)?;
        let overlap = match vocab {
            Some(v) => Some(vocab_overlap(v, full_vocab, ctx.config.cer.top_n)?),
            None => None,
        };
        rows.push(CerRow {
            ratio: *ratio,
            mse: *mse,
            cer,
            overlap,
        });
    }

    let meta = ctx.meta(corpus.id());
    let header: Vec<String> = ["ratio", "mse", "cer", "vocab_overlap"]
        .iter()
        .map(|s| (*s).to_string())
        .collect();
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.ratio.to_string(),
                fmt_f(r.mse),
                fmt_f(r.cer),
                r.overlap.map(fmt_f).unwrap_or_default(),
            ]
        })
        .collect();
    let mut sink = ArtifactSink::new(ctx.check);
    sink.put(&ctx.paths.cer, &csv_bytes(&meta, &header, &csv_rows))?;
    embedder.persist(ctx)?;

    Ok((CerSummary { rows }, sink.outcomes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub n_interactions: usize,
    pub n_script_entries: usize,
    pub corpus_hash: String,
}

impl fmt::Display for SynthSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "synth: {} interactions generated with {} scripted responses, corpus {}",
            self.n_interactions,
            self.n_script_entries,
            short(&self.corpus_hash)
        )
    }
}

/// Generates the synthetic world and scripts every backend call the
/// configured pipeline will make: vocabulary induction at the main ratio
/// and at every nonzero CER ratio, plus extraction under each induced
/// vocabulary.
pub fn run_synth(
    ctx: &RunContext,
) -> Result<(SynthSummary, Vec<ArtifactOutcome>), PipelineError> {
    let spec = ctx.config.synth.world.clone();
    let (corpus, truth) = generate_corpus(&spec)?;
    let templates = ctx.templates()?;
    let embedder = ctx.embedder()?;

    let mut ratios: Vec<f64> = ctx
        .config
        .cer
        .ratios
        .iter()
        .copied()
        .filter(|r| *r > 0.0)
        .chain(std::iter::once(ctx.config.stage1.ratio))
        .collect();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    let plan = ScriptPlan {
        ratios,
        partitions: ctx.config.stage1.partitions,
        clusters: ctx.config.stage1.clusters,
        seed: ctx.config.stage1.seed,
        token_budget: ctx.config.stage1.token_budget,
        call: ctx.config.stage1.call(),
        drift_q: ctx.config.synth.drift_q,
        paraphrase_level: ctx.config.synth.paraphrase_level,
    };
    let entries =
        script_pipeline_responses(&spec, &corpus, &truth, &templates, embedder.provider(), &plan)?;
    let meta = ctx.meta(corpus.id());

    let mut sink = ArtifactSink::new(ctx.check);
    sink.put(&ctx.paths.raw_reviews, &corpus_jsonl_bytes(&corpus))?;
    sink.put_meta(&ctx.paths.raw_reviews, &meta)?;
    let truth_artifact = TruthArtifact {
        meta: meta.clone(),
        world: spec,
        truth,
    };
    sink.put_json(&ctx.paths.ground_truth, &truth_artifact)?;
    sink.put(&ctx.paths.script, &script_jsonl_bytes(&entries))?;
    sink.put_meta(&ctx.paths.script, &meta)?;
    embedder.persist(ctx)?;

    Ok((
        SynthSummary {
            n_interactions: corpus.len(),
            n_script_entries: entries.len(),
            corpus_hash: corpus.id().to_string(),
        },
        sink.outcomes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(dir: &Path) -> RunConfig {
        let mut config = RunConfig::default();
        config.paths.out_dir = dir.to_path_buf();
        config.synth.world = WorldSpec {
            n_users: 12,
            n_items: 10,
            n_interactions: 60,
            seed: 5,
            ..WorldSpec::default()
        };
        config.cer.ratios = vec![0.0, 0.2, 1.0];
        config.recommender.min_stratum_n = 1;
        config.recommender.test_ratio = 0.2;
        config
    }

    #[test]
    fn config_hash_ignores_paths_but_not_parameters() {
        let mut a = RunConfig::default();
        let mut b = RunConfig::default();
        b.paths.out_dir = PathBuf::from("elsewhere");
        b.paths.raw_reviews = Some(PathBuf::from("/data/reviews.jsonl"));
        assert_eq!(a.config_hash(), b.config_hash());

        a.stage1.ratio = 0.4;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn config_parses_partial_toml_and_rejects_unknown_keys() {
        let parsed: RunConfig = toml::from_str(
            r#"
            [stage1]
            ratio = 0.4
            clusters = 10

            [paths]
            out_dir = "elsewhere"
            "#,
        )
        .unwrap();
        assert_eq!(parsed.stage1.ratio, 0.4);
        assert_eq!(parsed.stage1.clusters, 10);
        assert_eq!(parsed.stage1.partitions, 5);
        assert_eq!(parsed.paths.out_dir, PathBuf::from("elsewhere"));

        let err = toml::from_str::<RunConfig>("[stage1]\nratioo = 0.4\n");
        assert!(err.is_err());
    }

    #[test]
    fn default_config_is_valid_and_matches_published_constants() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(config.stage1.ratio, 0.2);
        assert_eq!(config.stage1.partitions, 5);
        assert_eq!(config.metrics.delta, 2);
        assert_eq!(config.cer.ratios, vec![0.0, 0.1, 0.2, 0.4, 0.8, 1.0]);
    }

    #[test]
    fn validate_collects_every_problem() {
        let mut config = RunConfig::default();
        config.stage1.ratio = 0.0;
        config.stage2.max_tokens = 0;
        config.cer.ratios = vec![0.5];
        config.backend.kind = BackendKind::Http;
        let err = config.validate().unwrap_err();
        let text = err.to_string();
        assert!(text.contains("[stage1] ratio"));
        assert!(text.contains("[stage2] max_tokens"));
        assert!(text.contains("0.0"));
        assert!(text.contains("1.0"));
        assert!(text.contains("[backend] endpoint"));
    }

    #[test]
    fn seed_override_touches_every_stage() {
        let mut config = RunConfig::default();
        config.apply_overrides(Some(99), Some(BackendKind::Scripted));
        assert_eq!(config.stage1.seed, 99);
        assert_eq!(config.recommender.seed, 99);
        assert_eq!(config.synth.world.seed, 99);
    }

    #[test]
    fn paths_resolve_with_overrides() {
        let paths = PathsConfig {
            out_dir: PathBuf::from("exp"),
            raw_reviews: Some(PathBuf::from("/data/in.jsonl")),
            ..PathsConfig::default()
        };
        let resolved = paths.resolve();
        assert_eq!(resolved.raw_reviews, PathBuf::from("/data/in.jsonl"));
        assert_eq!(resolved.corpus, PathBuf::from("exp/corpus.jsonl"));
        assert_eq!(resolved.script, PathBuf::from("exp/script.jsonl"));
    }

    #[test]
    fn sidecar_path_appends_suffix() {
        assert_eq!(
            sidecar_path(Path::new("run/corpus.jsonl")),
            PathBuf::from("run/corpus.jsonl.meta.json")
        );
    }

    #[test]
    fn full_scripted_pipeline_runs_and_check_mode_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let ctx = RunContext::new(config.clone(), false).unwrap();

        let (synth, _) = run_synth(&ctx).unwrap();
        assert_eq!(synth.n_interactions, 60);
        let (ingest, _) = run_ingest(&ctx).unwrap();
        assert_eq!(ingest.n_kept, 60);
        assert_eq!(ingest.n_rejected, 0);
        let (vocab, _) = run_vocab(&ctx).unwrap();
        assert!(vocab.n_aspects > 0);
        let (extract, _) = run_extract(&ctx).unwrap();
        assert_eq!(extract.n, 60);
        assert_eq!(extract.failed, 0);
        let (metrics, _) = run_metrics(&ctx).unwrap();
        assert_eq!(metrics.adr, 0.0);
        assert_eq!(metrics.ofr, 1.0);
        let (train, _) = run_rec_train(&ctx).unwrap();
        assert!(train.n_train > 0 && train.n_test > 0);
        let (eval, _) = run_rec_eval(&ctx).unwrap();
        assert!(eval.test.mse.is_finite());
        let (stratified, _) = run_rec_stratified(&ctx).unwrap();
        assert_eq!(stratified.rows.len(), 4);
        let (cer, _) = run_cer(&ctx).unwrap();
        assert_eq!(cer.rows.len(), 3);
        let zero = &cer.rows[0];
        assert_eq!(zero.ratio, 0.0);
        assert_eq!(zero.cer, 0.0);
        assert!(zero.overlap.is_none());
        let full = cer.rows.last().unwrap();
        assert_eq!(full.ratio, 1.0);
        assert_eq!(full.cer, 1.0);
        assert_eq!(full.overlap, Some(1.0));

        // A second pass in check mode recomputes everything and demands
        // byte equality, so this is the determinism gate.
        let check = RunContext::new(config, true).unwrap();
        let all = [
            run_synth(&check).map(|(_, o)| o),
            run_ingest(&check).map(|(_, o)| o),
            run_vocab(&check).map(|(_, o)| o),
            run_extract(&check).map(|(_, o)| o),
            run_metrics(&check).map(|(_, o)| o),
            run_rec_train(&check).map(|(_, o)| o),
            run_rec_eval(&check).map(|(_, o)| o),
            run_rec_stratified(&check).map(|(_, o)| o),
            run_cer(&check).map(|(_, o)| o),
        ];
        for outcomes in all {
            for outcome in outcomes.unwrap() {
                assert_eq!(outcome.action, ArtifactAction::Verified, "{outcome}");
            }
        }
    }

    #[test]
    fn check_mode_flags_a_tampered_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let ctx = RunContext::new(config.clone(), false).unwrap();
        run_synth(&ctx).unwrap();
        run_ingest(&ctx).unwrap();

        let path = ctx.paths.corpus.clone();
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 2;
        bytes[last] = bytes[last].wrapping_add(1);
        fs::write(&path, bytes).unwrap();

        let check = RunContext::new(config, true).unwrap();
        let err = run_ingest(&check).unwrap_err();
        assert!(matches!(err, PipelineError::CheckFailed { .. }), "{err}");
    }

    #[test]
    fn commands_demand_their_inputs_up_front() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let ctx = RunContext::new(config, false).unwrap();
        let err = run_vocab(&ctx).unwrap_err();
        assert!(err.is_config());
        let text = err.to_string();
        assert!(text.contains("corpus.jsonl"));
        assert!(text.contains("script.jsonl"));
    }

    #[test]
    fn stale_vocabulary_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let config = small_config(dir.path());
        let ctx = RunContext::new(config.clone(), false).unwrap();
        run_synth(&ctx).unwrap();
        run_ingest(&ctx).unwrap();
        run_vocab(&ctx).unwrap();

        // Regenerate the world with another seed so the corpus changes
        // under the existing vocabulary.
        let mut moved = config;
        moved.synth.world.seed = 6;
        let ctx2 = RunContext::new(moved, false).unwrap();
        run_synth(&ctx2).unwrap();
        run_ingest(&ctx2).unwrap();
        let err = run_extract(&ctx2).unwrap_err();
        assert!(err.is_config(), "{err}");
        assert!(err.to_string().contains("rerun vocab"));
    }
}
