//! Vocabulary-constrained triple extraction with per-user and per-item
//! history.
//!
//! The extraction stage walks the corpus chronologically. Each interaction
//! is annotated by one completion call whose prompt carries the aspect
//! vocabulary and the union of aspects previously seen for this user or
//! this item, strictly before the current timestamp: interactions sharing a
//! timestamp never see each other. Extracted aspects outside the vocabulary
//! are kept in the output but flagged as drifted and barred from history.
//! Progress checkpoints to the annotations file itself, append-only, and a
//! resumed run validates the prefix before continuing.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Interaction};
use crate::gateway::{
    complete, render_dynamic_prompt, CompletionBackend, CompletionRequest, GatewayError,
    PromptTemplates,
};
use crate::vocab::AspectVocabulary;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("corpus must be chronologically sorted before extraction")]
    Unsorted,
    #[error("vocabulary has no aspects")]
    EmptyVocabulary,
    #[error("backend unavailable: {source}")]
    Backend { source: GatewayError },
    #[error("checkpoint io at {path}: {source}")]
    CheckpointIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint {path} line {line}: {reason}")]
    CorruptCheckpoint {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("annotations do not match corpus: {reason}")]
    JoinMismatch { reason: String },
}

/// Polarity of one extracted opinion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_lowercase().as_str() {
            "positive" => Some(Self::Positive),
            "negative" => Some(Self::Negative),
            "neutral" => Some(Self::Neutral),
            _ => None,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Positive => "positive",
            Self::Negative => "negative",
            Self::Neutral => "neutral",
        }
    }

    /// +1 / -1 / 0 contribution used by aspect rating features.
    pub fn signed_value(&self) -> i32 {
        match self {
            Self::Positive => 1,
            Self::Negative => -1,
            Self::Neutral => 0,
        }
    }
}

/// One extracted (aspect, opinion, sentiment) statement. The aspect is in
/// canonical form; the opinion preserves the model's wording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub aspect: String,
    pub opinion: String,
    pub sentiment: Sentiment,
}

/// Accumulated aspect history per user and per item. The store itself has
/// no notion of time; the extraction loop controls when updates become
/// visible, which is what enforces the strictly-before semantics.
#[derive(Debug, Clone, Default)]
pub struct HistoryStore {
    per_user: BTreeMap<String, BTreeSet<String>>,
    per_item: BTreeMap<String, BTreeSet<String>>,
}

impl HistoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn user_aspects(&self, user_id: &str) -> Option<&BTreeSet<String>> {
        self.per_user.get(user_id)
    }

    pub fn item_aspects(&self, item_id: &str) -> Option<&BTreeSet<String>> {
        self.per_item.get(item_id)
    }

    /// Union of this user's and this item's recorded aspects.
    pub fn history_for(&self, user_id: &str, item_id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        if let Some(set) = self.per_user.get(user_id) {
            out.extend(set.iter().cloned());
        }
        if let Some(set) = self.per_item.get(item_id) {
            out.extend(set.iter().cloned());
        }
        out
    }

    /// Records the in-vocabulary aspects of `triples` for both sides.
    /// Drifted aspects never enter history.
    pub fn update(
        &mut self,
        user_id: &str,
        item_id: &str,
        triples: &[Triple],
        vocab: &AspectVocabulary,
    ) {
        for triple in triples {
            if vocab.contains(&triple.aspect) {
                self.per_user
                    .entry(user_id.to_string())
                    .or_default()
                    .insert(triple.aspect.clone());
                self.per_item
                    .entry(item_id.to_string())
                    .or_default()
                    .insert(triple.aspect.clone());
            }
        }
    }
}

/// History snapshot as listed in prompts and artifacts: vocabulary order.
pub fn ordered_snapshot(vocab: &AspectVocabulary, history: &BTreeSet<String>) -> Vec<String> {
    vocab
        .aspects()
        .iter()
        .filter(|a| history.contains(*a))
        .cloned()
        .collect()
}

fn drifted_aspects(triples: &[Triple], vocab: &AspectVocabulary) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for triple in triples {
        if !vocab.contains(&triple.aspect) && seen.insert(triple.aspect.clone()) {
            out.push(triple.aspect.clone());
        }
    }
    out
}

/// Extraction result for one interaction. A failed call keeps its slot with
/// empty triples so downstream accounting sees every interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedInteraction {
    pub interaction: Interaction,
    pub triples: Vec<Triple>,
    pub history_snapshot: Vec<String>,
    pub drifted: Vec<String>,
    pub failed: bool,
    pub error: Option<String>,
}

impl AnnotatedInteraction {
    pub fn record(&self) -> AnnotationRecord {
        AnnotationRecord {
            user_id: self.interaction.user_id.clone(),
            item_id: self.interaction.item_id.clone(),
            timestamp: self.interaction.timestamp,
            rating: self.interaction.rating,
            triples: self.triples.clone(),
            history_snapshot: self.history_snapshot.clone(),
            drifted: self.drifted.clone(),
            failed: self.failed,
            error: self.error.clone(),
        }
    }

    /// Rebinds a stored record to its corpus interaction. The caller is
    /// responsible for checking that keys agree.
    pub fn from_record(record: AnnotationRecord, interaction: Interaction) -> Self {
        Self {
            interaction,
            triples: record.triples,
            history_snapshot: record.history_snapshot,
            drifted: record.drifted,
            failed: record.failed,
            error: record.error,
        }
    }
}

/// On-disk annotation row. Reviews are not duplicated here; consumers join
/// back to the corpus by (user, item, timestamp).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub rating: f64,
    pub triples: Vec<Triple>,
    pub history_snapshot: Vec<String>,
    pub drifted: Vec<String>,
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Loads an annotations JSONL file. An unparseable final line is treated
/// as a torn write and dropped; damage anywhere else is an error.
pub fn read_annotation_records(path: &std::path::Path) -> Result<Vec<AnnotationRecord>, ExtractError> {
    let content = std::fs::read_to_string(path).map_err(|source| ExtractError::CheckpointIo {
        path: path.to_path_buf(),
        source,
    })?;
    let lines: Vec<&str> = content.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    for (idx, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<AnnotationRecord>(line) {
            Ok(record) => records.push(record),
            Err(err) if idx + 1 == lines.len() => {
                log::warn!(
                    "dropping torn final checkpoint line {} in {}: {err}",
                    idx + 1,
                    path.display()
                );
            }
            Err(err) => {
                return Err(ExtractError::CorruptCheckpoint {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    reason: err.to_string(),
                });
            }
        }
    }
    Ok(records)
}

/// Matches annotation records to corpus interactions by key, in corpus
/// order. Every record must have its interaction and vice versa.
pub fn join_records(
    corpus: &Corpus,
    records: &[AnnotationRecord],
) -> Result<Vec<AnnotatedInteraction>, ExtractError> {
    if corpus.len() != records.len() {
        return Err(ExtractError::JoinMismatch {
            reason: format!(
                "{} annotation records for {} interactions",
                records.len(),
                corpus.len()
            ),
        });
    }
    let mut by_key: BTreeMap<(i64, &str, &str), &AnnotationRecord> = BTreeMap::new();
    for record in records {
        let key = (record.timestamp, record.user_id.as_str(), record.item_id.as_str());
        if by_key.insert(key, record).is_some() {
            return Err(ExtractError::JoinMismatch {
                reason: format!(
                    "duplicate annotation for user={} item={} timestamp={}",
                    record.user_id, record.item_id, record.timestamp
                ),
            });
        }
    }
    corpus
        .interactions()
        .iter()
        .map(|interaction| {
            let key = (
                interaction.timestamp,
                interaction.user_id.as_str(),
                interaction.item_id.as_str(),
            );
            by_key
                .get(&key)
                .map(|record| AnnotatedInteraction::from_record((*record).clone(), interaction.clone()))
                .ok_or_else(|| ExtractError::JoinMismatch {
                    reason: format!("no annotation for interaction {}", interaction.key()),
                })
        })
        .collect()
}

/// Per-call model options, constant across a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallOptions {
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CallOptions {
    fn default() -> Self {
        Self {
            model_id: "default-extractor".into(),
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Stage2Options {
    pub call: CallOptions,
    /// Annotations file doubling as the append-only checkpoint. When the
    /// file already holds a valid prefix of this corpus, those rows are
    /// reused instead of re-queried.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug)]
pub struct Stage2Outcome {
    pub annotations: Vec<AnnotatedInteraction>,
    /// Interactions whose call or parse failed and were recorded as such.
    pub failed: usize,
    /// Interactions replayed from the checkpoint without a backend call.
    pub resumed: usize,
}

/// A gateway error that invalidates the whole run rather than one call.
/// Per-prompt problems (missing script line, unparseable reply) degrade to
/// failed annotations instead.
fn is_fatal(err: &GatewayError) -> bool {
    matches!(
        err,
        GatewayError::AuthFailed
            | GatewayError::Http { .. }
            | GatewayError::InvalidRequest(_)
            | GatewayError::EmptyInput(_)
    )
}

/// Annotates one interaction against the current history snapshot.
pub fn extract_triples(
    interaction: &Interaction,
    vocab: &AspectVocabulary,
    history: &BTreeSet<String>,
    templates: &PromptTemplates,
    backend: &dyn CompletionBackend,
    call: &CallOptions,
) -> Result<AnnotatedInteraction, ExtractError> {
    let history_snapshot = ordered_snapshot(vocab, history);
    let failed_with = |error: String| AnnotatedInteraction {
        interaction: interaction.clone(),
        triples: Vec::new(),
        history_snapshot: history_snapshot.clone(),
        drifted: Vec::new(),
        failed: true,
        error: Some(error),
    };
    let bundle = render_dynamic_prompt(templates, vocab.aspects(), history, &interaction.review)
        .map_err(|source| ExtractError::Backend { source })?;
    let request = CompletionRequest {
        bundle,
        model_id: call.model_id.clone(),
        temperature: call.temperature,
        max_tokens: call.max_tokens,
    };
    let raw = match complete(backend, &request) {
        Ok(raw) => raw,
        Err(err) if is_fatal(&err) => return Err(ExtractError::Backend { source: err }),
        Err(err) => return Ok(failed_with(err.to_string())),
    };
    match crate::gateway::parse_triples(&raw) {
        Ok(triples) => {
            let drifted = drifted_aspects(&triples, vocab);
            Ok(AnnotatedInteraction {
                interaction: interaction.clone(),
                triples,
                history_snapshot,
                drifted,
                failed: false,
                error: None,
            })
        }
        Err(err) => Ok(failed_with(err.to_string())),
    }
}

/// Runs extraction over a chronologically sorted corpus.
///
/// History updates are buffered per timestamp: annotations produced at time
/// t become visible only once the loop reaches a later timestamp, so
/// same-time interactions cannot leak into each other. Resume replays the
/// checkpointed prefix through the same buffering, validating each stored
/// row against the corpus and the recomputed history.
pub fn run_stage2(
    corpus: &Corpus,
    vocab: &AspectVocabulary,
    templates: &PromptTemplates,
    backend: &dyn CompletionBackend,
    options: &Stage2Options,
) -> Result<Stage2Outcome, ExtractError> {
    if vocab.aspects().is_empty() {
        return Err(ExtractError::EmptyVocabulary);
    }
    if !corpus.is_chronological() {
        return Err(ExtractError::Unsorted);
    }

    let mut resumed_records: Vec<AnnotationRecord> = Vec::new();
    if let Some(path) = &options.checkpoint {
        if path.exists() {
            resumed_records = read_annotation_records(path)?;
            if resumed_records.len() > corpus.len() {
                return Err(ExtractError::CorruptCheckpoint {
                    path: path.clone(),
                    line: corpus.len() + 1,
                    reason: format!(
                        "{} checkpoint rows for {} interactions",
                        resumed_records.len(),
                        corpus.len()
                    ),
                });
            }
        }
    }

    let mut writer = match &options.checkpoint {
        Some(path) => {
            // Rewrite the validated prefix so a previously torn final line
            // cannot linger in front of appended rows.
            let file = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .truncate(true)
                .open(path)
                .map_err(|source| ExtractError::CheckpointIo {
                    path: path.clone(),
                    source,
                })?;
            Some((std::io::BufWriter::new(file), path.clone()))
        }
        None => None,
    };
    let write_record = |record: &AnnotationRecord,
                            writer: &mut Option<(std::io::BufWriter<std::fs::File>, PathBuf)>|
     -> Result<(), ExtractError> {
        if let Some((w, path)) = writer {
            let line = serde_json::to_string(record).expect("record serializes");
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| ExtractError::CheckpointIo {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(())
    };

    let mut store = HistoryStore::new();
    let mut pending: Vec<(String, String, Vec<Triple>)> = Vec::new();
    let mut last_ts: Option<i64> = None;
    let mut annotations: Vec<AnnotatedInteraction> = Vec::with_capacity(corpus.len());
    let mut failed = 0usize;
    let mut resumed = 0usize;

    for (idx, interaction) in corpus.interactions().iter().enumerate() {
        if last_ts != Some(interaction.timestamp) {
            for (user, item, triples) in pending.drain(..) {
                store.update(&user, &item, &triples, vocab);
            }
            last_ts = Some(interaction.timestamp);
        }
        let history = store.history_for(&interaction.user_id, &interaction.item_id);

        let annotated = if idx < resumed_records.len() {
            let record = resumed_records[idx].clone();
            let path = options.checkpoint.clone().expect("resume implies checkpoint");
            let corrupt = |reason: String| ExtractError::CorruptCheckpoint {
                path: path.clone(),
                line: idx + 1,
                reason,
            };
            if record.user_id != interaction.user_id
                || record.item_id != interaction.item_id
                || record.timestamp != interaction.timestamp
            {
                return Err(corrupt(format!(
                    "row is for {}/{}/{} but corpus has {}",
                    record.user_id,
                    record.item_id,
                    record.timestamp,
                    interaction.key()
                )));
            }
            if record.rating != interaction.rating {
                return Err(corrupt("rating differs from corpus".into()));
            }
            let annotated = AnnotatedInteraction::from_record(record, interaction.clone());
            let expected_snapshot = ordered_snapshot(vocab, &history);
            if annotated.history_snapshot != expected_snapshot {
                return Err(corrupt(
                    "history snapshot does not match replayed history; \
                     checkpoint was produced by a different run"
                        .into(),
                ));
            }
            if annotated.drifted != drifted_aspects(&annotated.triples, vocab) {
                return Err(corrupt(
                    "drifted aspects do not match this vocabulary".into(),
                ));
            }
            resumed += 1;
            annotated
        } else {
            extract_triples(interaction, vocab, &history, templates, backend, &options.call)?
        };

        write_record(&annotated.record(), &mut writer)?;
        if annotated.failed {
            failed += 1;
        }
        pending.push((
            interaction.user_id.clone(),
            interaction.item_id.clone(),
            annotated.triples.clone(),
        ));
        annotations.push(annotated);
    }

    Ok(Stage2Outcome {
        annotations,
        failed,
        resumed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{dynamic_script_key, PromptKind, ScriptEntry, ScriptedBackend};
    use crate::vocab::AspectVocabulary;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn vocab(aspects: &[&str]) -> AspectVocabulary {
        AspectVocabulary::fixed(aspects)
    }

    fn interaction(user: &str, item: &str, text: &str, ts: i64) -> Interaction {
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            rating: 4.0,
            review: text.into(),
            timestamp: ts,
        }
    }

    /// Vocabulary the demo corpus tests run under; scripted keys must be
    /// built against the same aspect list.
    const DEMO_ASPECTS: &[&str] = &["price", "sound"];

    fn script(review: &str, response: &str) -> ScriptEntry {
        let aspects: Vec<String> = DEMO_ASPECTS.iter().map(|a| (*a).to_string()).collect();
        ScriptEntry {
            kind: PromptKind::Dynamic,
            key: dynamic_script_key(&aspects, review),
            response: response.into(),
        }
    }

    fn triple_json(aspect: &str, opinion: &str, sentiment: &str) -> String {
        format!(r#"{{"aspect":"{aspect}","opinion":"{opinion}","sentiment":"{sentiment}"}}"#)
    }

    struct CountingBackend {
        inner: ScriptedBackend,
        calls: Arc<AtomicUsize>,
    }

    impl CompletionBackend for CountingBackend {
        fn name(&self) -> &'static str {
            "counting"
        }
        fn run(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.run(request)
        }
    }

    #[test]
    fn sentiment_parse_and_sign() {
        assert_eq!(Sentiment::parse(" Positive "), Some(Sentiment::Positive));
        assert_eq!(Sentiment::parse("NEGATIVE"), Some(Sentiment::Negative));
        assert_eq!(Sentiment::parse("neutral"), Some(Sentiment::Neutral));
        assert_eq!(Sentiment::parse("mixed"), None);
        assert_eq!(Sentiment::Positive.signed_value(), 1);
        assert_eq!(Sentiment::Negative.signed_value(), -1);
        assert_eq!(Sentiment::Neutral.signed_value(), 0);
    }

    #[test]
    fn triple_serializes_to_flat_object() {
        let t = Triple {
            aspect: "price".into(),
            opinion: "too high".into(),
            sentiment: Sentiment::Negative,
        };
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"aspect":"price","opinion":"too high","sentiment":"negative"}"#
        );
    }

    #[test]
    fn history_store_filters_and_unions() {
        let v = vocab(&["price", "sound"]);
        let mut store = HistoryStore::new();
        let triples = vec![
            Triple {
                aspect: "price".into(),
                opinion: "fair".into(),
                sentiment: Sentiment::Positive,
            },
            Triple {
                aspect: "offtopic".into(),
                opinion: "weird".into(),
                sentiment: Sentiment::Neutral,
            },
        ];
        store.update("u1", "i1", &triples, &v);
        assert!(store.user_aspects("u1").unwrap().contains("price"));
        assert!(!store.user_aspects("u1").unwrap().contains("offtopic"));
        assert!(store.item_aspects("i1").unwrap().contains("price"));

        let more = vec![Triple {
            aspect: "sound".into(),
            opinion: "crisp".into(),
            sentiment: Sentiment::Positive,
        }];
        store.update("u2", "i1", &more, &v);
        let union = store.history_for("u1", "i1");
        assert_eq!(
            union.into_iter().collect::<Vec<_>>(),
            vec!["price".to_string(), "sound".to_string()]
        );
    }

    fn demo_corpus() -> Corpus {
        // u1 reviews i1, then u2 and u3 review i1 and i2 at the same
        // moment, then u1 reviews i2.
        Corpus::new(vec![
            interaction("u1", "i1", "the price was fair", 10),
            interaction("u2", "i1", "sound is crisp", 20),
            interaction("u3", "i2", "battery died fast", 20),
            interaction("u1", "i2", "great sound and price", 30),
        ])
        .unwrap()
    }

    fn demo_scripts() -> Vec<ScriptEntry> {
        vec![
            script(
                "the price was fair",
                &format!("[{}]", triple_json("price", "was fair", "positive")),
            ),
            script(
                "sound is crisp",
                &format!("[{}]", triple_json("sound", "is crisp", "positive")),
            ),
            script(
                "battery died fast",
                &format!("[{}]", triple_json("battery", "died fast", "negative")),
            ),
            script(
                "great sound and price",
                &format!(
                    "[{},{}]",
                    triple_json("sound", "great", "positive"),
                    triple_json("price", "great", "positive")
                ),
            ),
        ]
    }

    #[test]
    fn stage2_histories_respect_strict_past() {
        let corpus = demo_corpus();
        let v = vocab(&["price", "sound"]);
        let backend = ScriptedBackend::from_entries(demo_scripts()).unwrap();
        let templates = PromptTemplates::default();
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: None,
        };
        let outcome = run_stage2(&corpus, &v, &templates, &backend, &options).unwrap();
        assert_eq!(outcome.annotations.len(), 4);
        assert_eq!(outcome.failed, 0);

        // First interaction: nothing before it.
        assert!(outcome.annotations[0].history_snapshot.is_empty());
        // u2 on i1 at t=20 sees i1's aspect from t=10.
        assert_eq!(outcome.annotations[1].history_snapshot, vec!["price"]);
        // u3 on i2 at t=20: no history for either side.
        assert!(outcome.annotations[2].history_snapshot.is_empty());
        // u1 on i2 at t=30: u1 contributed price at t=10; i2's battery
        // triple was out of vocabulary, so only price is visible.
        assert_eq!(outcome.annotations[3].history_snapshot, vec!["price"]);
        // The battery aspect is flagged drifted on its own row.
        assert_eq!(outcome.annotations[2].drifted, vec!["battery"]);
    }

    #[test]
    fn stage2_same_timestamp_interactions_stay_invisible() {
        let corpus = Corpus::new(vec![
            interaction("u1", "i1", "the price was fair", 10),
            interaction("u2", "i1", "sound is crisp", 10),
        ])
        .unwrap();
        let v = vocab(&["price", "sound"]);
        let backend = ScriptedBackend::from_entries(demo_scripts()).unwrap();
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: None,
        };
        let outcome =
            run_stage2(&corpus, &v, &PromptTemplates::default(), &backend, &options).unwrap();
        assert!(outcome.annotations[0].history_snapshot.is_empty());
        assert!(outcome.annotations[1].history_snapshot.is_empty());
    }

    #[test]
    fn stage2_records_failures_and_continues() {
        let corpus = demo_corpus();
        let v = vocab(&["price", "sound"]);
        // Drop the script for the second review and break the third's JSON.
        let scripts = vec![
            demo_scripts()[0].clone(),
            script("battery died fast", "not json at all"),
            demo_scripts()[3].clone(),
        ];
        let backend = ScriptedBackend::from_entries(scripts).unwrap();
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: None,
        };
        let outcome =
            run_stage2(&corpus, &v, &PromptTemplates::default(), &backend, &options).unwrap();
        assert_eq!(outcome.failed, 2);
        assert!(outcome.annotations[1].failed);
        assert!(outcome.annotations[1].triples.is_empty());
        assert!(outcome.annotations[1]
            .error
            .as_deref()
            .unwrap()
            .contains("no scripted response"));
        assert!(outcome.annotations[2].failed);
        assert!(outcome.annotations[2]
            .error
            .as_deref()
            .unwrap()
            .contains("could not parse"));
        // The final interaction still sees history from the successful row.
        assert_eq!(outcome.annotations[3].history_snapshot, vec!["price"]);
    }

    #[test]
    fn stage2_rejects_unsorted_corpus() {
        let corpus = Corpus::new(vec![
            interaction("u1", "i1", "later", 20),
            interaction("u2", "i1", "earlier", 10),
        ])
        .unwrap();
        let v = vocab(&["price"]);
        let backend = ScriptedBackend::from_entries(vec![]).unwrap();
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: None,
        };
        assert!(matches!(
            run_stage2(&corpus, &v, &PromptTemplates::default(), &backend, &options),
            Err(ExtractError::Unsorted)
        ));
    }

    #[test]
    fn stage2_resumes_from_checkpoint_without_recalling() {
        let corpus = demo_corpus();
        let v = vocab(&["price", "sound"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: Some(path.clone()),
        };
        let templates = PromptTemplates::default();

        let backend = ScriptedBackend::from_entries(demo_scripts()).unwrap();
        let full = run_stage2(&corpus, &v, &templates, &backend, &options).unwrap();
        assert_eq!(full.resumed, 0);
        let first_bytes = std::fs::read(&path).unwrap();

        let calls = Arc::new(AtomicUsize::new(0));
        let counting = CountingBackend {
            inner: ScriptedBackend::from_entries(demo_scripts()).unwrap(),
            calls: calls.clone(),
        };
        let rerun = run_stage2(&corpus, &v, &templates, &counting, &options).unwrap();
        assert_eq!(rerun.resumed, 4);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert_eq!(rerun.annotations, full.annotations);
        assert_eq!(std::fs::read(&path).unwrap(), first_bytes);
    }

    #[test]
    fn stage2_resumes_after_partial_run_and_torn_line() {
        let corpus = demo_corpus();
        let v = vocab(&["price", "sound"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: Some(path.clone()),
        };
        let templates = PromptTemplates::default();
        let backend = ScriptedBackend::from_entries(demo_scripts()).unwrap();
        let full = run_stage2(&corpus, &v, &templates, &backend, &options).unwrap();
        let full_bytes = std::fs::read(&path).unwrap();

        // Keep two complete rows plus a torn third line.
        let text = String::from_utf8(full_bytes.clone()).unwrap();
        let rows: Vec<&str> = text.lines().collect();
        let truncated = format!("{}\n{}\n{{\"user_id\":\"u3\",\"it", rows[0], rows[1]);
        std::fs::write(&path, truncated).unwrap();

        let calls = Arc::new(AtomicUsize::new(0));
        let counting = CountingBackend {
            inner: ScriptedBackend::from_entries(demo_scripts()).unwrap(),
            calls: calls.clone(),
        };
        let resumed = run_stage2(&corpus, &v, &templates, &counting, &options).unwrap();
        assert_eq!(resumed.resumed, 2);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
        assert_eq!(resumed.annotations, full.annotations);
        assert_eq!(std::fs::read(&path).unwrap(), full_bytes);
    }

    #[test]
    fn stage2_rejects_checkpoint_from_other_corpus() {
        let corpus = demo_corpus();
        let v = vocab(&["price", "sound"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: Some(path.clone()),
        };
        let templates = PromptTemplates::default();
        let backend = ScriptedBackend::from_entries(demo_scripts()).unwrap();
        run_stage2(&corpus, &v, &templates, &backend, &options).unwrap();

        // Swap the first row's user to break the key match.
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"u1\"", "\"ux\"", 1);
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(
            run_stage2(&corpus, &v, &templates, &backend, &options),
            Err(ExtractError::CorruptCheckpoint { line: 1, .. })
        ));
    }

    #[test]
    fn stage2_rejects_checkpoint_with_tampered_middle_line() {
        let corpus = demo_corpus();
        let v = vocab(&["price", "sound"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.jsonl");
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: Some(path.clone()),
        };
        let templates = PromptTemplates::default();
        let backend = ScriptedBackend::from_entries(demo_scripts()).unwrap();
        run_stage2(&corpus, &v, &templates, &backend, &options).unwrap();

        let text = std::fs::read_to_string(&path).unwrap();
        let mut rows: Vec<String> = text.lines().map(String::from).collect();
        rows[1] = "garbage".into();
        std::fs::write(&path, rows.join("\n")).unwrap();
        assert!(matches!(
            run_stage2(&corpus, &v, &templates, &backend, &options),
            Err(ExtractError::CorruptCheckpoint { line: 2, .. })
        ));
    }

    #[test]
    fn join_records_matches_by_key() {
        let corpus = demo_corpus();
        let v = vocab(&["price", "sound"]);
        let backend = ScriptedBackend::from_entries(demo_scripts()).unwrap();
        let options = Stage2Options {
            call: CallOptions::default(),
            checkpoint: None,
        };
        let outcome =
            run_stage2(&corpus, &v, &PromptTemplates::default(), &backend, &options).unwrap();
        let mut records: Vec<AnnotationRecord> =
            outcome.annotations.iter().map(AnnotatedInteraction::record).collect();
        records.reverse();
        let joined = join_records(&corpus, &records).unwrap();
        assert_eq!(joined, outcome.annotations);

        records.pop();
        assert!(matches!(
            join_records(&corpus, &records),
            Err(ExtractError::JoinMismatch { .. })
        ));
    }
}
