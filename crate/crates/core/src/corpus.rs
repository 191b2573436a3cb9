//! Review corpus: loading, validation, filtering, ordering, sampling, and
//! length stratification.
//!
//! A corpus is an immutable list of interactions with a content hash that
//! identifies the interaction set independent of storage order. All sampling
//! here is seeded and reproducible: the same corpus, parameters, and seed
//! always select the same records.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing;

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no valid records in {path}")]
    NoValidRecords { path: PathBuf },
    #[error("invalid interaction: {reason}")]
    InvalidInteraction { reason: String },
    #[error("duplicate interaction key user={user_id} item={item_id} timestamp={timestamp}")]
    DuplicateKey {
        user_id: String,
        item_id: String,
        timestamp: i64,
    },
    #[error("cannot draw {partitions} partitions from {len} interactions")]
    NotEnoughRecords { partitions: usize, len: usize },
    #[error("sampling ratio {ratio} outside (0, 1]")]
    InvalidRatio { ratio: f64 },
    #[error("ratio {ratio} of {len} interactions selects nothing")]
    EmptySubset { ratio: f64, len: usize },
}

/// One review event. `rating` is kept at `f64` because it is data, not a
/// tunable numeric: artifacts serialize it exactly as loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    #[serde(rename = "text")]
    pub review: String,
    pub timestamp: i64,
}

/// Identity of an interaction. Ordering is chronological first, then user
/// and item ids, which is the processing order of the extraction stage.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InteractionKey {
    pub timestamp: i64,
    pub user_id: String,
    pub item_id: String,
}

impl std::fmt::Display for InteractionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.user_id, self.item_id, self.timestamp)
    }
}

impl Interaction {
    pub fn key(&self) -> InteractionKey {
        InteractionKey {
            timestamp: self.timestamp,
            user_id: self.user_id.clone(),
            item_id: self.item_id.clone(),
        }
    }

    /// Whitespace token count of the review text.
    pub fn word_count(&self) -> usize {
        self.review.split_whitespace().count()
    }

    fn validate(&self) -> Result<(), String> {
        if self.user_id.trim().is_empty() {
            return Err("empty user_id".into());
        }
        if self.item_id.trim().is_empty() {
            return Err("empty item_id".into());
        }
        if !self.rating.is_finite() || self.rating < RATING_MIN || self.rating > RATING_MAX {
            return Err(format!(
                "rating {} outside [{RATING_MIN}, {RATING_MAX}]",
                self.rating
            ));
        }
        if self.review.trim().is_empty() {
            return Err("empty review text".into());
        }
        if self.timestamp < 0 {
            return Err(format!("negative timestamp {}", self.timestamp));
        }
        Ok(())
    }
}

/// Validated interaction set with a content hash.
#[derive(Debug, Clone)]
pub struct Corpus {
    interactions: Vec<Interaction>,
    id: String,
}

impl Corpus {
    /// Builds a corpus, enforcing per-record validity and key uniqueness.
    /// An empty interaction list is allowed; loaders reject it, but filters
    /// may legitimately produce it.
    pub fn new(interactions: Vec<Interaction>) -> Result<Self, CorpusError> {
        let mut seen: HashSet<(&str, &str, i64)> = HashSet::with_capacity(interactions.len());
        for x in &interactions {
            x.validate()
                .map_err(|reason| CorpusError::InvalidInteraction { reason })?;
            if !seen.insert((&x.user_id, &x.item_id, x.timestamp)) {
                return Err(CorpusError::DuplicateKey {
                    user_id: x.user_id.clone(),
                    item_id: x.item_id.clone(),
                    timestamp: x.timestamp,
                });
            }
        }
        let id = content_hash(&interactions);
        Ok(Self { interactions, id })
    }

    /// Content hash over the interaction set, independent of storage order.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn average_review_words(&self) -> f64 {
        if self.interactions.is_empty() {
            return 0.0;
        }
        let total: usize = self.interactions.iter().map(Interaction::word_count).sum();
        total as f64 / self.interactions.len() as f64
    }

    /// True when interactions are in strictly increasing key order.
    pub fn is_chronological(&self) -> bool {
        self.interactions
            .windows(2)
            .all(|w| w[0].key() < w[1].key())
    }
}

fn content_hash(interactions: &[Interaction]) -> String {
    let mut lines: Vec<String> = interactions
        .iter()
        .map(|x| serde_json::to_string(x).expect("interaction serializes"))
        .collect();
    // Canonical order: sort serialized lines so the hash identifies the set.
    // Keys are unique, so ties cannot occur between distinct records.
    lines.sort_unstable();
    let parts: Vec<&[u8]> = lines.iter().map(|l| l.as_bytes()).collect();
    hashing::sha256_hex(&parts)
}

/// A record refused during loading, with its 1-based line number.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reject {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    pub rejects: Vec<Reject>,
}

/// Loads a JSONL review file. Invalid records become [`Reject`] entries
/// instead of failing the load; a file with zero valid records is an error.
pub fn load_reviews(path: &Path) -> Result<LoadOutcome, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut interactions = Vec::new();
    let mut rejects = Vec::new();
    let mut seen: HashMap<(String, String, i64), usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            rejects.push(Reject {
                line_no,
                reason: "blank line".into(),
            });
            continue;
        }
        let record: Interaction = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(err) => {
                rejects.push(Reject {
                    line_no,
                    reason: format!("malformed JSON: {err}"),
                });
                continue;
            }
        };
        if let Err(reason) = record.validate() {
            rejects.push(Reject { line_no, reason });
            continue;
        }
        let key = (
            record.user_id.clone(),
            record.item_id.clone(),
            record.timestamp,
        );
        if let Some(first) = seen.get(&key) {
            rejects.push(Reject {
                line_no,
                reason: format!("duplicate of line {first}"),
            });
            continue;
        }
        seen.insert(key, line_no);
        interactions.push(record);
    }
    if interactions.is_empty() {
        return Err(CorpusError::NoValidRecords {
            path: path.to_path_buf(),
        });
    }
    Ok(LoadOutcome {
        corpus: Corpus::new(interactions)?,
        rejects,
    })
}

/// Writes a corpus as JSONL in its stored order.
pub fn write_reviews(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = Vec::new();
    for x in corpus.interactions() {
        out.extend_from_slice(serde_json::to_string(x).expect("serializes").as_bytes());
        out.push(b'\n');
    }
    let mut file = File::create(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterRules {
    /// Users with this many records or fewer are dropped.
    pub min_user_records: usize,
    /// Items with this many records or fewer are dropped.
    pub min_item_records: usize,
    /// Interactions strictly before this timestamp are dropped.
    pub since: Option<i64>,
}

/// Applies the time cut, then prunes sparse users and items to a fixpoint.
/// Pruning is confluent: removing a sparse user can only lower item counts
/// and vice versa, so the surviving set does not depend on sweep order.
pub fn filter_corpus(corpus: &Corpus, rules: &FilterRules) -> Corpus {
    let mut kept: Vec<&Interaction> = corpus
        .interactions()
        .iter()
        .filter(|x| rules.since.is_none_or(|s| x.timestamp >= s))
        .collect();
    loop {
        let mut user_counts: HashMap<&str, usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for x in &kept {
            *user_counts.entry(x.user_id.as_str()).or_insert(0) += 1;
            *item_counts.entry(x.item_id.as_str()).or_insert(0) += 1;
        }
        let before = kept.len();
        kept.retain(|x| {
            user_counts[x.user_id.as_str()] > rules.min_user_records
                && item_counts[x.item_id.as_str()] > rules.min_item_records
        });
        if kept.len() == before {
            break;
        }
    }
    let interactions: Vec<Interaction> = kept.into_iter().cloned().collect();
    Corpus::new(interactions).expect("filtering preserves validity")
}

/// Stable chronological order: (timestamp, user_id, item_id) ascending.
pub fn sort_chronologically(corpus: &Corpus) -> Corpus {
    let mut interactions = corpus.interactions().to_vec();
    interactions.sort_by_key(|x| x.key());
    Corpus::new(interactions).expect("reordering preserves validity")
}

/// First `k` entries of a seeded Fisher-Yates pass over `0..n`, which is a
/// uniform without-replacement sample. Hand-rolled so the selection stays
/// stable across library upgrades.
fn sample_indices(n: usize, k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut picked = pool[..k].to_vec();
    picked.sort_unstable();
    picked
}

/// Draws `partitions` independent subsamples of size `floor(len / partitions)`
/// each, sampled without replacement within a partition. Partitions may
/// overlap each other; each gets its own derived RNG stream, so adding or
/// removing a partition never shifts the others.
pub fn subsample_partitions(
    corpus: &Corpus,
    partitions: usize,
    seed: u64,
) -> Result<Vec<Corpus>, CorpusError> {
    let len = corpus.len();
    if partitions == 0 || partitions > len {
        return Err(CorpusError::NotEnoughRecords { partitions, len });
    }
    let size = len / partitions;
    let mut out = Vec::with_capacity(partitions);
    for part in 0..partitions {
        let seed_bytes = hashing::derive_seed(
            "corpus-partition",
            &[
                corpus.id().as_bytes(),
                &(partitions as u64).to_le_bytes(),
                &seed.to_le_bytes(),
                &(part as u64).to_le_bytes(),
            ],
        );
        let mut rng = ChaCha12Rng::from_seed(seed_bytes);
        let picked = sample_indices(len, size, &mut rng);
        let members: Vec<Interaction> = picked
            .iter()
            .map(|&i| corpus.interactions()[i].clone())
            .collect();
        out.push(Corpus::new(members).expect("subset preserves validity"));
    }
    Ok(out)
}

/// Uniform subset of `floor(ratio * len)` interactions, kept in corpus order.
pub fn ratio_subset(corpus: &Corpus, ratio: f64, seed: u64) -> Result<Corpus, CorpusError> {
    if !ratio.is_finite() || ratio <= 0.0 || ratio > 1.0 {
        return Err(CorpusError::InvalidRatio { ratio });
    }
    let len = corpus.len();
    let size = (ratio * len as f64).floor() as usize;
    if size == 0 {
        return Err(CorpusError::EmptySubset { ratio, len });
    }
    let seed_bytes = hashing::derive_seed(
        "corpus-ratio",
        &[
            corpus.id().as_bytes(),
            &ratio.to_bits().to_le_bytes(),
            &seed.to_le_bytes(),
        ],
    );
    let mut rng = ChaCha12Rng::from_seed(seed_bytes);
    let picked = sample_indices(len, size, &mut rng);
    let members: Vec<Interaction> = picked
        .iter()
        .map(|&i| corpus.interactions()[i].clone())
        .collect();
    Ok(Corpus::new(members).expect("subset preserves validity"))
}

/// Review-length bands over whitespace word counts. Boundary counts fall in
/// the lower band: 10 words is Short, 50 is Medium, 100 is Long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LengthStratum {
    Short,
    Medium,
    Long,
    ExtraLong,
}

impl LengthStratum {
    pub fn of_words(words: usize) -> Self {
        match words {
            0..=10 => Self::Short,
            11..=50 => Self::Medium,
            51..=100 => Self::Long,
            _ => Self::ExtraLong,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::Short => "short",
            Self::Medium => "medium",
            Self::Long => "long",
            Self::ExtraLong => "extra-long",
        }
    }
}

/// Splits a corpus into length bands. Every interaction lands in exactly one
/// band; bands with no members are absent from the map.
pub fn stratify_by_length(corpus: &Corpus) -> BTreeMap<LengthStratum, Corpus> {
    let mut buckets: BTreeMap<LengthStratum, Vec<Interaction>> = BTreeMap::new();
    for x in corpus.interactions() {
        buckets
            .entry(LengthStratum::of_words(x.word_count()))
            .or_default()
            .push(x.clone());
    }
    buckets
        .into_iter()
        .map(|(stratum, members)| {
            (
                stratum,
                Corpus::new(members).expect("subset preserves validity"),
            )
        })
        .collect()
}
