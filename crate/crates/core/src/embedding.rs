//! Text embedding: a generic vector type, the shared tokenizer, cosine
//! similarity, mean pooling, and embedding providers.
//!
//! Providers are deterministic functions of their input text. The offline
//! provider hashes character 3-grams into a fixed number of buckets; the
//! HTTP provider defers to a remote service. Both can sit behind
//! [`CachedEmbedder`] so repeated texts embed once per run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing;
use crate::numeric::Real;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding dimension must be at least 1")]
    InvalidDim,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cosine undefined for a zero vector")]
    ZeroVector,
    #[error("non-finite component at index {index}")]
    NonFinite { index: usize },
    #[error("no tokens to pool")]
    NoTokens,
    #[error("embedding request failed: {message}")]
    Http { message: String },
    #[error("embedding response malformed: {message}")]
    BadResponse { message: String },
    #[error("embedding cache io at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("embedding cache rejected: {reason}")]
    CacheFormat { reason: String },
}

/// Dense vector over a [`Real`] scalar. Components are always finite;
/// construction rejects NaN and infinities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector<F> {
    components: Vec<F>,
}

impl<F: Real> Vector<F> {
    pub fn new(components: Vec<F>) -> Result<Self, EmbedError> {
        if let Some(index) = components.iter().position(|c| !c.is_finite()) {
            return Err(EmbedError::NonFinite { index });
        }
        Ok(Self { components })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            components: vec![F::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[F] {
        &self.components
    }

    pub fn dot(&self, other: &Self) -> Result<F, EmbedError> {
        if self.dim() != other.dim() {
            return Err(EmbedError::DimMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        let mut acc = F::zero();
        for (a, b) in self.components.iter().zip(&other.components) {
            acc += *a * *b;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> F {
        self.dot(self).expect("same dims").sqrt()
    }

    /// Unit-length copy; errors on the zero vector.
    pub fn normalized(&self) -> Result<Self, EmbedError> {
        let n = self.norm();
        if n == F::zero() {
            return Err(EmbedError::ZeroVector);
        }
        Ok(Self {
            components: self.components.iter().map(|c| *c / n).collect(),
        })
    }

    pub fn scale(&self, factor: F) -> Self {
        Self {
            components: self.components.iter().map(|c| *c * factor).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.components.iter_mut().zip(&other.components) {
            *a += *b;
        }
    }
}

/// Cosine similarity. Errors on dimension mismatch or a zero operand; the
/// result may exceed 1 in magnitude only by floating-point rounding.
pub fn cosine<F: Real>(u: &Vector<F>, v: &Vector<F>) -> Result<F, EmbedError> {
    let dot = u.dot(v)?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == F::zero() || nv == F::zero() {
        return Err(EmbedError::ZeroVector);
    }
    Ok(dot / (nu * nv))
}

/// Lowercases, splits on whitespace, and trims non-alphanumeric characters
/// from token edges. Interior punctuation survives, so contractions stay
/// single tokens. Empty results are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.to_lowercase())
            }
        })
        .collect()
}

/// Deterministic text embedding.
pub trait EmbeddingProvider<F: Real>: Send + Sync {
    fn dim(&self) -> usize;
    /// Stable identifier recorded in metric artifacts.
    fn id(&self) -> String;
    fn embed(&self, text: &str) -> Result<Vector<F>, EmbedError>;
}

/// Unweighted mean of per-token embeddings. Deliberately not re-normalized:
/// span vectors keep their magnitude so near-duplicate spans stay comparable
/// through cosine's own normalization.
pub fn mean_pool<F: Real, P: EmbeddingProvider<F> + ?Sized>(
    provider: &P,
    tokens: &[String],
) -> Result<Vector<F>, EmbedError> {
    if tokens.is_empty() {
        return Err(EmbedError::NoTokens);
    }
    let mut acc = Vector::zeros(provider.dim());
    for token in tokens {
        let v = provider.embed(token)?;
        if v.dim() != acc.dim() {
            return Err(EmbedError::DimMismatch {
                expected: acc.dim(),
                got: v.dim(),
            });
        }
        acc.add_assign(&v);
    }
    Ok(acc.scale(F::one() / F::from_usize_lossy(tokens.len())))
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over bytes. Pinned here rather than using the stdlib hasher so
/// bucket assignment never changes across toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = FNV_OFFSET;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Offline embedder: counts character 3-grams of the case-folded text into
/// hashed buckets, then L2-normalizes. Texts shorter than 3 characters hash
/// as a single whole-text gram.
#[derive(Debug, Clone)]
pub struct HashedNgramEmbedder<F> {
    dim: usize,
    _marker: std::marker::PhantomData<F>,
}

pub const DEFAULT_HASHED_DIM: usize = 256;

impl<F: Real> HashedNgramEmbedder<F> {
    pub fn new(dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::InvalidDim);
        }
        Ok(Self {
            dim,
            _marker: std::marker::PhantomData,
        })
    }
}

impl<F: Real> Default for HashedNgramEmbedder<F> {
    fn default() -> Self {
        Self::new(DEFAULT_HASHED_DIM).expect("default dim is valid")
    }
}

impl<F: Real> EmbeddingProvider<F> for HashedNgramEmbedder<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("hashed-ngram-{}", self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vector<F>, EmbedError> {
        let folded = text.to_lowercase();
        let trimmed = folded.trim();
        if trimmed.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let chars: Vec<char> = trimmed.chars().collect();
        // Accumulate counts in f64 and convert after normalizing so the f32
        // instantiation loses precision only once, at the end.
        let mut counts = vec![0.0f64; self.dim];
        let mut bump = |gram: &str| {
            let bucket = (fnv1a(gram.as_bytes()) % self.dim as u64) as usize;
            counts[bucket] += 1.0;
        };
        if chars.len() < 3 {
            bump(trimmed);
        } else {
            let mut gram = String::with_capacity(12);
            for window in chars.windows(3) {
                gram.clear();
                gram.extend(window);
                bump(&gram);
            }
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        debug_assert!(norm > 0.0);
        let components = counts
            .iter()
            .map(|c| F::from_f64_lossy(c / norm))
            .collect();
        Vector::new(components)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile<F> {
    version: u32,
    provider_id: String,
    dim: usize,
    entries: BTreeMap<String, Vec<F>>,
}

const CACHE_VERSION: u32 = 1;

/// Content-addressed embedding cache wrapping another provider. Reads are
/// concurrent; writes serialize on the lock. Within a run every text maps
/// to exactly one vector, the first one computed.
pub struct CachedEmbedder<F: Real> {
    inner: Box<dyn EmbeddingProvider<F>>,
    cache: RwLock<BTreeMap<String, Vector<F>>>,
}

impl<F: Real> CachedEmbedder<F> {
    pub fn new(inner: Box<dyn EmbeddingProvider<F>>) -> Self {
        Self {
            inner,
            cache: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(text: &str) -> String {
        hashing::sha256_hex(&[text.as_bytes()])
    }
}

impl<F: Real + Serialize + DeserializeOwned> CachedEmbedder<F> {
    /// Persists cache entries keyed by text hash. JSON keeps `f64` values
    /// bit-exact through the shortest round-trip representation.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let cache = self.cache.read().expect("cache lock");
        let file = CacheFile {
            version: CACHE_VERSION,
            provider_id: self.inner.id(),
            dim: self.inner.dim(),
            entries: cache
                .iter()
                .map(|(k, v)| (k.clone(), v.components().to_vec()))
                .collect(),
        };
        let bytes = serde_json::to_vec(&file).expect("cache serializes");
        std::fs::write(path, bytes).map_err(|source| EmbedError::CacheIo {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Loads persisted entries. Refuses caches written by a different
    /// provider, dimension, or format version instead of mixing spaces.
    pub fn load(&self, path: &Path) -> Result<usize, EmbedError> {
        let bytes = std::fs::read(path).map_err(|source| EmbedError::CacheIo {
            path: path.to_path_buf(),
            source,
        })?;
        let file: CacheFile<F> =
            serde_json::from_slice(&bytes).map_err(|err| EmbedError::CacheFormat {
                reason: err.to_string(),
            })?;
        if file.version != CACHE_VERSION {
            return Err(EmbedError::CacheFormat {
                reason: format!("version {} unsupported", file.version),
            });
        }
        if file.provider_id != self.inner.id() || file.dim != self.inner.dim() {
            return Err(EmbedError::CacheFormat {
                reason: format!(
                    "cache for provider {} dim {}, expected {} dim {}",
                    file.provider_id,
                    file.dim,
                    self.inner.id(),
                    self.inner.dim()
                ),
            });
        }
        let mut cache = self.cache.write().expect("cache lock");
        let mut loaded = 0;
        for (key, components) in file.entries {
            cache.insert(key, Vector::new(components)?);
            loaded += 1;
        }
        Ok(loaded)
    }
}

impl<F: Real> EmbeddingProvider<F> for CachedEmbedder<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<Vector<F>, EmbedError> {
        let key = Self::key(text);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let vector = self.inner.embed(text)?;
        let mut cache = self.cache.write().expect("cache lock");
        // A racing writer may have inserted meanwhile; first insert wins so
        // the mapping stays single-valued.
        Ok(cache.entry(key).or_insert(vector).clone())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    embedding: Vec<f64>,
}

/// Remote embedding endpoint speaking `{model, input: [text]}` requests and
/// `{data: [{embedding: [...]}]}` responses.
pub struct HttpEmbedder<F> {
    endpoint: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Real> HttpEmbedder<F> {
    pub fn new(
        endpoint: &str,
        model: &str,
        dim: usize,
        api_key: Option<String>,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::InvalidDim);
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(60))
            .build()
            .map_err(|err| EmbedError::Http {
                message: err.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            dim,
            api_key,
            client,
            _marker: std::marker::PhantomData,
        })
    }
}

impl<F: Real> EmbeddingProvider<F> for HttpEmbedder<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("http-{}-{}", self.model, self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vector<F>, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let body = EmbedRequest {
            model: &self.model,
            input: vec![text],
        };
        let mut request = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|err| EmbedError::Http {
            message: err.to_string(),
        })?;
        let status = response.status();
        if !status.is_success() {
            return Err(EmbedError::Http {
                message: format!("status {status}"),
            });
        }
        let parsed: EmbedResponse = response.json().map_err(|err| EmbedError::BadResponse {
            message: err.to_string(),
        })?;
        let datum = parsed.data.first().ok_or_else(|| EmbedError::BadResponse {
            message: "empty data array".into(),
        })?;
        if datum.embedding.len() != self.dim {
            return Err(EmbedError::DimMismatch {
                expected: self.dim,
                got: datum.embedding.len(),
            });
        }
        let components = datum.embedding.iter().map(|c| F::from_f64_lossy(*c)).collect();
        Vector::new(components)
    }
}
