//! Stage one: corpus-level aspect vocabulary induction.
//!
//! The corpus is subsampled into partitions; each partition's reviews are
//! packed into batches, condensed into abstracts, and the abstracts are
//! distilled into a per-partition aspect list. A candidate's frequency is
//! the number of partitions that list it, so it measures cross-sample
//! consensus, not raw mention counts. Candidates are then clustered by
//! embedding similarity and each cluster elects one representative; the
//! representatives, ordered by cluster weight, are the vocabulary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ratio_subset, subsample_partitions, Corpus, CorpusError};
use crate::embedding::{EmbedError, EmbeddingProvider, Vector};
use crate::extraction::CallOptions;
use crate::gateway::{
    complete, parse_aspect_list, render_abstract_prompts, render_aspect_prompt, CompletionBackend,
    CompletionRequest, GatewayError, PromptTemplates,
};
use crate::numeric::Real;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("invalid vocabulary parameters: {0}")]
    InvalidParams(String),
    #[error("partition {index}: {source}")]
    Partition { index: usize, source: GatewayError },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("embedding \"{aspect}\" failed: {source}")]
    Embed { aspect: String, source: EmbedError },
    #[error("no candidate aspects were extracted")]
    NoCandidates,
    #[error("cluster target must be at least 1")]
    InvalidTarget,
    #[error("cluster has no members")]
    EmptyCluster,
    #[error("aspect \"{aspect}\" has no recorded frequency")]
    MissingFrequency { aspect: String },
    #[error("vocabulary artifact at {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
}

/// Candidate aspects with partition-presence counts. `count(a)` is how many
/// partitions listed `a`, so it ranges from 1 to the partition count.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AspectCandidateSet {
    counts: BTreeMap<String, u64>,
}

impl AspectCandidateSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: BTreeMap<String, u64>) -> Self {
        Self { counts }
    }

    /// Records one partition's deduplicated aspect list.
    pub fn record_partition(&mut self, aspects: &[String]) {
        for aspect in aspects {
            *self.counts.entry(aspect.clone()).or_insert(0) += 1;
        }
    }

    pub fn count(&self, aspect: &str) -> Option<u64> {
        self.counts.get(aspect).copied()
    }

    /// Candidates in lexicographic order with their counts.
    pub fn iter(&self) -> impl Iterator<Item = (&String, u64)> {
        self.counts.iter().map(|(name, count)| (name, *count))
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Stage-one parameters. Serialized with the compact artifact key names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VocabParams {
    /// Fraction of the corpus sampled before partitioning, in (0, 1].
    #[serde(rename = "p")]
    pub ratio: f64,
    /// Number of independent partitions drawn from the sample.
    #[serde(rename = "K")]
    pub partitions: usize,
    /// Cluster count the candidate set is reduced to.
    #[serde(rename = "C")]
    pub clusters: usize,
    pub seed: u64,
}

impl VocabParams {
    pub fn validate(&self) -> Result<(), VocabError> {
        if !self.ratio.is_finite() || self.ratio <= 0.0 || self.ratio > 1.0 {
            return Err(VocabError::InvalidParams(format!(
                "ratio {} outside (0, 1]",
                self.ratio
            )));
        }
        if self.partitions == 0 {
            return Err(VocabError::InvalidParams("partitions must be >= 1".into()));
        }
        if self.clusters == 0 {
            return Err(VocabError::InvalidParams("clusters must be >= 1".into()));
        }
        Ok(())
    }
}

/// One vocabulary cluster as stored in the artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub representative: String,
    pub members: Vec<String>,
    /// Total partition-presence count over the members.
    pub freq: u64,
}

/// The induced aspect vocabulary. `aspects` lists cluster representatives
/// ordered by descending cluster frequency, ties broken lexicographically;
/// that order is the canonical listing order everywhere downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectVocabulary {
    aspects: Vec<String>,
    clusters: Vec<ClusterInfo>,
    params: VocabParams,
    corpus_hash: String,
}

impl AspectVocabulary {
    pub fn new(
        clusters: Vec<ClusterInfo>,
        params: VocabParams,
        corpus_hash: String,
    ) -> Result<Self, VocabError> {
        if clusters.is_empty() {
            return Err(VocabError::InvalidParams("no clusters".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for cluster in &clusters {
            if cluster.members.is_empty() {
                return Err(VocabError::EmptyCluster);
            }
            if !cluster.members.contains(&cluster.representative) {
                return Err(VocabError::InvalidParams(format!(
                    "representative \"{}\" is not a member of its cluster",
                    cluster.representative
                )));
            }
            if !seen.insert(cluster.representative.clone()) {
                return Err(VocabError::InvalidParams(format!(
                    "duplicate representative \"{}\"",
                    cluster.representative
                )));
            }
        }
        let aspects = clusters.iter().map(|c| c.representative.clone()).collect();
        Ok(Self {
            aspects,
            clusters,
            params,
            corpus_hash,
        })
    }

    /// Hand-pinned vocabulary of singleton clusters, in the given order.
    /// Useful for fixtures and scripted runs that skip stage one.
    pub fn fixed(aspects: &[&str]) -> Self {
        let clusters: Vec<ClusterInfo> = aspects
            .iter()
            .map(|a| ClusterInfo {
                representative: (*a).to_string(),
                members: vec![(*a).to_string()],
                freq: 1,
            })
            .collect();
        Self {
            aspects: aspects.iter().map(|a| a.to_string()).collect(),
            clusters,
            params: VocabParams {
                ratio: 1.0,
                partitions: 1,
                clusters: aspects.len(),
                seed: 0,
            },
            corpus_hash: "fixed".into(),
        }
    }

    pub fn aspects(&self) -> &[String] {
        &self.aspects
    }

    pub fn clusters(&self) -> &[ClusterInfo] {
        &self.clusters
    }

    pub fn params(&self) -> &VocabParams {
        &self.params
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn len(&self) -> usize {
        self.aspects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aspects.is_empty()
    }

    pub fn contains(&self, aspect: &str) -> bool {
        self.aspects.iter().any(|a| a == aspect)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), VocabError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("vocabulary serializes");
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|err| VocabError::Artifact {
            path: path.to_path_buf(),
            reason: err.to_string(),
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self, VocabError> {
        let bytes = std::fs::read(path).map_err(|err| VocabError::Artifact {
            path: path.to_path_buf(),
            reason: err.to_string(),
        })?;
        let vocab: Self = serde_json::from_slice(&bytes).map_err(|err| VocabError::Artifact {
            path: path.to_path_buf(),
            reason: err.to_string(),
        })?;
        if vocab.aspects
            != vocab
                .clusters
                .iter()
                .map(|c| c.representative.clone())
                .collect::<Vec<_>>()
        {
            return Err(VocabError::Artifact {
                path: path.to_path_buf(),
                reason: "aspects do not match cluster representatives".into(),
            });
        }
        Ok(vocab)
    }
}

/// Runs the abstraction and aspect-listing calls for every partition and
/// tallies partition-presence counts. Returned warnings describe review
/// truncation during batching, tagged with their partition.
pub fn extract_candidate_aspects(
    partitions: &[Corpus],
    templates: &PromptTemplates,
    backend: &dyn CompletionBackend,
    call: &CallOptions,
    token_budget: usize,
) -> Result<(AspectCandidateSet, Vec<String>), VocabError> {
    let mut candidates = AspectCandidateSet::new();
    let mut warnings = Vec::new();
    for (index, partition) in partitions.iter().enumerate() {
        let wrap = |source: GatewayError| VocabError::Partition { index, source };
        let reviews: Vec<String> = partition
            .interactions()
            .iter()
            .map(|x| x.review.clone())
            .collect();
        let (bundles, batch_warnings) =
            render_abstract_prompts(templates, &reviews, token_budget).map_err(wrap)?;
        for warning in batch_warnings {
            warnings.push(format!(
                "partition {index} review {}: {}",
                warning.review_index, warning.message
            ));
        }
        let mut abstracts = Vec::with_capacity(bundles.len());
        for bundle in bundles {
            let request = CompletionRequest {
                bundle,
                model_id: call.model_id.clone(),
                temperature: call.temperature,
                max_tokens: call.max_tokens,
            };
            let raw = complete(backend, &request).map_err(wrap)?;
            abstracts.push(raw.trim().to_string());
        }
        let bundle = render_aspect_prompt(templates, &abstracts).map_err(wrap)?;
        let request = CompletionRequest {
            bundle,
            model_id: call.model_id.clone(),
            temperature: call.temperature,
            max_tokens: call.max_tokens,
        };
        let raw = complete(backend, &request).map_err(wrap)?;
        let aspects = parse_aspect_list(&raw).map_err(wrap)?;
        candidates.record_partition(&aspects);
    }
    Ok((candidates, warnings))
}

/// One cluster of candidate aspects, members in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct AspectCluster {
    pub members: Vec<String>,
}

/// Average-linkage agglomerative clustering over cosine distance, merged
/// down to `min(target, n)` clusters.
///
/// The procedure is fully deterministic, which is why it takes no seed:
/// candidates enter in lexicographic order, pair distances are averaged in
/// fixed index order, and exact distance ties merge the lexicographically
/// smallest pair. Returned clusters are ordered by their smallest member.
pub fn cluster_aspects<F: Real, P: EmbeddingProvider<F> + ?Sized>(
    candidates: &AspectCandidateSet,
    provider: &P,
    target: usize,
) -> Result<Vec<AspectCluster>, VocabError> {
    if target == 0 {
        return Err(VocabError::InvalidTarget);
    }
    let names: Vec<&String> = candidates.iter().map(|(name, _)| name).collect();
    let n = names.len();
    if n == 0 {
        return Err(VocabError::NoCandidates);
    }
    let mut unit: Vec<Vector<F>> = Vec::with_capacity(n);
    for name in &names {
        let vector = provider
            .embed(name)
            .and_then(|v| v.normalized())
            .map_err(|source| VocabError::Embed {
                aspect: (*name).clone(),
                source,
            })?;
        unit.push(vector);
    }
    let mut dist = vec![vec![F::zero(); n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = F::one() - unit[i].dot(&unit[j]).expect("uniform dims");
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }

    // Clusters hold ascending member indices; index order equals lex order
    // because names are sorted, so members[0] doubles as the tie-break key.
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let stop = target.min(n);
    while clusters.len() > stop {
        let mut best: Option<(F, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut sum = F::zero();
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        sum += dist[i][j];
                    }
                }
                let pairs = clusters[a].len() * clusters[b].len();
                let avg = sum / F::from_usize_lossy(pairs);
                let pair = if clusters[a][0] < clusters[b][0] {
                    (clusters[a][0], clusters[b][0])
                } else {
                    (clusters[b][0], clusters[a][0])
                };
                let better = match &best {
                    None => true,
                    Some((best_avg, best_pair, _, _)) => {
                        avg < *best_avg || (avg == *best_avg && pair < *best_pair)
                    }
                };
                if better {
                    best = Some((avg, pair, a, b));
                }
            }
        }
        let (_, _, a, b) = best.expect("two clusters remain");
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
        clusters[a].sort_unstable();
    }
    clusters.sort_by_key(|members| members[0]);
    Ok(clusters
        .into_iter()
        .map(|members| AspectCluster {
            members: members.into_iter().map(|i| names[i].clone()).collect(),
        })
        .collect())
}

/// Elects the member that maximizes frequency-weighted similarity to its
/// cluster: score(a) = sum over members m of (freq(m)/total) * cos(a, m).
///
/// Frequency weights are integer ratios, so uniformly scaling all counts
/// cannot change the scores or the winner. Exact score ties fall back to
/// higher frequency, then lexicographic order. Singleton clusters return
/// their member without touching the embedding provider.
pub fn select_representative<F: Real, P: EmbeddingProvider<F> + ?Sized>(
    cluster: &AspectCluster,
    candidates: &AspectCandidateSet,
    provider: &P,
) -> Result<String, VocabError> {
    let members = &cluster.members;
    if members.is_empty() {
        return Err(VocabError::EmptyCluster);
    }
    if members.len() == 1 {
        return Ok(members[0].clone());
    }
    let freqs: Vec<u64> = members
        .iter()
        .map(|m| {
            candidates
                .count(m)
                .ok_or_else(|| VocabError::MissingFrequency { aspect: m.clone() })
        })
        .collect::<Result<_, _>>()?;
    let total: u64 = freqs.iter().sum();
    let mut unit: Vec<Vector<F>> = Vec::with_capacity(members.len());
    for member in members {
        let vector = provider
            .embed(member)
            .and_then(|v| v.normalized())
            .map_err(|source| VocabError::Embed {
                aspect: member.clone(),
                source,
            })?;
        unit.push(vector);
    }
    let mut best: Option<(F, u64, usize)> = None;
    for i in 0..members.len() {
        let mut score = F::zero();
        for j in 0..members.len() {
            // The f64 division is exactly rounded from integer operands, so
            // freq scaling by any common factor reproduces the same weight.
            let weight = F::from_f64_lossy(freqs[j] as f64 / total as f64);
            score += weight * unit[i].dot(&unit[j]).expect("uniform dims");
        }
        let better = match &best {
            None => true,
            Some((best_score, best_freq, best_idx)) => {
                score > *best_score
                    || (score == *best_score
                        && (freqs[i] > *best_freq
                            || (freqs[i] == *best_freq && members[i] < members[*best_idx])))
            }
        };
        if better {
            best = Some((score, freqs[i], i));
        }
    }
    let (_, _, index) = best.expect("cluster non-empty");
    Ok(members[index].clone())
}

/// Full stage one: sample, partition, extract candidates, cluster, elect
/// representatives, and order the vocabulary by cluster weight.
pub fn build_vocabulary<F: Real, P: EmbeddingProvider<F> + ?Sized>(
    corpus: &Corpus,
    params: VocabParams,
    templates: &PromptTemplates,
    backend: &dyn CompletionBackend,
    provider: &P,
    call: &CallOptions,
    token_budget: usize,
) -> Result<AspectVocabulary, VocabError> {
    params.validate()?;
    let subset = ratio_subset(corpus, params.ratio, params.seed)?;
    let partitions = subsample_partitions(&subset, params.partitions, params.seed)?;
    let (candidates, warnings) =
        extract_candidate_aspects(&partitions, templates, backend, call, token_budget)?;
    for warning in &warnings {
        log::warn!("stage one: {warning}");
    }
    if candidates.is_empty() {
        return Err(VocabError::NoCandidates);
    }
    let clusters = cluster_aspects(&candidates, provider, params.clusters)?;
    let mut infos = Vec::with_capacity(clusters.len());
    for cluster in &clusters {
        let representative = select_representative(cluster, &candidates, provider)?;
        let freq = cluster
            .members
            .iter()
            .map(|m| candidates.count(m).unwrap_or(0))
            .sum();
        infos.push(ClusterInfo {
            representative,
            members: cluster.members.clone(),
            freq,
        });
    }
    infos.sort_by(|a, b| {
        b.freq
            .cmp(&a.freq)
            .then_with(|| a.representative.cmp(&b.representative))
    });
    AspectVocabulary::new(infos, params, corpus.id().to_string())
}

/// Fraction of shared aspects among the two vocabularies' top slices. The
/// slice length is `top_n` clamped to both lists.
pub fn vocab_overlap(
    a: &AspectVocabulary,
    b: &AspectVocabulary,
    top_n: usize,
) -> Result<f64, VocabError> {
    let effective = top_n.min(a.len()).min(b.len());
    if effective == 0 {
        return Err(VocabError::InvalidTarget);
    }
    let top_a: std::collections::HashSet<&String> = a.aspects[..effective].iter().collect();
    let shared = b.aspects[..effective]
        .iter()
        .filter(|aspect| top_a.contains(aspect))
        .count();
    Ok(shared as f64 / effective as f64)
}
