//! Synthetic review world with planted ground truth.
//!
//! Every generated review embeds its opinion phrases verbatim, so a
//! faithful extractor scores perfect opinion fidelity and the planted
//! triples are the exact answer key. Aspect mentions follow a Zipf law
//! over aspect groups, each group exposing a canonical name plus spelling
//! variants; ratings are a linear function of realized triple sentiment
//! plus Gaussian noise, so the aspect channel carries real signal for the
//! rating predictor.
//!
//! The module also scripts both pipeline stages: keyed responses that make
//! a scripted backend behave as a perfect (or deliberately corrupted)
//! model over this world. Corruption knobs: `drift_q` replaces an aspect
//! with an off-vocabulary name with that probability; `paraphrase_level`
//! rewrites the first N table-covered opinion words through a fixed
//! synonym table whose replacements never occur in any generated review.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ratio_subset, subsample_partitions, Corpus, CorpusError, Interaction,
    InteractionKey, RATING_MAX, RATING_MIN};
use crate::extraction::{Sentiment, Triple};
use crate::gateway::{
    aspect_script_key, dynamic_script_key, render_abstract_prompts, serialize_triples,
    GatewayError, PromptKind, PromptTemplates, ScriptEntry,
};
use crate::hashing::derive_seed;
use crate::vocab::{AspectVocabulary, ClusterInfo, VocabError, VocabParams};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("conflicting scripted responses for one prompt key")]
    ScriptConflict,
}

/// One aspect family: a canonical name, spelling variants that share
/// character n-grams with it, and opinion phrase pools per sentiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectGroup {
    pub canonical: String,
    pub synonyms: Vec<String>,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

/// Parameters of the synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub aspect_groups: Vec<AspectGroup>,
    /// Zipf exponent over aspect group ranks.
    pub zipf_s: f64,
    /// Probability a mention uses the canonical name rather than a variant.
    pub canonical_prob: f64,
    /// Probability a sentiment flips against the user's preference.
    pub flip_prob: f64,
    pub rating_slope: f64,
    pub rating_noise_sd: f64,
    /// Triples per interaction are drawn from 1..=max_triples.
    pub max_triples: usize,
    /// Filler sentences per review are drawn from 0..=filler_max.
    pub filler_max: usize,
    /// Probability of appending the long ramble (pushes the review into
    /// the extra-long stratum).
    pub ramble_prob: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            n_users: 100,
            n_items: 80,
            n_interactions: 1000,
            aspect_groups: default_aspect_groups(),
            zipf_s: 0.8,
            canonical_prob: 0.7,
            flip_prob: 0.1,
            rating_slope: 0.7,
            rating_noise_sd: 0.5,
            max_triples: 3,
            filler_max: 3,
            ramble_prob: 0.05,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_users == 0 || self.n_items == 0 || self.n_interactions == 0 {
            return Err(SynthError::InvalidSpec(
                "users, items and interactions must all be positive".into(),
            ));
        }
        if self.aspect_groups.is_empty() {
            return Err(SynthError::InvalidSpec("no aspect groups".into()));
        }
        if self.max_triples == 0 || self.max_triples > self.aspect_groups.len() {
            return Err(SynthError::InvalidSpec(format!(
                "max_triples {} outside 1..={}",
                self.max_triples,
                self.aspect_groups.len()
            )));
        }
        for p in [self.canonical_prob, self.flip_prob, self.ramble_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::InvalidSpec(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
        }
        if self.zipf_s < 0.0 || !self.zipf_s.is_finite() {
            return Err(SynthError::InvalidSpec("zipf_s must be >= 0".into()));
        }
        if self.rating_noise_sd < 0.0 || !self.rating_noise_sd.is_finite() {
            return Err(SynthError::InvalidSpec("noise sd must be >= 0".into()));
        }
        if !self.rating_slope.is_finite() {
            return Err(SynthError::InvalidSpec("rating slope must be finite".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for group in &self.aspect_groups {
            if group.canonical.is_empty() || !seen.insert(group.canonical.clone()) {
                return Err(SynthError::InvalidSpec(format!(
                    "canonical \"{}\" empty or duplicated",
                    group.canonical
                )));
            }
            if group.positive.is_empty() || group.negative.is_empty() {
                return Err(SynthError::InvalidSpec(format!(
                    "group \"{}\" needs opinion phrases for both sentiments",
                    group.canonical
                )));
            }
            for phrase in group.positive.iter().chain(&group.negative) {
                if paraphrase_coverage(phrase) < 4 {
                    return Err(SynthError::InvalidSpec(format!(
                        "opinion \"{phrase}\" has fewer than 4 paraphrasable words"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Word substitutions used to corrupt opinions. Replacement words are
/// reserved: no review frame, filler, opinion pool or aspect name uses
/// them, so a substituted opinion can never match the review verbatim.
pub const PARAPHRASE_TABLE: &[(&str, &str)] = &[
    ("absolutely", "utterly"),
    ("disappointing", "underwhelming"),
    ("flimsy", "fragile"),
    ("great", "superb"),
    ("impressive", "striking"),
    ("noisy", "clamorous"),
    ("pleasant", "agreeable"),
    ("poor", "subpar"),
    ("quite", "thoroughly"),
    ("really", "remarkably"),
    ("reliable", "dependable"),
    ("sluggish", "lethargic"),
    ("smooth", "seamless"),
    ("solid", "robust"),
    ("terrible", "dreadful"),
    ("annoying", "irksome"),
    ("truly", "genuinely"),
    ("very", "exceedingly"),
    ("weak", "feeble"),
];

fn substitute(word: &str) -> Option<&'static str> {
    PARAPHRASE_TABLE
        .iter()
        .find(|(from, _)| *from == word)
        .map(|(_, to)| *to)
}

/// How many words of the phrase the table can rewrite.
pub fn paraphrase_coverage(phrase: &str) -> usize {
    phrase
        .split_whitespace()
        .filter(|w| substitute(w).is_some())
        .count()
}

/// Rewrites the first `level` table-covered words, left to right. Level 0
/// returns the phrase unchanged; levels beyond the coverage saturate.
pub fn paraphrase(phrase: &str, level: usize) -> String {
    let mut replaced = 0usize;
    phrase
        .split_whitespace()
        .map(|word| {
            if replaced < level {
                if let Some(to) = substitute(word) {
                    replaced += 1;
                    return to;
                }
            }
            word
        })
        .collect::<Vec<_>>()
        .join(" ")
}

const POSITIVE_OPINIONS: &[&str] = &[
    "truly great and very reliable",
    "really solid and quite impressive",
    "absolutely pleasant and truly smooth",
    "very impressive and really great",
    "quite reliable and absolutely solid",
];

const NEGATIVE_OPINIONS: &[&str] = &[
    "truly poor and very disappointing",
    "really weak and quite flimsy",
    "absolutely terrible and truly annoying",
    "very sluggish and really noisy",
    "quite disappointing and absolutely weak",
];

/// Fifteen aspect families whose variants share character trigrams with
/// their canonical but not with other families.
pub fn default_aspect_groups() -> Vec<AspectGroup> {
    let families: &[(&str, &[&str])] = &[
        ("price", &["prices", "pricing"]),
        ("battery", &["batteries"]),
        ("sound", &["sounds", "soundstage"]),
        ("screen", &["screens"]),
        ("keyboard", &["keyboards"]),
        ("shipping", &["shipment"]),
        ("packaging", &["packing"]),
        ("warranty", &["warranties"]),
        ("design", &["designs"]),
        ("camera", &["cameras"]),
        ("speaker", &["speakers"]),
        ("charger", &["chargers"]),
        ("cable", &["cables"]),
        ("manual", &["manuals"]),
        ("button", &["buttons"]),
    ];
    families
        .iter()
        .map(|(canonical, synonyms)| AspectGroup {
            canonical: (*canonical).to_string(),
            synonyms: synonyms.iter().map(|s| (*s).to_string()).collect(),
            positive: POSITIVE_OPINIONS.iter().map(|s| (*s).to_string()).collect(),
            negative: NEGATIVE_OPINIONS.iter().map(|s| (*s).to_string()).collect(),
        })
        .collect()
}

const FRAMES: &[&str] = &[
    "The {s} is {o}.",
    "I found the {s} {o}.",
    "Overall the {s} came across as {o}.",
    "Its {s} proved {o}.",
];

const FILLERS: &[&str] = &[
    "Bought this during a weekend sale.",
    "My cousin recommended this brand to me.",
    "Setup took about ten minutes.",
    "The unit came in a plain brown box.",
    "I registered the product online yesterday.",
    "Delivery happened while it rained.",
    "This replaces an older model I owned.",
];

const RAMBLE: &[&str] = &[
    "I could write a much longer story about this purchase because the entire process turned into a family discussion.",
    "We compared at least six options over two weekends before settling on this one.",
    "My notes from that comparison filled three pages of a small notebook.",
    "Everyone in the house had an opinion on the matter and shared it loudly.",
    "In the end the decision came down to a coin flip and a lengthy phone call with my brother.",
    "He still brings it up whenever we talk about gadgets at dinner.",
    "The checkout process itself went fine once I remembered my password.",
    "A neighbor later asked me to send a link so she could order one too.",
    "None of that matters for the product itself but it explains why I remember the date so well.",
];

/// One planted triple: the family it came from, the surface form the
/// review used, and the verbatim opinion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueTriple {
    pub canonical: String,
    pub surface: String,
    pub opinion: String,
    pub sentiment: Sentiment,
}

/// The answer key for one interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub review: String,
    pub triples: Vec<TrueTriple>,
}

impl TrueInteraction {
    pub fn key(&self) -> InteractionKey {
        InteractionKey {
            timestamp: self.timestamp,
            user_id: self.user_id.clone(),
            item_id: self.item_id.clone(),
        }
    }
}

/// Planted truth for a generated corpus, aligned with its chronological
/// interaction order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub interactions: Vec<TrueInteraction>,
}

/// Cumulative inverse-CDF sampler over ranks 1..=n with P(r) proportional
/// to r^-s. Hand-rolled so the exact probabilities are available for
/// goodness-of-fit checks.
struct ZipfRanks {
    cumulative: Vec<f64>,
}

impl ZipfRanks {
    fn new(n: usize, s: f64) -> Self {
        let weights: Vec<f64> = (1..=n).map(|r| (r as f64).powf(-s)).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect();
        Self { cumulative }
    }

    /// Probability of rank index `idx` (zero-based).
    #[cfg(test)]
    fn prob(&self, idx: usize) -> f64 {
        let prev = if idx == 0 {
            0.0
        } else {
            self.cumulative[idx - 1]
        };
        self.cumulative[idx] - prev
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> usize {
        let u: f64 = rng.gen();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cumulative.len() - 1)
    }
}

fn user_preferences(spec: &WorldSpec, user_idx: usize) -> Vec<i8> {
    let mut rng = ChaCha12Rng::from_seed(derive_seed(
        "synth-user",
        &[&spec.seed.to_le_bytes(), &user_idx.to_le_bytes()],
    ));
    (0..spec.aspect_groups.len())
        .map(|_| if rng.gen::<bool>() { 1 } else { -1 })
        .collect()
}

/// Generates the corpus and its answer key. Interactions are strictly
/// chronological, reviews are unique (each ends with a per-interaction
/// reference token), and every opinion phrase occurs verbatim in its
/// review. Per-interaction randomness is derived independently from the
/// seed and index, so the draw order within one interaction is fixed.
pub fn generate_corpus(spec: &WorldSpec) -> Result<(Corpus, GroundTruth), SynthError> {
    spec.validate()?;
    let zipf = ZipfRanks::new(spec.aspect_groups.len(), spec.zipf_s);
    let prefs: Vec<Vec<i8>> = (0..spec.n_users)
        .map(|u| user_preferences(spec, u))
        .collect();
    let base_ts: i64 = 1_600_000_000;
    let mut interactions = Vec::with_capacity(spec.n_interactions);
    let mut truths = Vec::with_capacity(spec.n_interactions);
    for i in 0..spec.n_interactions {
        let mut rng = ChaCha12Rng::from_seed(derive_seed(
            "synth-interaction",
            &[&spec.seed.to_le_bytes(), &i.to_le_bytes()],
        ));
        let user_idx = rng.gen_range(0..spec.n_users);
        let item_idx = rng.gen_range(0..spec.n_items);
        let jitter: i64 = rng.gen_range(0..3600);
        let timestamp = base_ts + (i as i64) * 3600 + jitter;
        let user_id = format!("u{user_idx:04}");
        let item_id = format!("it{item_idx:04}");

        let n_triples = rng.gen_range(1..=spec.max_triples);
        let mut groups: Vec<usize> = Vec::with_capacity(n_triples);
        while groups.len() < n_triples {
            let mut drawn = None;
            for _ in 0..64 {
                let g = zipf.sample(&mut rng);
                if !groups.contains(&g) {
                    drawn = Some(g);
                    break;
                }
            }
            // Exhausted redraws: take the first rank not yet used.
            let g = drawn.unwrap_or_else(|| {
                (0..spec.aspect_groups.len())
                    .find(|g| !groups.contains(g))
                    .expect("max_triples <= group count")
            });
            groups.push(g);
        }

        let mut sentences = Vec::new();
        let mut triples = Vec::with_capacity(n_triples);
        let mut signed_sum = 0i64;
        for &g in &groups {
            let group = &spec.aspect_groups[g];
            let surface = if group.synonyms.is_empty() || rng.gen::<f64>() < spec.canonical_prob
            {
                group.canonical.clone()
            } else {
                group.synonyms[rng.gen_range(0..group.synonyms.len())].clone()
            };
            let mut leaning = prefs[user_idx][g];
            if rng.gen::<f64>() < spec.flip_prob {
                leaning = -leaning;
            }
            let sentiment = if leaning > 0 {
                Sentiment::Positive
            } else {
                Sentiment::Negative
            };
            let pool = match sentiment {
                Sentiment::Positive => &group.positive,
                _ => &group.negative,
            };
            let opinion = pool[rng.gen_range(0..pool.len())].clone();
            let frame = FRAMES[rng.gen_range(0..FRAMES.len())];
            sentences.push(frame.replace("{s}", &surface).replace("{o}", &opinion));
            signed_sum += leaning as i64;
            triples.push(TrueTriple {
                canonical: group.canonical.clone(),
                surface,
                opinion,
                sentiment,
            });
        }
        for _ in 0..rng.gen_range(0..=spec.filler_max) {
            sentences.push(FILLERS[rng.gen_range(0..FILLERS.len())].to_string());
        }
        if rng.gen::<f64>() < spec.ramble_prob {
            sentences.push(RAMBLE.join(" "));
        }
        sentences.push(format!("Ref {user_id}-{item_id}-{timestamp}."));
        let review = sentences.join(" ");

        let noise = if spec.rating_noise_sd > 0.0 {
            Normal::new(0.0, spec.rating_noise_sd)
                .expect("validated sd")
                .sample(&mut rng)
        } else {
            0.0
        };
        let rating = (3.0 + spec.rating_slope * signed_sum as f64 + noise)
            .clamp(RATING_MIN, RATING_MAX);

        interactions.push(Interaction {
            user_id: user_id.clone(),
            item_id: item_id.clone(),
            rating,
            review: review.clone(),
            timestamp,
        });
        truths.push(TrueInteraction {
            user_id,
            item_id,
            timestamp,
            review,
            triples,
        });
    }
    let corpus = Corpus::new(interactions)?;
    debug_assert!(corpus.is_chronological());
    Ok((
        corpus,
        GroundTruth {
            seed: spec.seed,
            interactions: truths,
        },
    ))
}

/// The planted vocabulary: canonical names ordered by descending mention
/// count then lexicographically, each cluster carrying the family's
/// variants as members.
pub fn canonical_vocabulary(
    spec: &WorldSpec,
    truth: &GroundTruth,
    corpus_hash: &str,
) -> Result<AspectVocabulary, SynthError> {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for interaction in &truth.interactions {
        for triple in &interaction.triples {
            *counts.entry(triple.canonical.as_str()).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(SynthError::InvalidSpec("truth has no mentions".into()));
    }
    let mut clusters: Vec<ClusterInfo> = spec
        .aspect_groups
        .iter()
        .filter_map(|group| {
            counts.get(group.canonical.as_str()).map(|&freq| {
                let mut members = vec![group.canonical.clone()];
                members.extend(group.synonyms.iter().cloned());
                members.sort();
                ClusterInfo {
                    representative: group.canonical.clone(),
                    members,
                    freq,
                }
            })
        })
        .collect();
    clusters.sort_by(|a, b| {
        b.freq
            .cmp(&a.freq)
            .then_with(|| a.representative.cmp(&b.representative))
    });
    let n = clusters.len();
    AspectVocabulary::new(
        clusters,
        VocabParams {
            ratio: 1.0,
            partitions: 1,
            clusters: n,
            seed: truth.seed,
        },
        corpus_hash.to_string(),
    )
    .map_err(|err| SynthError::InvalidSpec(err.to_string()))
}

/// Maps a mention onto the vocabulary the way a constrained extractor
/// would: the cluster containing the surface form wins, falling back to
/// any cluster containing a family sibling. A mention whose family is
/// absent from the vocabulary is dropped, which is the honest behavior of
/// an extractor told to use only the listed aspects.
fn map_to_vocabulary<'v>(
    vocab: &'v AspectVocabulary,
    surface: &str,
    canonical: &str,
    siblings: &[String],
) -> Option<&'v str> {
    let find = |name: &str| {
        vocab
            .clusters()
            .iter()
            .find(|c| c.members.iter().any(|m| m == name))
            .map(|c| c.representative.as_str())
    };
    find(surface)
        .or_else(|| find(canonical))
        .or_else(|| siblings.iter().find_map(|s| find(s)))
}

/// Scripts the per-review extraction responses of a vocabulary-constrained
/// model over this world. A faithful run (`drift_q` 0, level 0) returns
/// the planted triples with each mention mapped onto the given
/// vocabulary's representative for its family. Corruption draws are
/// derived per interaction from the seed, both knobs and the interaction
/// key, so each (drift_q, level) pair is an independent but reproducible
/// corruption of the same world. Keys incorporate the vocabulary, so
/// scripts for different vocabularies coexist in one file.
pub fn script_extraction_responses(
    spec: &WorldSpec,
    truth: &GroundTruth,
    vocab: &AspectVocabulary,
    drift_q: f64,
    paraphrase_level: usize,
    seed: u64,
) -> Vec<ScriptEntry> {
    let siblings: BTreeMap<&str, &[String]> = spec
        .aspect_groups
        .iter()
        .map(|g| (g.canonical.as_str(), g.synonyms.as_slice()))
        .collect();
    truth
        .interactions
        .iter()
        .map(|interaction| {
            let mut rng = ChaCha12Rng::from_seed(derive_seed(
                "synth-extract",
                &[
                    &seed.to_le_bytes(),
                    &drift_q.to_bits().to_le_bytes(),
                    &paraphrase_level.to_le_bytes(),
                    interaction.user_id.as_bytes(),
                    interaction.item_id.as_bytes(),
                    &interaction.timestamp.to_le_bytes(),
                ],
            ));
            let triples: Vec<Triple> = interaction
                .triples
                .iter()
                .filter_map(|t| {
                    // Draw before mapping so the drift pattern for a given
                    // (seed, q, level) does not depend on the vocabulary.
                    let drifts = drift_q > 0.0 && rng.gen::<f64>() < drift_q;
                    let offtopic = rng.gen_range(0..10_000);
                    let aspect = if drifts {
                        format!("offtopic-{offtopic}")
                    } else {
                        map_to_vocabulary(
                            vocab,
                            &t.surface,
                            &t.canonical,
                            siblings.get(t.canonical.as_str()).copied().unwrap_or(&[]),
                        )?
                        .to_string()
                    };
                    Some(Triple {
                        aspect,
                        opinion: paraphrase(&t.opinion, paraphrase_level),
                        sentiment: t.sentiment,
                    })
                })
                .collect();
            ScriptEntry {
                kind: PromptKind::Dynamic,
                key: dynamic_script_key(vocab.aspects(), &interaction.review),
                response: serialize_triples(&triples),
            }
        })
        .collect()
}

/// Scripts the abstraction and aspect-listing calls for vocabulary
/// induction at each sampling ratio. Abstract responses are derived from
/// the batch key alone; each partition's aspect reply lists the surface
/// forms its reviews mention, in first-appearance order. Entries are
/// deduplicated, with agreement verified, because overlapping partitions
/// repeat prompts.
pub fn script_stage1_responses(
    corpus: &Corpus,
    truth: &GroundTruth,
    templates: &PromptTemplates,
    ratios: &[f64],
    partitions: usize,
    seed: u64,
    token_budget: usize,
) -> Result<Vec<ScriptEntry>, SynthError> {
    let mut surfaces_by_review: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for interaction in &truth.interactions {
        let mut seen = std::collections::HashSet::new();
        let surfaces = interaction
            .triples
            .iter()
            .map(|t| t.surface.as_str())
            .filter(|s| seen.insert(*s))
            .collect();
        surfaces_by_review.insert(interaction.review.as_str(), surfaces);
    }

    let mut responses: BTreeMap<(PromptKind, String), String> = BTreeMap::new();
    let mut put = |kind: PromptKind, key: String, response: String| -> Result<(), SynthError> {
        match responses.get(&(kind, key.clone())) {
            Some(existing) if *existing != response => Err(SynthError::ScriptConflict),
            Some(_) => Ok(()),
            None => {
                responses.insert((kind, key), response);
                Ok(())
            }
        }
    };

    for &ratio in ratios {
        let subset = ratio_subset(corpus, ratio, seed)?;
        let parts = subsample_partitions(&subset, partitions, seed)?;
        for part in &parts {
            let reviews: Vec<String> = part
                .interactions()
                .iter()
                .map(|x| x.review.clone())
                .collect();
            let (bundles, _) = render_abstract_prompts(templates, &reviews, token_budget)?;
            let mut abstracts = Vec::with_capacity(bundles.len());
            for bundle in &bundles {
                let response =
                    format!("Condensed review notes ({}).", &bundle.script_key[..16]);
                put(PromptKind::Abstract, bundle.script_key.clone(), response.clone())?;
                abstracts.push(response);
            }
            let mut seen = std::collections::HashSet::new();
            let mut listed: Vec<&str> = Vec::new();
            for interaction in part.interactions() {
                for surface in &surfaces_by_review[interaction.review.as_str()] {
                    if seen.insert(*surface) {
                        listed.push(surface);
                    }
                }
            }
            let response = serde_json::to_string(&listed).expect("list serializes");
            put(PromptKind::Aspect, aspect_script_key(&abstracts), response)?;
        }
    }
    // Recompute abstract keys before aspect keys ordering does not matter
    // for the backend; emit in map order for stable files.
    Ok(responses
        .into_iter()
        .map(|((kind, key), response)| ScriptEntry {
            kind,
            key,
            response,
        })
        .collect())
}

/// What a scripted end-to-end run will ask of the backend: vocabulary
/// induction at each of `ratios`, then constrained extraction over the
/// whole corpus under each induced vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptPlan {
    /// Stage-one sampling ratios to cover, each in (0, 1].
    pub ratios: Vec<f64>,
    pub partitions: usize,
    pub clusters: usize,
    pub seed: u64,
    pub token_budget: usize,
    pub call: crate::extraction::CallOptions,
    pub drift_q: f64,
    pub paraphrase_level: usize,
}

/// Scripts every backend call of a full pipeline run. Dynamic keys depend
/// on the induced vocabulary, so this induces the vocabulary per ratio the
/// same way the run will (scripted stage one plus `provider`) and keys the
/// extraction responses against it. Ratios that induce the same vocabulary
/// share entries; disagreement on a shared key is an error.
pub fn script_pipeline_responses<F, P>(
    spec: &WorldSpec,
    corpus: &Corpus,
    truth: &GroundTruth,
    templates: &PromptTemplates,
    provider: &P,
    plan: &ScriptPlan,
) -> Result<Vec<ScriptEntry>, SynthError>
where
    F: crate::numeric::Real,
    P: crate::embedding::EmbeddingProvider<F> + ?Sized,
{
    if plan.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
        return Err(SynthError::InvalidSpec(
            "script plan ratios must lie in (0, 1]".into(),
        ));
    }
    let stage1 = script_stage1_responses(
        corpus,
        truth,
        templates,
        &plan.ratios,
        plan.partitions,
        plan.seed,
        plan.token_budget,
    )?;
    let mut responses: BTreeMap<(PromptKind, String), String> = stage1
        .iter()
        .map(|e| ((e.kind, e.key.clone()), e.response.clone()))
        .collect();
    let backend = crate::gateway::ScriptedBackend::from_entries(stage1)?;
    for &ratio in &plan.ratios {
        let vocab = crate::vocab::build_vocabulary(
            corpus,
            VocabParams {
                ratio,
                partitions: plan.partitions,
                clusters: plan.clusters,
                seed: plan.seed,
            },
            templates,
            &backend,
            provider,
            &plan.call,
            plan.token_budget,
        )?;
        for entry in script_extraction_responses(
            spec,
            truth,
            &vocab,
            plan.drift_q,
            plan.paraphrase_level,
            plan.seed,
        ) {
            match responses.get(&(entry.kind, entry.key.clone())) {
                Some(existing) if *existing != entry.response => {
                    return Err(SynthError::ScriptConflict)
                }
                Some(_) => {}
                None => {
                    responses.insert((entry.kind, entry.key), entry.response);
                }
            }
        }
    }
    Ok(responses
        .into_iter()
        .map(|((kind, key), response)| ScriptEntry {
            kind,
            key,
            response,
        })
        .collect())
}
