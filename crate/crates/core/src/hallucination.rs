//! Grounding diagnostics for extracted triples.
//!
//! Two failure modes are measured. Aspect drift: the extractor names an
//! aspect outside the fixed vocabulary it was given. Opinion infidelity:
//! the quoted opinion phrase does not appear in the review, and nothing
//! semantically close to it does either. Drift is a pure count; fidelity
//! compares the opinion against review token spans whose width is within
//! `delta` of the opinion length, scoring the best cosine match.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, mean_pool, tokenize, EmbedError, EmbeddingProvider};
use crate::extraction::AnnotatedInteraction;
use crate::numeric::Real;
use crate::vocab::AspectVocabulary;

#[derive(Debug, Error)]
pub enum HallucinationError {
    #[error("no tokens in {what}")]
    NoTokens { what: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("no interactions with extracted triples")]
    NoUsableInteractions,
}

/// Enumerates `(start, length)` spans of a `review_len`-token review whose
/// length is within `delta` of `opinion_len`, never shorter than one token.
/// Spans are listed by ascending length, then ascending start. The list is
/// empty when even the shortest allowed length exceeds the review.
pub fn span_candidates(review_len: usize, opinion_len: usize, delta: usize) -> Vec<(usize, usize)> {
    let min_len = opinion_len.saturating_sub(delta).max(1);
    let max_len = opinion_len + delta;
    let mut spans = Vec::new();
    for len in min_len..=max_len {
        if len > review_len {
            break;
        }
        for start in 0..=(review_len - len) {
            spans.push((start, len));
        }
    }
    spans
}

/// Similarity of an opinion phrase to the review it claims to quote.
///
/// Both sides are tokenized case-insensitively. An opinion that occurs
/// verbatim as a contiguous token run scores exactly 1. Otherwise the score
/// is the maximum cosine between the mean-pooled opinion and every
/// candidate span from [`span_candidates`]; when no candidate span fits
/// (the opinion is longer than the whole review by more than `delta`), the
/// full review is the single comparison span.
pub fn sem_sim<F: Real, P: EmbeddingProvider<F> + ?Sized>(
    provider: &P,
    review: &str,
    opinion: &str,
    delta: usize,
) -> Result<F, HallucinationError> {
    let review_tokens = tokenize(review);
    if review_tokens.is_empty() {
        return Err(HallucinationError::NoTokens {
            what: "review".into(),
        });
    }
    let opinion_tokens = tokenize(opinion);
    if opinion_tokens.is_empty() {
        return Err(HallucinationError::NoTokens {
            what: "opinion".into(),
        });
    }
    if review_tokens
        .windows(opinion_tokens.len())
        .any(|w| w == opinion_tokens.as_slice())
    {
        return Ok(F::one());
    }
    let mut spans = span_candidates(review_tokens.len(), opinion_tokens.len(), delta);
    if spans.is_empty() {
        spans.push((0, review_tokens.len()));
    }
    let opinion_vec = mean_pool(provider, &opinion_tokens)?;
    let mut best: Option<F> = None;
    for (start, len) in spans {
        let span_vec = mean_pool(provider, &review_tokens[start..start + len])?;
        let sim = cosine(&span_vec, &opinion_vec)?;
        best = Some(match best {
            None => sim,
            Some(current) => {
                if sim > current {
                    sim
                } else {
                    current
                }
            }
        });
    }
    Ok(best.expect("at least one span"))
}

fn usable(annotations: &[AnnotatedInteraction]) -> Vec<&AnnotatedInteraction> {
    annotations
        .iter()
        .filter(|a| !a.failed && !a.triples.is_empty())
        .collect()
}

fn drift_fraction(annotation: &AnnotatedInteraction, vocab: &AspectVocabulary) -> f64 {
    // Every triple counts, so a repeated off-vocabulary aspect weighs in
    // each time it was produced.
    let off = annotation
        .triples
        .iter()
        .filter(|t| !vocab.contains(&t.aspect))
        .count();
    off as f64 / annotation.triples.len() as f64
}

fn mean_semsim<F: Real, P: EmbeddingProvider<F> + ?Sized>(
    provider: &P,
    annotation: &AnnotatedInteraction,
    delta: usize,
) -> Result<f64, HallucinationError> {
    let mut sum = 0.0;
    for triple in &annotation.triples {
        let sim = sem_sim(provider, &annotation.interaction.review, &triple.opinion, delta)?;
        sum += sim.to_f64_lossy();
    }
    Ok(sum / annotation.triples.len() as f64)
}

/// Mean per-interaction fraction of triples naming an aspect outside the
/// vocabulary. Failed and triple-less interactions are skipped.
pub fn aspect_drift_rate(
    annotations: &[AnnotatedInteraction],
    vocab: &AspectVocabulary,
) -> Result<f64, HallucinationError> {
    let usable = usable(annotations);
    if usable.is_empty() {
        return Err(HallucinationError::NoUsableInteractions);
    }
    let sum: f64 = usable.iter().map(|a| drift_fraction(a, vocab)).sum();
    Ok(sum / usable.len() as f64)
}

/// Mean per-interaction mean opinion similarity. Failed and triple-less
/// interactions are skipped.
pub fn opinion_fidelity_rate<F: Real, P: EmbeddingProvider<F> + ?Sized + Sync>(
    provider: &P,
    annotations: &[AnnotatedInteraction],
    delta: usize,
) -> Result<f64, HallucinationError> {
    let usable = usable(annotations);
    if usable.is_empty() {
        return Err(HallucinationError::NoUsableInteractions);
    }
    let means: Vec<f64> = usable
        .par_iter()
        .map(|a| mean_semsim(provider, a, delta))
        .collect::<Result<_, _>>()?;
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// One usable interaction's diagnostic scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionScore {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub n_triples: usize,
    pub drift_fraction: f64,
    pub mean_semsim: f64,
}

/// Corpus-level grounding summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Aspect drift rate: mean fraction of off-vocabulary triples.
    pub adr: f64,
    /// Opinion fidelity rate: mean per-interaction mean similarity.
    pub ofr: f64,
    /// Interactions the means run over.
    pub n_interactions: usize,
    /// Interactions skipped for having failed or produced no triples.
    pub n_skipped_empty: usize,
    pub delta: usize,
    pub provider_id: String,
    pub corpus_hash: String,
}

/// Computes both rates and the per-interaction breakdown in one pass.
/// Scores follow the annotation order with unusable interactions dropped.
pub fn compute_report<F: Real, P: EmbeddingProvider<F> + ?Sized + Sync>(
    provider: &P,
    annotations: &[AnnotatedInteraction],
    vocab: &AspectVocabulary,
    delta: usize,
    corpus_hash: &str,
) -> Result<(MetricReport, Vec<InteractionScore>), HallucinationError> {
    let usable = usable(annotations);
    if usable.is_empty() {
        return Err(HallucinationError::NoUsableInteractions);
    }
    let scores: Vec<InteractionScore> = usable
        .par_iter()
        .map(|a| {
            let mean_semsim = mean_semsim(provider, a, delta)?;
            Ok(InteractionScore {
                user_id: a.interaction.user_id.clone(),
                item_id: a.interaction.item_id.clone(),
                timestamp: a.interaction.timestamp,
                n_triples: a.triples.len(),
                drift_fraction: drift_fraction(a, vocab),
                mean_semsim,
            })
        })
        .collect::<Result<_, HallucinationError>>()?;
    let n = scores.len();
    let adr = scores.iter().map(|s| s.drift_fraction).sum::<f64>() / n as f64;
    let ofr = scores.iter().map(|s| s.mean_semsim).sum::<f64>() / n as f64;
    let report = MetricReport {
        adr,
        ofr,
        n_interactions: n,
        n_skipped_empty: annotations.len() - n,
        delta,
        provider_id: provider.id(),
        corpus_hash: corpus_hash.to_string(),
    };
    Ok((report, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Interaction;
    use crate::embedding::HashedNgramEmbedder;
    use crate::extraction::{Sentiment, Triple};
    use proptest::prelude::*;

    fn provider() -> HashedNgramEmbedder<f64> {
        HashedNgramEmbedder::default()
    }

    fn annotated(review: &str, aspects_opinions: &[(&str, &str)], failed: bool) -> AnnotatedInteraction {
        AnnotatedInteraction {
            interaction: Interaction {
                user_id: "u".into(),
                item_id: "i".into(),
                rating: 4.0,
                review: review.into(),
                timestamp: 0,
            },
            triples: aspects_opinions
                .iter()
                .map(|(aspect, opinion)| Triple {
                    aspect: (*aspect).to_string(),
                    opinion: (*opinion).to_string(),
                    sentiment: Sentiment::Positive,
                })
                .collect(),
            history_snapshot: Vec::new(),
            drifted: Vec::new(),
            failed,
            error: None,
        }
    }

    #[test]
    fn span_enumeration_matches_hand_count() {
        // 5 tokens, opinion of 2, delta 1: lengths 1..=3.
        let spans = span_candidates(5, 2, 1);
        let expected: Vec<(usize, usize)> = vec![
            (0, 1),
            (1, 1),
            (2, 1),
            (3, 1),
            (4, 1),
            (0, 2),
            (1, 2),
            (2, 2),
            (3, 2),
            (0, 3),
            (1, 3),
            (2, 3),
        ];
        assert_eq!(spans, expected);
    }

    #[test]
    fn span_enumeration_clamps_to_review() {
        // Lengths 2..=6 but only 3 tokens available: lengths 4..6 vanish.
        let spans = span_candidates(3, 4, 2);
        assert_eq!(spans, vec![(0, 2), (1, 2), (0, 3)]);
        // Opinion so long no allowed length fits.
        assert!(span_candidates(2, 6, 2).is_empty());
        // Minimum length never drops below one token.
        let spans = span_candidates(3, 1, 4);
        assert!(spans.iter().all(|&(_, len)| len >= 1));
    }

    #[test]
    fn verbatim_opinion_scores_exactly_one() {
        let p = provider();
        let review = "The sound is very crisp, and the price feels fair.";
        assert_eq!(sem_sim(&p, review, "very crisp", 2).unwrap(), 1.0);
        // Case and punctuation differences do not break the verbatim match.
        assert_eq!(sem_sim(&p, review, "Very CRISP!", 2).unwrap(), 1.0);
        assert_eq!(sem_sim(&p, review, "the price feels fair", 2).unwrap(), 1.0);
    }

    #[test]
    fn non_verbatim_matches_exhaustive_span_maximum() {
        let p = provider();
        let review = "battery lasts a very long time on one charge";
        let opinion = "long lasting battery";
        let delta = 2;
        let got = sem_sim(&p, review, opinion, delta).unwrap();

        // Independent re-derivation with plain loops.
        let review_tokens = tokenize(review);
        let opinion_tokens = tokenize(opinion);
        let opinion_vec = mean_pool(&p, &opinion_tokens).unwrap();
        let mut best = f64::MIN;
        let lo = opinion_tokens.len().saturating_sub(delta).max(1);
        let hi = opinion_tokens.len() + delta;
        for len in lo..=hi.min(review_tokens.len()) {
            for start in 0..=(review_tokens.len() - len) {
                let span = mean_pool(&p, &review_tokens[start..start + len]).unwrap();
                best = best.max(cosine(&span, &opinion_vec).unwrap());
            }
        }
        assert!((got - best).abs() < 1e-15);
        assert!(got < 1.0);
    }

    #[test]
    fn oversized_opinion_falls_back_to_full_review() {
        let p = provider();
        let review = "too short";
        let opinion = "an opinion phrase much longer than the review itself";
        let got = sem_sim(&p, review, opinion, 2).unwrap();
        let review_vec = mean_pool(&p, &tokenize(review)).unwrap();
        let opinion_vec = mean_pool(&p, &tokenize(opinion)).unwrap();
        let expected = cosine(&review_vec, &opinion_vec).unwrap();
        assert_eq!(got, expected);
    }

    #[test]
    fn empty_sides_are_rejected() {
        let p = provider();
        assert!(matches!(
            sem_sim(&p, "...", "fine opinion", 2),
            Err(HallucinationError::NoTokens { .. })
        ));
        assert!(matches!(
            sem_sim(&p, "fine review", "!!!", 2),
            Err(HallucinationError::NoTokens { .. })
        ));
    }

    #[test]
    fn drift_counts_triples_not_distinct_aspects() {
        let vocab = AspectVocabulary::fixed(&["price", "sound"]);
        let annotations = vec![
            annotated(
                "good sound fair price",
                &[("price", "fair price"), ("offtopic", "x"), ("sound", "good sound")],
                false,
            ),
            annotated("irrelevant", &[("ghost", "x"), ("ghost", "y")], false),
        ];
        let adr = aspect_drift_rate(&annotations, &vocab).unwrap();
        // 1/3 for the first, 2/2 for the second (repeat counts twice).
        assert!((adr - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn skipped_interactions_do_not_dilute_rates() {
        let vocab = AspectVocabulary::fixed(&["price"]);
        let annotations = vec![
            annotated("fair price overall", &[("offtopic", "weird claim")], false),
            annotated("no triples here", &[], false),
            annotated("failed call", &[("price", "fair")], true),
        ];
        let adr = aspect_drift_rate(&annotations, &vocab).unwrap();
        assert_eq!(adr, 1.0);
        let p = provider();
        let (report, scores) = compute_report(&p, &annotations, &vocab, 2, "hash").unwrap();
        assert_eq!(report.n_interactions, 1);
        assert_eq!(report.n_skipped_empty, 2);
        assert_eq!(scores.len(), 1);
    }

    #[test]
    fn all_skipped_is_an_error() {
        let vocab = AspectVocabulary::fixed(&["price"]);
        let annotations = vec![
            annotated("no triples", &[], false),
            annotated("failed", &[("price", "fair")], true),
        ];
        assert!(matches!(
            aspect_drift_rate(&annotations, &vocab),
            Err(HallucinationError::NoUsableInteractions)
        ));
        let p = provider();
        assert!(matches!(
            opinion_fidelity_rate(&p, &annotations, 2),
            Err(HallucinationError::NoUsableInteractions)
        ));
    }

    #[test]
    fn verbatim_only_corpus_has_perfect_fidelity() {
        let p = provider();
        let annotations = vec![
            annotated(
                "the sound is crisp and clear",
                &[("sound", "crisp and clear")],
                false,
            ),
            annotated(
                "price felt fair for the build",
                &[("price", "felt fair"), ("build", "price felt fair for the build")],
                false,
            ),
        ];
        let ofr = opinion_fidelity_rate(&p, &annotations, 2).unwrap();
        assert_eq!(ofr, 1.0);
    }

    #[test]
    fn report_aggregates_match_thin_wrappers() {
        let p = provider();
        let vocab = AspectVocabulary::fixed(&["price", "sound"]);
        let annotations = vec![
            annotated(
                "great sound but the price stings",
                &[("sound", "great sound"), ("offtopic", "stings a bit")],
                false,
            ),
            annotated(
                "price was fair",
                &[("price", "was fair")],
                false,
            ),
        ];
        let (report, scores) = compute_report(&p, &annotations, &vocab, 2, "abc").unwrap();
        let adr = aspect_drift_rate(&annotations, &vocab).unwrap();
        let ofr = opinion_fidelity_rate(&p, &annotations, 2).unwrap();
        assert_eq!(report.adr, adr);
        assert_eq!(report.ofr, ofr);
        assert_eq!(report.delta, 2);
        assert_eq!(report.provider_id, p.id());
        assert_eq!(report.corpus_hash, "abc");
        assert_eq!(scores[0].n_triples, 2);
        assert_eq!(scores[1].drift_fraction, 0.0);

        // Second run is bit-identical.
        let (again, scores_again) = compute_report(&p, &annotations, &vocab, 2, "abc").unwrap();
        assert_eq!(report, again);
        assert_eq!(scores, scores_again);
    }

    proptest! {
        #[test]
        fn semsim_bounded_and_verbatim_unit(
            review_words in proptest::collection::vec("[a-z]{2,8}", 3..12),
            take in 1usize..4,
            start in 0usize..3,
        ) {
            let p = provider();
            let review = review_words.join(" ");
            let start = start.min(review_words.len() - 1);
            let take = take.min(review_words.len() - start);
            let opinion = review_words[start..start + take].join(" ");
            prop_assert_eq!(sem_sim(&p, &review, &opinion, 2).unwrap(), 1.0);

            let other = sem_sim(&p, &review, "entirely different claim", 2).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&other));
        }
    }
}
