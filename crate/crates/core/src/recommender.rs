//! Aspect-aware rating prediction.
//!
//! A biased matrix factorization model extended with a linear term over
//! per-interaction aspect sentiment features. The feature vector has one
//! component per vocabulary aspect: positive mentions add one, negative
//! mentions subtract one, neutral and off-vocabulary mentions contribute
//! nothing. Training is plain SGD on the squared error plus L2 penalties,
//! with a single seeded shuffle reused every epoch so runs are exactly
//! reproducible. The contribution of the aspect channel is summarized by
//! the cost-effectiveness ratio of partial-corpus vocabularies.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LengthStratum, RATING_MAX, RATING_MIN};
use crate::extraction::{AnnotatedInteraction, Sentiment, Triple};
use crate::hashing::derive_seed;
use crate::numeric::Real;
use crate::vocab::AspectVocabulary;

#[derive(Debug, Error)]
pub enum RecError {
    #[error("no samples")]
    NoSamples,
    #[error("feature width mismatch: expected {expected}, got {got}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("unknown id \"{id}\"")]
    UnknownId { id: String },
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("flat parameter length mismatch: expected {expected}, got {got}")]
    FlatLen { expected: usize, got: usize },
    #[error("baseline and full model have equal error; ratio undefined")]
    DegenerateCer,
    #[error("invalid hyperparameters: {0}")]
    BadParams(String),
    #[error("test ratio {ratio} outside [0, 1)")]
    InvalidRatio { ratio: f64 },
    #[error("interactions are not in chronological order")]
    Unsorted,
}

/// Per-interaction sentiment signature over the vocabulary: component `c`
/// is positive minus negative mentions of vocabulary aspect `c`. Aspects
/// outside the vocabulary are ignored.
pub fn aspect_features<F: Real>(triples: &[Triple], vocab: &AspectVocabulary) -> Vec<F> {
    let mut features = vec![F::zero(); vocab.len()];
    for triple in triples {
        if let Some(pos) = vocab.aspects().iter().position(|a| a == &triple.aspect) {
            match triple.sentiment {
                Sentiment::Positive => features[pos] += F::one(),
                Sentiment::Negative => features[pos] -= F::one(),
                Sentiment::Neutral => {}
            }
        }
    }
    features
}

/// One training or evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingSample<F> {
    pub user_id: String,
    pub item_id: String,
    pub rating: F,
    pub features: Vec<F>,
}

/// Builds samples from annotated interactions. With no vocabulary the
/// feature vector is zero-width, which reduces the model to plain biased
/// matrix factorization; failed interactions contribute empty triples and
/// hence an all-zero signature.
pub fn make_samples<F: Real>(
    annotations: &[AnnotatedInteraction],
    vocab: Option<&AspectVocabulary>,
) -> Vec<RatingSample<F>> {
    annotations
        .iter()
        .map(|a| RatingSample {
            user_id: a.interaction.user_id.clone(),
            item_id: a.interaction.item_id.clone(),
            rating: F::from_f64_lossy(a.interaction.rating),
            features: match vocab {
                Some(v) => aspect_features(&a.triples, v),
                None => Vec::new(),
            },
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams<F> {
    pub factors: usize,
    pub step: F,
    pub l2: F,
    pub epochs: usize,
    pub seed: u64,
}

impl<F: Real> Default for Hyperparams<F> {
    fn default() -> Self {
        Self {
            factors: 16,
            step: F::from_f64_lossy(0.01),
            l2: F::from_f64_lossy(0.05),
            epochs: 30,
            seed: 0,
        }
    }
}

impl<F: Real> Hyperparams<F> {
    pub fn validate(&self) -> Result<(), RecError> {
        if !self.step.is_finite() || self.step <= F::zero() {
            return Err(RecError::BadParams("step must be positive".into()));
        }
        if self.l2 < F::zero() || !self.l2.is_finite() {
            return Err(RecError::BadParams("l2 must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(RecError::BadParams("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// MSE and MAE over clamped predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub n: usize,
}

/// Per-epoch unclamped training error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_mse: Vec<f64>,
}

/// Biased matrix factorization with a global linear aspect term:
/// rhat = mu + b_u + b_i + p_u . q_i + w . x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "F: Serialize",
    deserialize = "F: serde::de::DeserializeOwned"
))]
pub struct FactorModel<F> {
    mu: F,
    user_bias: Vec<F>,
    item_bias: Vec<F>,
    /// Row-major `n_users x factors`.
    user_factors: Vec<F>,
    /// Row-major `n_items x factors`.
    item_factors: Vec<F>,
    weights: Vec<F>,
    factors: usize,
    n_features: usize,
    user_index: BTreeMap<String, usize>,
    item_index: BTreeMap<String, usize>,
    hyperparams: Hyperparams<F>,
}

impl<F: Real> FactorModel<F> {
    /// Trains from scratch. The sample shuffle and factor initialization
    /// are both derived from `params.seed`, and the same shuffled order is
    /// replayed every epoch, so equal inputs give bit-equal models.
    pub fn train(
        samples: &[RatingSample<F>],
        params: &Hyperparams<F>,
    ) -> Result<(Self, TrainReport), RecError> {
        params.validate()?;
        if samples.is_empty() {
            return Err(RecError::NoSamples);
        }
        let n_features = samples[0].features.len();
        for sample in samples {
            if sample.features.len() != n_features {
                return Err(RecError::FeatureWidth {
                    expected: n_features,
                    got: sample.features.len(),
                });
            }
        }
        let mut user_index = BTreeMap::new();
        let mut item_index = BTreeMap::new();
        for sample in samples {
            let next = user_index.len();
            user_index.entry(sample.user_id.clone()).or_insert(next);
            let next = item_index.len();
            item_index.entry(sample.item_id.clone()).or_insert(next);
        }
        // Re-number in sorted id order so the index layout does not depend
        // on sample order.
        for (pos, (_, slot)) in user_index.iter_mut().enumerate() {
            *slot = pos;
        }
        for (pos, (_, slot)) in item_index.iter_mut().enumerate() {
            *slot = pos;
        }
        let n_users = user_index.len();
        let n_items = item_index.len();
        let d = params.factors;

        let mean = samples
            .iter()
            .map(|s| s.rating.to_f64_lossy())
            .sum::<f64>()
            / samples.len() as f64;
        let mut rng = ChaCha12Rng::from_seed(derive_seed(
            "recommender-init",
            &[&params.seed.to_le_bytes()],
        ));
        let mut init = |count: usize| -> Vec<F> {
            (0..count)
                .map(|_| F::from_f64_lossy(rng.gen_range(-0.05..0.05)))
                .collect()
        };
        let mut model = Self {
            mu: F::from_f64_lossy(mean),
            user_bias: vec![F::zero(); n_users],
            item_bias: vec![F::zero(); n_items],
            user_factors: init(n_users * d),
            item_factors: init(n_items * d),
            weights: vec![F::zero(); n_features],
            factors: d,
            n_features,
            user_index,
            item_index,
            hyperparams: *params,
        };

        let order = shuffled_order(samples.len(), params.seed);
        let mut trace = Vec::with_capacity(params.epochs);
        for epoch in 0..params.epochs {
            for &idx in &order {
                model.sgd_step(&samples[idx]);
            }
            let mse = model.raw_mse(samples);
            if !mse.is_finite() {
                return Err(RecError::Diverged { epoch });
            }
            trace.push(mse);
        }
        Ok((model, TrainReport { epoch_mse: trace }))
    }

    fn user_slot(&self, user_id: &str) -> Option<usize> {
        self.user_index.get(user_id).copied()
    }

    fn item_slot(&self, item_id: &str) -> Option<usize> {
        self.item_index.get(item_id).copied()
    }

    fn raw_predict(&self, user: Option<usize>, item: Option<usize>, features: &[F]) -> F {
        let mut pred = self.mu;
        if let Some(u) = user {
            pred += self.user_bias[u];
        }
        if let Some(i) = item {
            pred += self.item_bias[i];
        }
        if let (Some(u), Some(i)) = (user, item) {
            let pu = &self.user_factors[u * self.factors..(u + 1) * self.factors];
            let qi = &self.item_factors[i * self.factors..(i + 1) * self.factors];
            for k in 0..self.factors {
                pred += pu[k] * qi[k];
            }
        }
        for (w, x) in self.weights.iter().zip(features) {
            pred += *w * *x;
        }
        pred
    }

    fn sgd_step(&mut self, sample: &RatingSample<F>) {
        let u = self.user_slot(&sample.user_id).expect("trained user");
        let i = self.item_slot(&sample.item_id).expect("trained item");
        let pred = self.raw_predict(Some(u), Some(i), &sample.features);
        let err = sample.rating - pred;
        let step = self.hyperparams.step;
        let l2 = self.hyperparams.l2;
        let two = F::from_f64_lossy(2.0);

        self.mu += step * two * err;
        let bu = self.user_bias[u];
        self.user_bias[u] += step * two * (err - l2 * bu);
        let bi = self.item_bias[i];
        self.item_bias[i] += step * two * (err - l2 * bi);
        let d = self.factors;
        for k in 0..d {
            let pu = self.user_factors[u * d + k];
            let qi = self.item_factors[i * d + k];
            self.user_factors[u * d + k] += step * two * (err * qi - l2 * pu);
            self.item_factors[i * d + k] += step * two * (err * pu - l2 * qi);
        }
        for (k, x) in sample.features.iter().enumerate() {
            let w = self.weights[k];
            self.weights[k] += step * two * (err * *x - l2 * w);
        }
    }

    fn raw_mse(&self, samples: &[RatingSample<F>]) -> f64 {
        let mut sum = 0.0;
        for sample in samples {
            let user = self.user_slot(&sample.user_id);
            let item = self.item_slot(&sample.item_id);
            let err = (sample.rating - self.raw_predict(user, item, &sample.features))
                .to_f64_lossy();
            sum += err * err;
        }
        sum / samples.len() as f64
    }

    /// Clamped prediction. Unknown users or items fall back to the parts
    /// of the model that remain defined.
    pub fn predict(&self, user_id: &str, item_id: &str, features: &[F]) -> Result<F, RecError> {
        if features.len() != self.n_features {
            return Err(RecError::FeatureWidth {
                expected: self.n_features,
                got: features.len(),
            });
        }
        let raw = self.raw_predict(self.user_slot(user_id), self.item_slot(item_id), features);
        let lo = F::from_f64_lossy(RATING_MIN);
        let hi = F::from_f64_lossy(RATING_MAX);
        Ok(raw.max(lo).min(hi))
    }

    pub fn evaluate(&self, samples: &[RatingSample<F>]) -> Result<EvalMetrics, RecError> {
        if samples.is_empty() {
            return Err(RecError::NoSamples);
        }
        let mut se = 0.0;
        let mut ae = 0.0;
        for sample in samples {
            let pred = self.predict(&sample.user_id, &sample.item_id, &sample.features)?;
            let err = (sample.rating - pred).to_f64_lossy();
            se += err * err;
            ae += err.abs();
        }
        Ok(EvalMetrics {
            mse: se / samples.len() as f64,
            mae: ae / samples.len() as f64,
            n: samples.len(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn hyperparams(&self) -> &Hyperparams<F> {
        &self.hyperparams
    }

    fn flat_len(&self) -> usize {
        1 + self.user_bias.len()
            + self.item_bias.len()
            + self.user_factors.len()
            + self.item_factors.len()
            + self.weights.len()
    }

    /// All parameters in one vector: mu, user biases, item biases, user
    /// factors, item factors, feature weights. The layout is the contract
    /// for [`Self::set_flat_params`] and [`Self::sample_gradient_flat`].
    pub fn flat_params(&self) -> Vec<F> {
        let mut flat = Vec::with_capacity(self.flat_len());
        flat.push(self.mu);
        flat.extend_from_slice(&self.user_bias);
        flat.extend_from_slice(&self.item_bias);
        flat.extend_from_slice(&self.user_factors);
        flat.extend_from_slice(&self.item_factors);
        flat.extend_from_slice(&self.weights);
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[F]) -> Result<(), RecError> {
        if flat.len() != self.flat_len() {
            return Err(RecError::FlatLen {
                expected: self.flat_len(),
                got: flat.len(),
            });
        }
        let mut cursor = flat.iter().copied();
        self.mu = cursor.next().expect("length checked");
        for slot in self.user_bias.iter_mut() {
            *slot = cursor.next().expect("length checked");
        }
        for slot in self.item_bias.iter_mut() {
            *slot = cursor.next().expect("length checked");
        }
        for slot in self.user_factors.iter_mut() {
            *slot = cursor.next().expect("length checked");
        }
        for slot in self.item_factors.iter_mut() {
            *slot = cursor.next().expect("length checked");
        }
        for slot in self.weights.iter_mut() {
            *slot = cursor.next().expect("length checked");
        }
        Ok(())
    }

    /// Per-sample objective: squared error plus L2 on the sample's biases
    /// and factors and on the full weight vector. The global mean is not
    /// penalized.
    pub fn sample_objective(&self, sample: &RatingSample<F>) -> Result<F, RecError> {
        let u = self
            .user_slot(&sample.user_id)
            .ok_or_else(|| RecError::UnknownId {
                id: sample.user_id.clone(),
            })?;
        let i = self
            .item_slot(&sample.item_id)
            .ok_or_else(|| RecError::UnknownId {
                id: sample.item_id.clone(),
            })?;
        if sample.features.len() != self.n_features {
            return Err(RecError::FeatureWidth {
                expected: self.n_features,
                got: sample.features.len(),
            });
        }
        let err = sample.rating - self.raw_predict(Some(u), Some(i), &sample.features);
        let l2 = self.hyperparams.l2;
        let mut penalty = self.user_bias[u] * self.user_bias[u];
        penalty += self.item_bias[i] * self.item_bias[i];
        let d = self.factors;
        for k in 0..d {
            penalty += self.user_factors[u * d + k] * self.user_factors[u * d + k];
            penalty += self.item_factors[i * d + k] * self.item_factors[i * d + k];
        }
        for w in &self.weights {
            penalty += *w * *w;
        }
        Ok(err * err + l2 * penalty)
    }

    /// Exact gradient of [`Self::sample_objective`] in flat layout.
    pub fn sample_gradient_flat(&self, sample: &RatingSample<F>) -> Result<Vec<F>, RecError> {
        let u = self
            .user_slot(&sample.user_id)
            .ok_or_else(|| RecError::UnknownId {
                id: sample.user_id.clone(),
            })?;
        let i = self
            .item_slot(&sample.item_id)
            .ok_or_else(|| RecError::UnknownId {
                id: sample.item_id.clone(),
            })?;
        if sample.features.len() != self.n_features {
            return Err(RecError::FeatureWidth {
                expected: self.n_features,
                got: sample.features.len(),
            });
        }
        let err = sample.rating - self.raw_predict(Some(u), Some(i), &sample.features);
        let l2 = self.hyperparams.l2;
        let two = F::from_f64_lossy(2.0);
        let mut grad = vec![F::zero(); self.flat_len()];
        let n_users = self.user_bias.len();
        let n_items = self.item_bias.len();
        let d = self.factors;
        grad[0] = -two * err;
        grad[1 + u] = -two * err + two * l2 * self.user_bias[u];
        grad[1 + n_users + i] = -two * err + two * l2 * self.item_bias[i];
        let user_base = 1 + n_users + n_items;
        let item_base = user_base + self.user_factors.len();
        for k in 0..d {
            let pu = self.user_factors[u * d + k];
            let qi = self.item_factors[i * d + k];
            grad[user_base + u * d + k] = -two * err * qi + two * l2 * pu;
            grad[item_base + i * d + k] = -two * err * pu + two * l2 * qi;
        }
        let weight_base = item_base + self.item_factors.len();
        for (k, x) in sample.features.iter().enumerate() {
            grad[weight_base + k] = -two * err * *x + two * l2 * self.weights[k];
        }
        Ok(grad)
    }
}

/// Fixed full shuffle of `0..n` derived from the seed.
fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha12Rng::from_seed(derive_seed(
        "recommender-shuffle",
        &[&seed.to_le_bytes()],
    ));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Cost-effectiveness ratio: the share of the full-vocabulary error
/// reduction that a partial vocabulary achieves.
pub fn cer(mse_zero: f64, mse_full: f64, mse_partial: f64) -> Result<f64, RecError> {
    let denom = mse_zero - mse_full;
    if denom == 0.0 {
        return Err(RecError::DegenerateCer);
    }
    Ok((mse_zero - mse_partial) / denom)
}

/// Splits chronologically ordered interactions per user: the last
/// `floor(n * test_ratio)` of each user's interactions go to test. Users
/// with too few interactions stay entirely in train. Returned index lists
/// are ascending.
pub fn chronological_split(
    annotations: &[AnnotatedInteraction],
    test_ratio: f64,
) -> Result<(Vec<usize>, Vec<usize>), RecError> {
    if !test_ratio.is_finite() || !(0.0..1.0).contains(&test_ratio) {
        return Err(RecError::InvalidRatio { ratio: test_ratio });
    }
    let mut last: Option<i64> = None;
    for a in annotations {
        if let Some(prev) = last {
            if a.interaction.timestamp < prev {
                return Err(RecError::Unsorted);
            }
        }
        last = Some(a.interaction.timestamp);
    }
    let mut per_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (idx, a) in annotations.iter().enumerate() {
        per_user
            .entry(a.interaction.user_id.as_str())
            .or_default()
            .push(idx);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for indices in per_user.values() {
        let n_test = (indices.len() as f64 * test_ratio).floor() as usize;
        let cut = indices.len() - n_test;
        train.extend_from_slice(&indices[..cut]);
        test.extend_from_slice(&indices[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Evaluation result for one review-length stratum. `metrics` is absent
/// when the stratum holds fewer than the requested minimum of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub label: String,
    pub n: usize,
    pub metrics: Option<EvalMetrics>,
}

const STRATA: [LengthStratum; 4] = [
    LengthStratum::Short,
    LengthStratum::Medium,
    LengthStratum::Long,
    LengthStratum::ExtraLong,
];

/// Evaluates per review-length stratum. Every stratum appears in the
/// output; those under `min_n` samples carry no metrics.
pub fn stratified_eval<F: Real>(
    model: &FactorModel<F>,
    entries: &[(RatingSample<F>, usize)],
    min_n: usize,
) -> Result<Vec<StratumReport>, RecError> {
    let mut buckets: BTreeMap<LengthStratum, Vec<&RatingSample<F>>> = BTreeMap::new();
    for (sample, words) in entries {
        buckets
            .entry(LengthStratum::of_words(*words))
            .or_default()
            .push(sample);
    }
    let mut reports = Vec::with_capacity(STRATA.len());
    for stratum in STRATA {
        let samples: Vec<RatingSample<F>> = buckets
            .get(&stratum)
            .map(|refs| refs.iter().map(|s| (*s).clone()).collect())
            .unwrap_or_default();
        let metrics = if samples.len() >= min_n.max(1) {
            Some(model.evaluate(&samples)?)
        } else {
            None
        };
        reports.push(StratumReport {
            label: stratum.label().to_string(),
            n: samples.len(),
            metrics,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Interaction;

    fn triple(aspect: &str, sentiment: Sentiment) -> Triple {
        Triple {
            aspect: aspect.into(),
            opinion: "whatever".into(),
            sentiment,
        }
    }

    fn sample(user: &str, item: &str, rating: f64, features: &[f64]) -> RatingSample<f64> {
        RatingSample {
            user_id: user.into(),
            item_id: item.into(),
            rating,
            features: features.to_vec(),
        }
    }

    /// Synthetic set where rating depends linearly on one feature.
    fn linear_samples(n: usize) -> Vec<RatingSample<f64>> {
        (0..n)
            .map(|i| {
                let x = (i % 5) as f64 - 2.0;
                sample(
                    &format!("u{}", i % 7),
                    &format!("i{}", i % 11),
                    (3.0 + 0.6 * x).clamp(1.0, 5.0),
                    &[x, 0.0],
                )
            })
            .collect()
    }

    #[test]
    fn features_count_signed_mentions() {
        let vocab = AspectVocabulary::fixed(&["price", "sound", "comfort"]);
        let triples = vec![
            triple("price", Sentiment::Positive),
            triple("price", Sentiment::Positive),
            triple("price", Sentiment::Neutral),
            triple("sound", Sentiment::Negative),
            triple("offtopic", Sentiment::Positive),
        ];
        let features: Vec<f64> = aspect_features(&triples, &vocab);
        assert_eq!(features, vec![2.0, -1.0, 0.0]);
    }

    #[test]
    fn make_samples_with_and_without_vocab() {
        let vocab = AspectVocabulary::fixed(&["price"]);
        let annotation = AnnotatedInteraction {
            interaction: Interaction {
                user_id: "u".into(),
                item_id: "i".into(),
                rating: 4.5,
                review: "nice".into(),
                timestamp: 3,
            },
            triples: vec![triple("price", Sentiment::Positive)],
            history_snapshot: Vec::new(),
            drifted: Vec::new(),
            failed: false,
            error: None,
        };
        let with: Vec<RatingSample<f64>> =
            make_samples(std::slice::from_ref(&annotation), Some(&vocab));
        assert_eq!(with[0].features, vec![1.0]);
        assert_eq!(with[0].rating, 4.5);
        let without: Vec<RatingSample<f64>> = make_samples(&[annotation], None);
        assert!(without[0].features.is_empty());
    }

    #[test]
    fn training_reduces_error_and_is_deterministic() {
        let samples = linear_samples(200);
        let params = Hyperparams::<f64> {
            factors: 4,
            epochs: 40,
            ..Default::default()
        };
        let (model, report) = FactorModel::train(&samples, &params).unwrap();
        assert_eq!(report.epoch_mse.len(), 40);
        // Ratings have variance 0.72 around the mean; the linear term must
        // claw most of that back.
        assert!(report.epoch_mse[39] < 0.2);
        assert!(report.epoch_mse[39] <= report.epoch_mse[0]);

        let (again, _) = FactorModel::train(&samples, &params).unwrap();
        assert_eq!(model.flat_params(), again.flat_params());

        let other = Hyperparams::<f64> {
            seed: 1,
            ..params
        };
        let (different, _) = FactorModel::train(&samples, &other).unwrap();
        assert_ne!(model.flat_params(), different.flat_params());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let samples = linear_samples(40);
        let params = Hyperparams::<f64> {
            factors: 3,
            epochs: 2,
            ..Default::default()
        };
        let (model, _) = FactorModel::train(&samples, &params).unwrap();
        let sample = &samples[7];
        let grad = model.sample_gradient_flat(sample).unwrap();
        let flat = model.flat_params();
        let eps = 1e-6;
        let mut probe = model.clone();
        for idx in [0usize, 1, 5, 12, flat.len() - 1, flat.len() - 2] {
            let mut plus = flat.clone();
            plus[idx] += eps;
            probe.set_flat_params(&plus).unwrap();
            let up = probe.sample_objective(sample).unwrap();
            let mut minus = flat.clone();
            minus[idx] -= eps;
            probe.set_flat_params(&minus).unwrap();
            let down = probe.sample_objective(sample).unwrap();
            let numeric = (up - down) / (2.0 * eps);
            let denom = grad[idx].abs().max(1.0);
            assert!(
                (grad[idx] - numeric).abs() / denom < 1e-5,
                "coord {idx}: analytic {} vs numeric {numeric}",
                grad[idx]
            );
        }
    }

    #[test]
    fn constant_model_mse_equals_variance() {
        let samples = vec![
            sample("a", "x", 2.0, &[]),
            sample("b", "y", 4.0, &[]),
            sample("c", "z", 5.0, &[]),
            sample("d", "w", 3.0, &[]),
        ];
        let params = Hyperparams::<f64> {
            factors: 0,
            step: 1e-12,
            epochs: 1,
            l2: 0.0,
            ..Default::default()
        };
        // One epoch at a vanishing step keeps the model at initialization:
        // mu equals the mean, everything else zero except empty factors.
        let (model, _) = FactorModel::train(&samples, &params).unwrap();
        let metrics = model.evaluate(&samples).unwrap();
        let mean = 3.5;
        let variance = samples
            .iter()
            .map(|s| (s.rating - mean).powi(2))
            .sum::<f64>()
            / samples.len() as f64;
        assert!((metrics.mse - variance).abs() < 1e-9);
    }

    #[test]
    fn predictions_clamp_and_tolerate_unknown_ids() {
        let samples = linear_samples(50);
        let params = Hyperparams::<f64> {
            factors: 2,
            epochs: 5,
            ..Default::default()
        };
        let (model, _) = FactorModel::train(&samples, &params).unwrap();
        let pred = model.predict("nobody", "nothing", &[0.0, 0.0]).unwrap();
        assert!((RATING_MIN..=RATING_MAX).contains(&pred));
        // Extreme features push the raw score far outside the scale.
        let pushed = model.predict("u0", "i0", &[1e6, 0.0]).unwrap();
        assert!((RATING_MIN..=RATING_MAX).contains(&pushed));
        assert!(model.predict("u0", "i0", &[1.0]).is_err());
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        assert!(matches!(
            FactorModel::<f64>::train(&[], &Hyperparams::default()),
            Err(RecError::NoSamples)
        ));
        let mixed = vec![sample("a", "x", 3.0, &[1.0]), sample("b", "y", 3.0, &[])];
        assert!(matches!(
            FactorModel::train(&mixed, &Hyperparams::default()),
            Err(RecError::FeatureWidth { .. })
        ));
        let bad = Hyperparams::<f64> {
            step: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let samples = linear_samples(50);
        let params = Hyperparams::<f64> {
            factors: 4,
            step: 1e6,
            epochs: 50,
            ..Default::default()
        };
        assert!(matches!(
            FactorModel::train(&samples, &params),
            Err(RecError::Diverged { .. })
        ));
    }

    #[test]
    fn cer_endpoints() {
        assert_eq!(cer(1.0, 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(cer(1.0, 0.5, 0.5).unwrap(), 1.0);
        assert_eq!(cer(1.0, 0.5, 0.75).unwrap(), 0.5);
        assert!(matches!(cer(0.8, 0.8, 0.7), Err(RecError::DegenerateCer)));
    }

    fn timed_annotation(user: &str, ts: i64) -> AnnotatedInteraction {
        AnnotatedInteraction {
            interaction: Interaction {
                user_id: user.into(),
                item_id: format!("item-{ts}"),
                rating: 3.0,
                review: "text".into(),
                timestamp: ts,
            },
            triples: Vec::new(),
            history_snapshot: Vec::new(),
            drifted: Vec::new(),
            failed: false,
            error: None,
        }
    }

    #[test]
    fn split_takes_last_fraction_per_user() {
        // User a: 5 interactions, user b: 1.
        let annotations = vec![
            timed_annotation("a", 1),
            timed_annotation("b", 2),
            timed_annotation("a", 3),
            timed_annotation("a", 4),
            timed_annotation("a", 5),
            timed_annotation("a", 6),
        ];
        let (train, test) = chronological_split(&annotations, 0.2).unwrap();
        // floor(5 * 0.2) = 1 for a, floor(1 * 0.2) = 0 for b.
        assert_eq!(test, vec![5]);
        assert_eq!(train, vec![0, 1, 2, 3, 4]);

        let (all_train, none) = chronological_split(&annotations, 0.0).unwrap();
        assert_eq!(all_train.len(), 6);
        assert!(none.is_empty());
    }

    #[test]
    fn split_validates() {
        let ok = vec![timed_annotation("a", 1)];
        assert!(matches!(
            chronological_split(&ok, 1.0),
            Err(RecError::InvalidRatio { .. })
        ));
        let unsorted = vec![timed_annotation("a", 5), timed_annotation("a", 1)];
        assert!(matches!(
            chronological_split(&unsorted, 0.2),
            Err(RecError::Unsorted)
        ));
    }

    #[test]
    fn stratified_eval_reports_all_strata() {
        let samples = linear_samples(60);
        let params = Hyperparams::<f64> {
            factors: 2,
            epochs: 5,
            ..Default::default()
        };
        let (model, _) = FactorModel::train(&samples, &params).unwrap();
        // Word counts: 30 short, 30 medium, none long or extra long.
        let entries: Vec<(RatingSample<f64>, usize)> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), if i < 30 { 5 } else { 20 }))
            .collect();
        let reports = stratified_eval(&model, &entries, 10).unwrap();
        assert_eq!(reports.len(), 4);
        assert_eq!(reports[0].label, "short");
        assert_eq!(reports[0].n, 30);
        assert!(reports[0].metrics.is_some());
        assert!(reports[1].metrics.is_some());
        assert_eq!(reports[2].n, 0);
        assert!(reports[2].metrics.is_none());
        assert!(reports[3].metrics.is_none());

        // A higher floor silences both populated strata.
        let strict = stratified_eval(&model, &entries, 31).unwrap();
        assert!(strict.iter().all(|r| r.metrics.is_none()));
    }

    #[test]
    fn model_serializes_round_trip() {
        let samples = linear_samples(30);
        let params = Hyperparams::<f64> {
            factors: 2,
            epochs: 3,
            ..Default::default()
        };
        let (model, _) = FactorModel::train(&samples, &params).unwrap();
        let json = serde_json::to_string(&model).unwrap();
        let back: FactorModel<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn works_at_f32() {
        let samples: Vec<RatingSample<f32>> = (0..40)
            .map(|i| RatingSample {
                user_id: format!("u{}", i % 5),
                item_id: format!("i{}", i % 7),
                rating: 3.0 + (i % 3) as f32 * 0.5,
                features: vec![(i % 2) as f32],
            })
            .collect();
        let params = Hyperparams::<f32> {
            factors: 2,
            epochs: 5,
            ..Default::default()
        };
        let (model, report) = FactorModel::train(&samples, &params).unwrap();
        assert!(report.epoch_mse.iter().all(|m| m.is_finite()));
        let pred = model.predict("u0", "i0", &[1.0]).unwrap();
        assert!((1.0..=5.0).contains(&pred));
    }
}
