//! Review mining in two stages: induce a compact aspect vocabulary from a
//! corpus, then extract aspect-opinion-sentiment triples per review under
//! that vocabulary, conditioning each call on the user's and item's prior
//! aspects. Ships grounding diagnostics (aspect drift rate, opinion
//! fidelity), an aspect-aware rating predictor for downstream evaluation,
//! and a synthetic corpus generator plus scripted backends so every stage
//! can run deterministically without a live model.
//!
//! The numeric layer is generic over the scalar type (`f32`/`f64`) through
//! [`numeric::Real`]; the concrete aliases below pin the `f64` instantiations
//! the pipeline itself uses.

pub mod corpus;
pub mod embedding;
pub mod extraction;
pub mod gateway;
pub mod hallucination;
mod hashing;
pub mod numeric;
pub mod pipeline;
pub mod recommender;
pub mod synth;
pub mod vocab;

/// `f64` vector, the pipeline default.
pub type Vec64 = embedding::Vector<f64>;
/// `f32` vector for callers that trade precision for space.
pub type Vec32 = embedding::Vector<f32>;
/// `f64` hashed character n-gram embedder.
pub type HashedNgram64 = embedding::HashedNgramEmbedder<f64>;
/// `f32` hashed character n-gram embedder.
pub type HashedNgram32 = embedding::HashedNgramEmbedder<f32>;
/// `f64` rating predictor.
pub type FactorModel64 = recommender::FactorModel<f64>;
/// `f64` predictor hyperparameters.
pub type Hyperparams64 = recommender::Hyperparams<f64>;
