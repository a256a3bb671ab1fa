//! Contrastive decoding against a language prior, with an entropy-adaptive
//! contrast weight, a synthetic object-bias world for measuring object
//! hallucination, hallucination metrics, and a line-oriented wire protocol
//! for external scorers.

pub mod cli;
pub mod conformance;
pub mod contrast;
pub mod decode;
pub mod dist;
pub mod metrics;
pub mod protocol;
pub mod simworld;

pub use contrast::{
    contrast_combine, contrast_step, dynamic_weight, nucleus_set, plausibility_set, top_k_set,
    ContrastError, ContrastStep, PlausibilitySet, PriorSupportMode, WeightMode, WeightPolicy,
};
pub use decode::{
    generate, select_token, Capabilities, DecodeError, DecodingConfig, GenerationResult, Method,
    SamplingRng, ScoreContext, Scorer, ScorerError, Selection, StopReason, TemperatureStage,
};
pub use dist::{
    entropy, log_probs, softmax, DistError, Logit, LogitVector, ProbabilityDistribution, Vocabulary,
};

/// Version string embedded in reports.
pub const ENGINE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
