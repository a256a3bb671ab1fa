//! Autoregressive generation over pluggable scorers.
//!
//! Randomness comes from a ChaCha8 stream seeded with
//! `ChaCha8Rng::seed_from_u64(seed)`. Each sampled step consumes one `u64`,
//! turned into a uniform `u = (x >> 11) * 2^-53` in `[0, 1)`. The token is the
//! first index `i`, scanning candidates in increasing index order, whose
//! cumulative probability exceeds `u * total`, where `total` is the candidate
//! mass. Greedy steps consume nothing.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contrast::{
    contrast_step, nucleus_set, ContrastError, ContrastStep, PlausibilitySet, PriorSupportMode,
    WeightMode, WeightPolicy,
};
use crate::dist::{softmax, DistError, LogitVector, ProbabilityDistribution, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("scorer unavailable: {0}")]
    Unavailable(String),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend error: {0}")]
    Backend(String),
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("method {0:?} requires a prior scorer")]
    MissingPrior(Method),
    #[error("vocabulary mismatch between expert and prior: {0}")]
    VocabularyMismatch(String),
    #[error("scorer returned {actual} logits for a vocabulary of {expected}")]
    LogitLength { expected: usize, actual: usize },
    #[error("prompt token {0} is outside the vocabulary")]
    PromptToken(usize),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Contrast(#[from] ContrastError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl DecodeError {
    pub fn is_prior_support(&self) -> bool {
        matches!(
            self,
            DecodeError::Contrast(ContrastError::PriorSupport { .. })
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub concurrent_safe: bool,
    pub grounding: bool,
}

/// Inputs for one next-token query.
#[derive(Debug, Clone, Copy)]
pub struct ScoreContext<'a> {
    pub session_id: &'a str,
    pub prompt: &'a [usize],
    pub generated: &'a [usize],
    /// When false the scorer must ignore any grounding context it holds.
    pub include_grounding: bool,
}

impl ScoreContext<'_> {
    /// Prompt followed by the generated prefix.
    pub fn prefix(&self) -> impl Iterator<Item = usize> + '_ {
        self.prompt.iter().chain(self.generated).copied()
    }
}

/// A conditional next-token model.
///
/// Implementations return unscaled logits and must be deterministic for a
/// fixed context.
pub trait Scorer: Send + Sync {
    fn vocabulary(&self) -> &Vocabulary;

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<LogitVector, ScorerError>;

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<LogitVector, ScorerError> {
        (**self).score(ctx)
    }

    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn vocabulary(&self) -> &Vocabulary {
        (**self).vocabulary()
    }

    fn score(&self, ctx: &ScoreContext<'_>) -> Result<LogitVector, ScorerError> {
        (**self).score(ctx)
    }

    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Greedy,
    Sample,
    Nucleus,
    Lcd,
    CdStatic,
}

impl Method {
    pub fn uses_prior(self) -> bool {
        matches!(self, Method::Lcd | Method::CdStatic)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Greedy => "greedy",
            Method::Sample => "sample",
            Method::Nucleus => "nucleus",
            Method::Lcd => "lcd",
            Method::CdStatic => "cd_static",
        }
    }
}

/// Where temperature scaling is applied in contrastive modes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureStage {
    /// Scale each scorer's logits before contrasting.
    #[default]
    PerModel,
    /// Contrast untempered distributions, scale the combined logits.
    PostContrast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub method: Method,
    pub alpha: f64,
    pub weight: WeightPolicy,
    pub temperature: f64,
    pub temperature_stage: TemperatureStage,
    pub nucleus_p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub prior_support: PriorSupportMode,
    pub trace: bool,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            method: Method::Lcd,
            alpha: 0.1,
            weight: WeightPolicy::dynamic(3.0),
            temperature: 1.0,
            temperature_stage: TemperatureStage::PerModel,
            nucleus_p: 0.95,
            max_new_tokens: 250,
            seed: 0,
            prior_support: PriorSupportMode::Strict,
            trace: false,
        }
    }
}

impl DecodingConfig {
    pub fn with_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        let bad = |msg: String| Err(DecodeError::InvalidConfig(msg));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return bad(format!(
                "nucleus_p must lie in (0, 1], got {}",
                self.nucleus_p
            ));
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be at least 1".into());
        }
        self.weight
            .validate()
            .map_err(|e| DecodeError::InvalidConfig(e.to_string()))
    }

    /// The weight policy actually applied, with `cd_static` forcing a fixed
    /// weight.
    pub fn effective_weight(&self) -> WeightPolicy {
        match self.method {
            Method::CdStatic => WeightPolicy {
                mode: WeightMode::Static,
                ..self.weight
            },
            _ => self.weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationResult {
    pub tokens: Vec<usize>,
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<ContrastStep>>,
    pub stop_reason: StopReason,
}

/// The session random stream.
#[derive(Debug, Clone)]
pub struct SamplingRng(ChaCha8Rng);

impl SamplingRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    pub fn next_uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    Greedy,
    Sample,
}

/// Picks the next token: lowest-index argmax, or an inverse-CDF draw.
pub fn select_token(
    dist: &ProbabilityDistribution,
    rule: Selection,
    rng: &mut SamplingRng,
) -> usize {
    match rule {
        Selection::Greedy => dist.argmax(),
        Selection::Sample => inverse_cdf(dist, 0..dist.len(), rng),
    }
}

/// Inverse-CDF draw restricted to a candidate set, renormalizing implicitly.
pub fn sample_from_set(
    dist: &ProbabilityDistribution,
    candidates: &PlausibilitySet,
    rng: &mut SamplingRng,
) -> usize {
    inverse_cdf(dist, candidates.iter(), rng)
}

fn inverse_cdf(
    dist: &ProbabilityDistribution,
    candidates: impl Iterator<Item = usize> + Clone,
    rng: &mut SamplingRng,
) -> usize {
    let total: f64 = candidates.clone().map(|i| dist.get(i)).sum();
    let target = rng.next_uniform() * total;
    let mut cumulative = 0.0;
    let mut last_positive = None;
    for i in candidates {
        let p = dist.get(i);
        if p > 0.0 {
            last_positive = Some(i);
        }
        cumulative += p;
        if cumulative > target {
            return i;
        }
    }
    // rounding left the target at or above the accumulated mass
    last_positive.unwrap_or_else(|| dist.argmax())
}

fn check_vocabularies(expert: &Vocabulary, prior: &Vocabulary) -> Result<(), DecodeError> {
    if expert.size() != prior.size() {
        return Err(DecodeError::VocabularyMismatch(format!(
            "expert has {} tokens, prior has {}",
            expert.size(),
            prior.size()
        )));
    }
    if expert.eos_id() != prior.eos_id() {
        return Err(DecodeError::VocabularyMismatch(format!(
            "eos ids differ ({} vs {})",
            expert.eos_id(),
            prior.eos_id()
        )));
    }
    if let Some(i) = (0..expert.size()).find(|&i| expert.token(i) != prior.token(i)) {
        return Err(DecodeError::VocabularyMismatch(format!(
            "token {i} differs ({:?} vs {:?})",
            expert.token(i),
            prior.token(i)
        )));
    }
    Ok(())
}

fn checked_score(
    scorer: &dyn Scorer,
    ctx: &ScoreContext<'_>,
    size: usize,
) -> Result<LogitVector, DecodeError> {
    let logits = scorer.score(ctx)?;
    if logits.len() != size {
        return Err(DecodeError::LogitLength {
            expected: size,
            actual: logits.len(),
        });
    }
    Ok(logits)
}

/// Session id used for all scorer queries of one generation.
pub fn session_id(seed: u64) -> String {
    format!("gen-{seed:016x}")
}

/// Runs one generation. The expert sees grounding context; the prior is
/// queried with the same tokens and `include_grounding = false`.
pub fn generate(
    expert: &dyn Scorer,
    prior: Option<&dyn Scorer>,
    prompt: &[usize],
    config: &DecodingConfig,
) -> Result<GenerationResult, DecodeError> {
    config.validate()?;
    let vocab = expert.vocabulary();
    let size = vocab.size();
    if let Some(&bad) = prompt.iter().find(|&&t| t >= size) {
        return Err(DecodeError::PromptToken(bad));
    }
    let prior = if config.method.uses_prior() {
        let prior = prior.ok_or(DecodeError::MissingPrior(config.method))?;
        check_vocabularies(vocab, prior.vocabulary())?;
        Some(prior)
    } else {
        None
    };
    let policy = config.effective_weight();
    let session = session_id(config.seed);
    let mut rng = SamplingRng::new(config.seed);
    let mut tokens = Vec::with_capacity(config.max_new_tokens.min(1024));
    let mut steps = config.trace.then(Vec::new);
    let mut stop_reason = StopReason::MaxTokens;

    while tokens.len() < config.max_new_tokens {
        let ctx = ScoreContext {
            session_id: &session,
            prompt,
            generated: &tokens,
            include_grounding: true,
        };
        let expert_logits = checked_score(expert, &ctx, size)?;
        let token = match (config.method, prior) {
            (Method::Greedy, _) => {
                let dist = softmax(&expert_logits, config.temperature)?;
                select_token(&dist, Selection::Greedy, &mut rng)
            }
            (Method::Sample, _) => {
                let dist = softmax(&expert_logits, config.temperature)?;
                select_token(&dist, Selection::Sample, &mut rng)
            }
            (Method::Nucleus, _) => {
                let dist = softmax(&expert_logits, config.temperature)?;
                let nucleus = nucleus_set(&dist, config.nucleus_p)?;
                sample_from_set(&dist, &nucleus, &mut rng)
            }
            (Method::Lcd | Method::CdStatic, Some(prior)) => {
                let prior_ctx = ScoreContext {
                    include_grounding: false,
                    ..ctx
                };
                let prior_logits = checked_score(prior, &prior_ctx, size)?;
                let (model_t, final_t) = match config.temperature_stage {
                    TemperatureStage::PerModel => (config.temperature, 1.0),
                    TemperatureStage::PostContrast => (1.0, config.temperature),
                };
                let p_expert = softmax(&expert_logits, model_t)?;
                let p_prior = softmax(&prior_logits, model_t)?;
                let step = contrast_step(
                    &p_expert,
                    &p_prior,
                    config.alpha,
                    &policy,
                    config.prior_support,
                )?;
                let dist = softmax(&step.combined, final_t)?;
                let token = select_token(&dist, Selection::Sample, &mut rng);
                debug_assert!(step.plausible.contains(token));
                if let Some(steps) = steps.as_mut() {
                    steps.push(step);
                }
                token
            }
            (method @ (Method::Lcd | Method::CdStatic), None) => {
                return Err(DecodeError::MissingPrior(method))
            }
        };
        tokens.push(token);
        if token == vocab.eos_id() {
            stop_reason = StopReason::Eos;
            break;
        }
    }

    Ok(GenerationResult {
        text: vocab.detokenize(&tokens),
        tokens,
        steps,
        stop_reason,
    })
}
