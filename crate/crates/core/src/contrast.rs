//! Candidate truncation and contrastive logit combination.
//!
//! The combined score of a candidate token `x` is
//! `(1 + w) ln p_expert(x) - w ln p_prior(x)`, where `w` is either a fixed
//! weight or the fixed weight divided by the prior's entropy. Tokens outside
//! the candidate set are excluded.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{entropy, Logit, LogitVector, ProbabilityDistribution};

/// Default lower bound on the prior entropy used by the dynamic weight.
pub const DEFAULT_ENTROPY_FLOOR: f64 = 0.1;
/// Prior probabilities are clamped to this value in smoothed mode.
pub const PRIOR_SMOOTHING_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastError {
    #[error("alpha must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("nucleus mass must lie in (0, 1], got {0}")]
    InvalidNucleusMass(f64),
    #[error("top-k requires k >= 1")]
    InvalidTopK,
    #[error("invalid weight policy: {0}")]
    InvalidWeightPolicy(String),
    #[error("distributions have different lengths ({expert} vs {prior})")]
    LengthMismatch { expert: usize, prior: usize },
    #[error("prior assigns zero probability to candidate token {token}")]
    PriorSupport { token: usize },
    #[error("expert assigns zero probability to candidate token {token}")]
    ExpertSupport { token: usize },
    #[error("candidate set is empty")]
    EmptyCandidates,
}

/// Which rule produced a [`PlausibilitySet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TruncationRule {
    Adaptive { alpha: f64 },
    Nucleus { p: f64 },
    TopK { k: usize },
}

/// The candidate tokens that survive truncation at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilitySet {
    included: BTreeSet<usize>,
    rule: TruncationRule,
}

impl PlausibilitySet {
    /// Wraps an explicit index set. Fails on an empty set.
    pub fn from_indices(
        included: impl IntoIterator<Item = usize>,
        rule: TruncationRule,
    ) -> Result<Self, ContrastError> {
        let included: BTreeSet<usize> = included.into_iter().collect();
        if included.is_empty() {
            return Err(ContrastError::EmptyCandidates);
        }
        Ok(Self { included, rule })
    }

    pub fn contains(&self, token: usize) -> bool {
        self.included.contains(&token)
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + Clone + '_ {
        self.included.iter().copied()
    }

    pub fn rule(&self) -> TruncationRule {
        self.rule
    }
}

/// Adaptive plausibility: keep `v` with `p(v) >= alpha * max_w p(w)`.
pub fn plausibility_set(
    dist: &ProbabilityDistribution,
    alpha: f64,
) -> Result<PlausibilitySet, ContrastError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(ContrastError::InvalidAlpha(alpha));
    }
    let threshold = alpha * dist.max();
    let included = dist
        .probs()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= threshold)
        .map(|(i, _)| i)
        .collect();
    Ok(PlausibilitySet {
        included,
        rule: TruncationRule::Adaptive { alpha },
    })
}

/// Token indices by descending probability, lower index first on ties.
fn ranked(dist: &ProbabilityDistribution) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist.get(b).total_cmp(&dist.get(a)).then(a.cmp(&b)));
    order
}

/// Smallest descending-probability prefix whose mass reaches `p`.
///
/// With `p = 1` the set is the whole support, even when floating-point
/// accumulation falls short of exactly one.
pub fn nucleus_set(
    dist: &ProbabilityDistribution,
    p: f64,
) -> Result<PlausibilitySet, ContrastError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(ContrastError::InvalidNucleusMass(p));
    }
    let rule = TruncationRule::Nucleus { p };
    if p == 1.0 {
        return Ok(PlausibilitySet {
            included: dist.support().collect(),
            rule,
        });
    }
    let mut included = BTreeSet::new();
    let mut mass = 0.0;
    for token in ranked(dist) {
        if dist.get(token) == 0.0 {
            break;
        }
        included.insert(token);
        mass += dist.get(token);
        if mass >= p {
            break;
        }
    }
    Ok(PlausibilitySet { included, rule })
}

/// The `k` most probable tokens with non-zero probability.
pub fn top_k_set(
    dist: &ProbabilityDistribution,
    k: usize,
) -> Result<PlausibilitySet, ContrastError> {
    if k == 0 {
        return Err(ContrastError::InvalidTopK);
    }
    let mut included: BTreeSet<usize> = ranked(dist)
        .into_iter()
        .filter(|&t| dist.get(t) > 0.0)
        .take(k)
        .collect();
    if included.is_empty() {
        included.insert(dist.argmax());
    }
    Ok(PlausibilitySet {
        included,
        rule: TruncationRule::TopK { k },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Weight scales inversely with the prior's entropy.
    Dynamic,
    /// Fixed weight, i.e. plain contrastive decoding.
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightPolicy {
    pub mode: WeightMode,
    pub beta: f64,
    #[serde(default = "default_entropy_floor")]
    pub entropy_floor: f64,
}

fn default_entropy_floor() -> f64 {
    DEFAULT_ENTROPY_FLOOR
}

impl Default for WeightPolicy {
    fn default() -> Self {
        Self::dynamic(3.0)
    }
}

impl WeightPolicy {
    pub fn dynamic(beta: f64) -> Self {
        Self {
            mode: WeightMode::Dynamic,
            beta,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
        }
    }

    pub fn fixed(beta: f64) -> Self {
        Self {
            mode: WeightMode::Static,
            beta,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
        }
    }

    pub fn validate(&self) -> Result<(), ContrastError> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(ContrastError::InvalidWeightPolicy(format!(
                "beta must be finite and non-negative, got {}",
                self.beta
            )));
        }
        if !(self.entropy_floor.is_finite() && self.entropy_floor > 0.0) {
            return Err(ContrastError::InvalidWeightPolicy(format!(
                "entropy_floor must be finite and positive, got {}",
                self.entropy_floor
            )));
        }
        Ok(())
    }
}

/// Contrast strength for one step, given the prior's entropy in nats.
pub fn dynamic_weight(entropy_prior: f64, policy: &WeightPolicy) -> f64 {
    match policy.mode {
        WeightMode::Static => policy.beta,
        WeightMode::Dynamic => policy.beta / entropy_prior.max(policy.entropy_floor),
    }
}

/// How a zero prior probability on a candidate token is handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSupportMode {
    /// Reject with [`ContrastError::PriorSupport`].
    #[default]
    Strict,
    /// Clamp the prior probability to [`PRIOR_SMOOTHING_EPSILON`].
    Smoothed,
}

/// Contrastive combination on the candidate set; excluded elsewhere.
///
/// When `beta_t` is zero the prior term vanishes and the prior's support is
/// not consulted.
pub fn contrast_combine(
    p_expert: &ProbabilityDistribution,
    p_prior: &ProbabilityDistribution,
    plausible: &PlausibilitySet,
    beta_t: f64,
    support: PriorSupportMode,
) -> Result<LogitVector, ContrastError> {
    if p_expert.len() != p_prior.len() {
        return Err(ContrastError::LengthMismatch {
            expert: p_expert.len(),
            prior: p_prior.len(),
        });
    }
    if plausible.is_empty() {
        return Err(ContrastError::EmptyCandidates);
    }
    let mut combined = vec![Logit::Excluded; p_expert.len()];
    for token in plausible.iter() {
        let Some(&pe) = p_expert.probs().get(token) else {
            return Err(ContrastError::LengthMismatch {
                expert: p_expert.len(),
                prior: token + 1,
            });
        };
        if pe <= 0.0 {
            return Err(ContrastError::ExpertSupport { token });
        }
        let expert_term = (1.0 + beta_t) * pe.ln();
        let value = if beta_t == 0.0 {
            expert_term
        } else {
            let mut pp = p_prior.get(token);
            if pp <= 0.0 {
                match support {
                    PriorSupportMode::Strict => return Err(ContrastError::PriorSupport { token }),
                    PriorSupportMode::Smoothed => pp = PRIOR_SMOOTHING_EPSILON,
                }
            }
            expert_term - beta_t * pp.ln()
        };
        combined[token] = Logit::Value(value);
    }
    Ok(LogitVector::from_logits(combined))
}

/// Everything computed at one contrastive decoding step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastStep {
    pub beta_t: f64,
    pub entropy_prior: f64,
    pub plausible: PlausibilitySet,
    pub combined: LogitVector,
}

/// Truncates on the expert, weighs by the prior's entropy and combines.
pub fn contrast_step(
    p_expert: &ProbabilityDistribution,
    p_prior: &ProbabilityDistribution,
    alpha: f64,
    policy: &WeightPolicy,
    support: PriorSupportMode,
) -> Result<ContrastStep, ContrastError> {
    policy.validate()?;
    let plausible = plausibility_set(p_expert, alpha)?;
    let entropy_prior = entropy(p_prior);
    let beta_t = dynamic_weight(entropy_prior, policy);
    let combined = contrast_combine(p_expert, p_prior, &plausible, beta_t, support)?;
    Ok(ContrastStep {
        beta_t,
        entropy_prior,
        plausible,
        combined,
    })
}
