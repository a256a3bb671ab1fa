//! Probability and logit primitives shared by every decoding strategy.
//!
//! All arithmetic is done in `f64`. Tokens removed by truncation are carried
//! as [`Logit::Excluded`] rather than as a large negative number, so a
//! truncated vocabulary is represented exactly.

use std::collections::HashMap;
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating caller-supplied distributions.
pub const DIST_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("vocabulary must contain at least two tokens, got {0}")]
    VocabularyTooSmall(usize),
    #[error("duplicate token {0:?} in vocabulary")]
    DuplicateToken(String),
    #[error("eos id {eos_id} out of range for vocabulary of size {size}")]
    EosOutOfRange { eos_id: usize, size: usize },
    #[error("temperature must be finite and positive, got {0}")]
    InvalidTemperature(f64),
    #[error("every logit is excluded; the distribution has empty support")]
    EmptySupport,
    #[error("logit {index} is not finite ({value})")]
    NonFiniteLogit { index: usize, value: f64 },
    #[error("probability {index} = {value} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

/// Ordered token list with a distinguished end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocabulary", into = "RawVocabulary")]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos_id: usize,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVocabulary {
    tokens: Vec<String>,
    eos_id: usize,
}

impl TryFrom<RawVocabulary> for Vocabulary {
    type Error = DistError;

    fn try_from(raw: RawVocabulary) -> Result<Self, Self::Error> {
        Vocabulary::new(raw.tokens, raw.eos_id)
    }
}

impl From<Vocabulary> for RawVocabulary {
    fn from(v: Vocabulary) -> Self {
        RawVocabulary {
            tokens: v.tokens,
            eos_id: v.eos_id,
        }
    }
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos_id: usize) -> Result<Self, DistError> {
        if tokens.len() < 2 {
            return Err(DistError::VocabularyTooSmall(tokens.len()));
        }
        if eos_id >= tokens.len() {
            return Err(DistError::EosOutOfRange {
                eos_id,
                size: tokens.len(),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DistError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self {
            tokens,
            eos_id,
            index,
        })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos_id(&self) -> usize {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Joins token strings with single spaces, dropping the eos token.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos_id)
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A single log-odds entry, or the mask state for a token outside the
/// candidate set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Logit {
    Value(f64),
    Excluded,
}

impl Logit {
    pub fn value(self) -> Option<f64> {
        match self {
            Logit::Value(v) => Some(v),
            Logit::Excluded => None,
        }
    }

    pub fn is_excluded(self) -> bool {
        matches!(self, Logit::Excluded)
    }
}

impl Serialize for Logit {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Logit::Value(v) => serializer.serialize_f64(*v),
            Logit::Excluded => serializer.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Logit {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct LogitVisitor;

        impl Visitor<'_> for LogitVisitor {
            type Value = Logit;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a finite number or the string \"-inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Logit, E> {
                if v.is_finite() {
                    Ok(Logit::Value(v))
                } else {
                    Err(E::custom("non-finite logit"))
                }
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Logit, E> {
                Ok(Logit::Value(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Logit, E> {
                Ok(Logit::Value(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Logit, E> {
                if v == "-inf" {
                    Ok(Logit::Excluded)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        deserializer.deserialize_any(LogitVisitor)
    }
}

/// Next-token scores over a vocabulary, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<Logit>);

impl LogitVector {
    /// Builds a vector from raw values. `-inf` becomes [`Logit::Excluded`];
    /// NaN and `+inf` are rejected.
    pub fn from_values(values: &[f64]) -> Result<Self, DistError> {
        values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                if value == f64::NEG_INFINITY {
                    Ok(Logit::Excluded)
                } else if value.is_finite() {
                    Ok(Logit::Value(value))
                } else {
                    Err(DistError::NonFiniteLogit { index, value })
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }

    pub fn from_logits(logits: Vec<Logit>) -> Self {
        Self(logits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.0.get(i).and_then(|l| l.value())
    }

    pub fn logits(&self) -> &[Logit] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = Logit> + '_ {
        self.0.iter().copied()
    }

    /// Values with excluded entries mapped to `-inf`.
    pub fn to_values(&self) -> Vec<f64> {
        self.0
            .iter()
            .map(|l| l.value().unwrap_or(f64::NEG_INFINITY))
            .collect()
    }

    /// Lowest index among the largest non-excluded entries.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in self.0.iter().enumerate() {
            if let Logit::Value(v) = *v {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
        }
        best.map(|(i, _)| i)
    }
}

/// A normalized next-token distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbabilityDistribution(Vec<f64>);

impl ProbabilityDistribution {
    /// Validates entries in `[0, 1]` summing to one within
    /// [`DIST_SUM_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self, DistError> {
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(DistError::ProbabilityOutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > DIST_SUM_TOLERANCE {
            return Err(DistError::NotNormalized(sum));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, hot: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[hot] = 1.0;
        Self(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }

    /// Lowest index attaining the maximum probability.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, _)| i)
    }
}

/// Tempered softmax with max-subtraction. Excluded entries get probability 0.
pub fn softmax(
    logits: &LogitVector,
    temperature: f64,
) -> Result<ProbabilityDistribution, DistError> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(DistError::InvalidTemperature(temperature));
    }
    let max = logits
        .iter()
        .filter_map(Logit::value)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(DistError::EmptySupport);
    }
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|l| match l {
            Logit::Value(v) => ((v - max) / temperature).exp(),
            Logit::Excluded => 0.0,
        })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(ProbabilityDistribution(probs))
}

pub fn log_probs(dist: &ProbabilityDistribution) -> LogitVector {
    LogitVector(
        dist.0
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    Logit::Value(p.ln())
                } else {
                    Logit::Excluded
                }
            })
            .collect(),
    )
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(dist: &ProbabilityDistribution) -> f64 {
    -dist
        .0
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
