//! Object-hallucination and overlap metrics: CHAIR, POPE and ROUGE-L.

use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no records")]
    Empty,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate item_id {item_id:?}")]
    DuplicateItem { line: usize, item_id: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptionRecord {
    pub item_id: String,
    pub mentioned_objects: BTreeSet<String>,
    pub ground_truth_objects: BTreeSet<String>,
    /// Generated description, whitespace tokenized for ROUGE-L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<String>,
    /// Reference caption, whitespace tokenized for ROUGE-L.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

impl DescriptionRecord {
    pub fn new(
        item_id: impl Into<String>,
        mentioned: impl IntoIterator<Item = impl Into<String>>,
        truth: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        Self {
            item_id: item_id.into(),
            mentioned_objects: mentioned.into_iter().map(Into::into).collect(),
            ground_truth_objects: truth.into_iter().map(Into::into).collect(),
            candidate: None,
            reference: None,
        }
    }

    pub fn hallucinated(&self) -> usize {
        self.mentioned_objects
            .difference(&self.ground_truth_objects)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopeRecord {
    pub item_id: String,
    pub prediction: Answer,
    pub label: Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChairScores {
    pub chairs: f64,
    pub chairi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopeReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

/// Sentence-level and instance-level CHAIR over whole descriptions.
///
/// `chairi` is 0 when nothing is mentioned at all.
pub fn chair(records: &[DescriptionRecord]) -> Result<ChairScores, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut with_hallucination = 0usize;
    let mut hallucinated = 0usize;
    let mut mentioned = 0usize;
    for r in records {
        let h = r.hallucinated();
        if h > 0 {
            with_hallucination += 1;
        }
        hallucinated += h;
        mentioned += r.mentioned_objects.len();
    }
    Ok(ChairScores {
        chairs: with_hallucination as f64 / records.len() as f64,
        chairi: if mentioned == 0 {
            0.0
        } else {
            hallucinated as f64 / mentioned as f64
        },
    })
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Confusion-matrix metrics with "yes" as the positive class.
pub fn pope_metrics(records: &[PopeRecord]) -> Result<PopeReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match (r.prediction, r.label) {
            (Answer::Yes, Answer::Yes) => tp += 1,
            (Answer::Yes, Answer::No) => fp += 1,
            (Answer::No, Answer::No) => tn += 1,
            (Answer::No, Answer::Yes) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(PopeReport {
        accuracy: ratio(tp + tn, records.len()),
        precision,
        recall,
        f1: f1_score(precision, recall),
        yes_ratio: ratio(tp + fp, records.len()),
    })
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F-measure with equal weight on LCS precision and recall.
/// Returns 0 if either sequence is empty.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    f1_score(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

/// ROUGE-L over whitespace tokens.
pub fn rouge_l_text(candidate: &str, reference: &str) -> f64 {
    let c: Vec<&str> = candidate.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    rouge_l(&c, &r)
}

/// Mean ROUGE-L over records carrying both `candidate` and `reference`.
pub fn mean_rouge_l(records: &[DescriptionRecord]) -> Option<f64> {
    let scores: Vec<f64> = records
        .iter()
        .filter_map(|r| {
            Some(rouge_l_text(
                r.candidate.as_deref()?,
                r.reference.as_deref()?,
            ))
        })
        .collect();
    (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
}

fn read_jsonl<T, R>(reader: R, id: impl Fn(&T) -> &str) -> Result<Vec<T>, MetricsError>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(id(&record).to_owned()) {
            return Err(MetricsError::DuplicateItem {
                line: i + 1,
                item_id: id(&record).to_owned(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_description_records(
    reader: impl BufRead,
) -> Result<Vec<DescriptionRecord>, MetricsError> {
    read_jsonl(reader, |r: &DescriptionRecord| &r.item_id)
}

pub fn read_pope_records(reader: impl BufRead) -> Result<Vec<PopeRecord>, MetricsError> {
    read_jsonl(reader, |r: &PopeRecord| &r.item_id)
}
