//! Answers produced by a model and the comparison rules used by every metric.
//!
//! An answer is either a labeled multiple-choice distribution, a parsed
//! integer, or an abstain marker. Abstains never match anything (including
//! other abstains) and are never correct.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tasks::Gold;

/// How a choice distribution was obtained from the backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ExtractionMethod {
    /// Next-token probabilities for each label token.
    TokenScores,
    /// `n` constrained samples at temperature 0, one label parsed from each.
    SampledVote { n: u32 },
}

/// Probability assigned to each choice label, renormalized over the label set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub entries: BTreeMap<String, f64>,
    pub chosen: String,
    pub renormalized: bool,
    pub extraction: ExtractionMethod,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistributionError {
    #[error("no labels supplied")]
    NoLabels,
    #[error("got {scores} scores for {labels} labels")]
    LengthMismatch { labels: usize, scores: usize },
    #[error("score for label {0} is negative or not finite")]
    BadScore(String),
}

impl AnswerDistribution {
    /// Builds a distribution from raw non-negative scores aligned with
    /// `labels`. Scores are renormalized to sum to one; if they are all zero
    /// the result is uniform. Ties go to the lowest label index.
    pub fn from_scores(
        labels: &[String],
        scores: &[f64],
        extraction: ExtractionMethod,
    ) -> Result<Self, DistributionError> {
        if labels.is_empty() {
            return Err(DistributionError::NoLabels);
        }
        if labels.len() != scores.len() {
            return Err(DistributionError::LengthMismatch {
                labels: labels.len(),
                scores: scores.len(),
            });
        }
        for (label, s) in labels.iter().zip(scores) {
            if !s.is_finite() || *s < 0.0 {
                return Err(DistributionError::BadScore(label.clone()));
            }
        }
        let total: f64 = scores.iter().sum();
        let probs: Vec<f64> = if total > 0.0 {
            scores.iter().map(|s| s / total).collect()
        } else {
            vec![1.0 / labels.len() as f64; labels.len()]
        };
        let mut best = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = i;
            }
        }
        Ok(Self {
            entries: labels.iter().cloned().zip(probs).collect(),
            chosen: labels[best].clone(),
            renormalized: true,
            extraction,
        })
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }
}

/// The answer a model gave for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Answer {
    Choice { distribution: AnswerDistribution },
    Integer { value: i64 },
    /// The answer could not be extracted; `raw` keeps the completion for audit.
    Abstain { raw: String },
}

/// Comparable identity of an answer, without its probabilities.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AnswerKey {
    Choice(String),
    Integer(i64),
}

impl Answer {
    pub fn key(&self) -> Option<AnswerKey> {
        match self {
            Answer::Choice { distribution } => Some(AnswerKey::Choice(distribution.chosen.clone())),
            Answer::Integer { value } => Some(AnswerKey::Integer(*value)),
            Answer::Abstain { .. } => None,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, Answer::Abstain { .. })
    }

    /// Same-answer test used by all matching metrics. Abstains never match.
    pub fn matches(&self, other: &Answer) -> bool {
        match (self.key(), other.key()) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// Exact choice or integer match against the gold answer.
    pub fn is_correct(&self, gold: &Gold) -> bool {
        match (self.key(), gold) {
            (Some(AnswerKey::Choice(label)), Gold::Choice(idx)) => {
                crate::prompts::choice_label(*idx).as_deref() == Some(label.as_str())
            }
            (Some(AnswerKey::Integer(v)), Gold::Integer(g)) => v == *g,
            _ => false,
        }
    }

    /// Short display form: the chosen label, the integer, or `abstain`.
    pub fn display(&self) -> String {
        match self {
            Answer::Choice { distribution } => distribution.chosen.clone(),
            Answer::Integer { value } => value.to_string(),
            Answer::Abstain { .. } => "abstain".to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| crate::prompts::choice_label(i).unwrap()).collect()
    }

    #[test]
    fn renormalizes_partial_scores() {
        let d = AnswerDistribution::from_scores(&labels(3), &[0.2, 0.2, 0.1], ExtractionMethod::TokenScores)
            .unwrap();
        assert!((d.entries["A"] - 0.4).abs() < 1e-12);
        assert!((d.entries["B"] - 0.4).abs() < 1e-12);
        assert!((d.entries["C"] - 0.2).abs() < 1e-12);
        assert_eq!(d.chosen, "A");
        assert!((d.total() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_lowest_label() {
        let d = AnswerDistribution::from_scores(&labels(5), &[1.0; 5], ExtractionMethod::TokenScores).unwrap();
        assert_eq!(d.chosen, "A");
        let d = AnswerDistribution::from_scores(&labels(4), &[0.0; 4], ExtractionMethod::TokenScores).unwrap();
        assert_eq!(d.chosen, "A");
        assert!((d.entries["D"] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn argmax_picks_favored_label() {
        let d = AnswerDistribution::from_scores(&labels(5), &[0.025, 0.025, 0.025, 0.9, 0.025], ExtractionMethod::TokenScores)
            .unwrap();
        assert_eq!(d.chosen, "D");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(AnswerDistribution::from_scores(&[], &[], ExtractionMethod::TokenScores).is_err());
        assert!(AnswerDistribution::from_scores(&labels(2), &[1.0], ExtractionMethod::TokenScores).is_err());
        assert!(AnswerDistribution::from_scores(&labels(2), &[1.0, f64::NAN], ExtractionMethod::TokenScores).is_err());
    }

    #[test]
    fn abstain_never_matches() {
        let a = Answer::Abstain { raw: String::new() };
        assert!(!a.matches(&a.clone()));
        let i = Answer::Integer { value: 3 };
        assert!(i.matches(&Answer::Integer { value: 3 }));
        assert!(!i.matches(&a));
        assert!(!a.is_correct(&Gold::Integer(3)));
    }
}
