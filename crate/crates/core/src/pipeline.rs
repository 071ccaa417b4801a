//! Baseline artifacts per question: sampled chains of thought, their
//! segmented steps and answers, and the no-CoT answer.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::answer::Answer;
use crate::gateway::{BackendDescriptor, Gateway, GatewayError, SamplingParams, HUMAN_STOP};
use crate::prompts::{
    build_cot_dialogue, build_final_answer_dialogue, labels_for, PromptError, INTEGER_ANSWER_CLOSE,
    INTEGER_ANSWER_PREFIX,
};
use crate::segment::Segmenter;
use crate::tasks::{Question, QuestionKind};

pub const DEFAULT_SAMPLES_PER_QUESTION: u32 = 100;
/// Fraction of failed samples for one question above which collection aborts.
pub const MAX_FAILURE_RATE: f64 = 0.2;
/// Token budget for a forced free-integer answer.
pub const INTEGER_ANSWER_MAX_TOKENS: u32 = 16;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{failed} of {total} samples failed for question {question}")]
    TooManyFailures { question: String, failed: usize, total: usize },
}

impl PipelineError {
    pub fn is_backend_failure(&self) -> bool {
        match self {
            PipelineError::Gateway(e) => e.is_backend_failure(),
            PipelineError::TooManyFailures { .. } => true,
            PipelineError::Prompt(_) => false,
        }
    }
}

/// One sampled chain of thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningSample {
    pub task: String,
    pub question_id: String,
    pub sample_index: u32,
    pub raw_text: String,
    pub steps: Vec<String>,
    pub answer: Answer,
    pub token_length: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub token_fallback: bool,
    pub backend: String,
    pub params_hash: String,
    /// Set when the backend failed for this sample; the answer is then an
    /// empty abstain and the sample is excluded from every metric.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReasoningSample {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn cot_length(&self) -> usize {
        self.steps.len()
    }
}

/// The answer given with an empty chain of thought.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoCotRecord {
    pub task: String,
    pub question_id: String,
    pub answer: Answer,
    pub backend: String,
}

/// Number of samples observed at each length, with normalized weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub counts: BTreeMap<usize, usize>,
    pub weights: BTreeMap<usize, f64>,
}

impl LengthHistogram {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = BTreeMap::new();
        for len in lengths {
            *counts.entry(len).or_insert(0usize) += 1;
        }
        let total: usize = counts.values().sum();
        let weights = counts.iter().map(|(&len, &n)| (len, n as f64 / total as f64)).collect();
        Self { counts, weights }
    }

    /// Step-count histogram over the samples that did not fail.
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a ReasoningSample>) -> Self {
        Self::from_lengths(samples.into_iter().filter(|s| !s.failed()).map(ReasoningSample::cot_length))
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Extracts the first integer strictly between `<answer>` and `</answer>`.
pub fn parse_int_answer(text: &str) -> Option<i64> {
    let start = text.find(INTEGER_ANSWER_PREFIX)? + INTEGER_ANSWER_PREFIX.len();
    let len = text[start..].find(INTEGER_ANSWER_CLOSE)?;
    let payload = text[start..start + len].trim();
    let digits = payload.strip_prefix(['+', '-']).unwrap_or(payload);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    payload.parse().ok()
}

/// Decoding parameters for forced free-integer answers.
pub fn integer_params() -> SamplingParams {
    SamplingParams { stop_sequences: vec![HUMAN_STOP.to_string()], ..SamplingParams::greedy(INTEGER_ANSWER_MAX_TOKENS) }
}

/// Forces the final answer after `cot_text` (empty for the no-CoT condition).
/// Multiple-choice questions are scored over their labels; free-integer
/// questions are answered greedily and parsed, abstaining on failure.
pub fn answer_with_cot(
    gw: &Gateway,
    q: &Question,
    cot_text: &str,
    b: &BackendDescriptor,
) -> Result<Answer, PipelineError> {
    let d = build_final_answer_dialogue(q, cot_text)?;
    match q.kind {
        QuestionKind::MultipleChoice => match gw.score_choices(&d, &labels_for(q), b) {
            Ok(distribution) => Ok(Answer::Choice { distribution }),
            Err(GatewayError::NoLabel { raw }) => Ok(Answer::Abstain { raw }),
            Err(e) => Err(e.into()),
        },
        QuestionKind::FreeInteger => {
            let text = gw.sample(&d, &integer_params(), b, 0)?.text;
            let full = format!("{INTEGER_ANSWER_PREFIX}{text}");
            Ok(match parse_int_answer(&full) {
                Some(value) => Answer::Integer { value },
                None => Answer::Abstain { raw: text },
            })
        }
    }
}

pub fn no_cot_answer(gw: &Gateway, q: &Question, b: &BackendDescriptor) -> Result<NoCotRecord, PipelineError> {
    Ok(NoCotRecord {
        task: q.task.clone(),
        question_id: q.id.clone(),
        answer: answer_with_cot(gw, q, "", b)?,
        backend: b.name.clone(),
    })
}

/// Samples, segments and answers one chain of thought. Backend failures
/// yield a failed sample rather than an error.
pub fn collect_sample(
    gw: &Gateway,
    q: &Question,
    sample_index: u32,
    p: &SamplingParams,
    b: &BackendDescriptor,
    segmenter: &dyn Segmenter,
) -> Result<ReasoningSample, PipelineError> {
    let mut sample = ReasoningSample {
        task: q.task.clone(),
        question_id: q.id.clone(),
        sample_index,
        raw_text: String::new(),
        steps: Vec::new(),
        answer: Answer::Abstain { raw: String::new() },
        token_length: 0,
        token_fallback: false,
        backend: b.name.clone(),
        params_hash: p.hash(),
        error: None,
    };
    let result = (|| -> Result<(), PipelineError> {
        let d = build_cot_dialogue(q)?;
        sample.raw_text = gw.sample(&d, p, b, u64::from(sample_index))?.text;
        sample.steps = segmenter.segment(&sample.raw_text);
        let tokens = gw.count_tokens(&sample.raw_text, b)?;
        sample.token_length = tokens.count;
        sample.token_fallback = tokens.fallback;
        sample.answer = answer_with_cot(gw, q, &sample.raw_text, b)?;
        Ok(())
    })();
    match result {
        Ok(()) => Ok(sample),
        Err(e) if e.is_backend_failure() => {
            log::warn!("sample {} of {} failed: {e}", sample_index, q.id);
            Ok(ReasoningSample {
                raw_text: String::new(),
                steps: Vec::new(),
                answer: Answer::Abstain { raw: String::new() },
                token_length: 0,
                token_fallback: false,
                error: Some(e.to_string()),
                ..sample
            })
        }
        Err(e) => Err(e),
    }
}

/// Fails when more than [`MAX_FAILURE_RATE`] of a question's samples failed.
pub fn check_failures(question: &str, samples: &[ReasoningSample]) -> Result<(), PipelineError> {
    let failed = samples.iter().filter(|s| s.failed()).count();
    if failed as f64 > MAX_FAILURE_RATE * samples.len() as f64 {
        return Err(PipelineError::TooManyFailures { question: question.to_string(), failed, total: samples.len() });
    }
    Ok(())
}

/// Collects samples `0..n` in parallel, returned in index order.
pub fn collect_samples(
    gw: &Gateway,
    q: &Question,
    n: u32,
    p: &SamplingParams,
    b: &BackendDescriptor,
    segmenter: &dyn Segmenter,
) -> Result<Vec<ReasoningSample>, PipelineError> {
    let samples = (0..n)
        .into_par_iter()
        .map(|i| collect_sample(gw, q, i, p, b, segmenter))
        .collect::<Result<Vec<_>, _>>()?;
    check_failures(&q.id, &samples)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{AnswerKey, BackendError, ModelBackend};
    use crate::prompts::Dialogue;
    use crate::segment::RuleSegmenter;
    use crate::tasks::{addition_question, Gold};
    use std::sync::Arc;

    fn tv_question() -> Question {
        Question {
            id: "tv".into(),
            task: "aqua".into(),
            text: "In a certain country, 30% own a TV. Of those, 24% own four. What percent own four?".into(),
            kind: QuestionKind::MultipleChoice,
            choices: [".084%", "24%", "4.67%", "7.2%", "8.2%"].iter().map(|s| s.to_string()).collect(),
            gold: Some(Gold::Choice(3)),
            meta: Default::default(),
        }
    }

    #[test]
    fn parse_int_answer_rules() {
        assert_eq!(parse_int_answer("<answer>492</answer>"), Some(492));
        assert_eq!(parse_int_answer("<answer> 1228 </answer>"), Some(1228));
        assert_eq!(parse_int_answer("<answer>-7</answer>"), Some(-7));
        assert_eq!(parse_int_answer("answer is 12"), None);
        assert_eq!(parse_int_answer("<answer>12"), None);
        assert_eq!(parse_int_answer("<answer>1,228</answer>"), None);
        assert_eq!(parse_int_answer("<answer></answer>"), None);
    }

    #[test]
    fn fixed_script_gives_identical_samples() {
        let gw = Gateway::new(None);
        let b = BackendDescriptor::scripted("echo-fixed");
        let seg = RuleSegmenter::default();
        let samples = collect_samples(&gw, &tv_question(), 5, &SamplingParams::default(), &b, &seg).unwrap();
        assert_eq!(samples.len(), 5);
        for s in &samples {
            assert_eq!(s.steps.len(), 4);
            assert_eq!(s.raw_text, samples[0].raw_text);
            assert_eq!(s.answer.display(), "D");
        }
    }

    #[test]
    fn favoring_scorer_picks_d() {
        let gw = Gateway::new(None);
        let b = BackendDescriptor::scripted("favor?label=D");
        let a = answer_with_cot(&gw, &tv_question(), crate::gateway::scripted::AQUA_TV_REASONING, &b).unwrap();
        assert_eq!(a.display(), "D");
    }

    #[test]
    fn cot_ignoring_answer_independent_of_cot() {
        let q = tv_question();
        let gw = Gateway::new(None).with_answer_key(AnswerKey::from_questions(std::slice::from_ref(&q)));
        let b = BackendDescriptor::scripted("cot-ignoring");
        let a = answer_with_cot(&gw, &q, "", &b).unwrap();
        let c = answer_with_cot(&gw, &q, crate::gateway::scripted::AQUA_TV_REASONING, &b).unwrap();
        assert!(a.matches(&c));
    }

    #[test]
    fn integer_answers_and_abstain() {
        let q = addition_question("add", "a", &[264, 964]);
        let gw = Gateway::new(None);
        let a = answer_with_cot(&gw, &q, "", &BackendDescriptor::scripted("arith-follower")).unwrap();
        assert_eq!(a, Answer::Integer { value: 1228 });
        let a = answer_with_cot(&gw, &q, "", &BackendDescriptor::scripted("no-integer")).unwrap();
        assert!(a.is_abstain());
    }

    #[test]
    fn histogram_weights_sum_to_one() {
        let gw = Gateway::new(None);
        let b = BackendDescriptor::scripted("uniform-choice");
        let seg = RuleSegmenter::default();
        let samples = collect_samples(&gw, &tv_question(), 100, &SamplingParams::default(), &b, &seg).unwrap();
        let h = LengthHistogram::from_samples(&samples);
        assert_eq!(h.total(), 100);
        assert!((h.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn length_mix_matches_target_distribution() {
        let gw = Gateway::new(None);
        let b = BackendDescriptor::scripted("length-mix");
        let seg = RuleSegmenter::default();
        let samples = collect_samples(&gw, &tv_question(), 100, &SamplingParams::default(), &b, &seg).unwrap();
        let h = LengthHistogram::from_samples(&samples);
        let mid: usize = (3..=6).map(|l| h.counts.get(&l).copied().unwrap_or(0)).sum();
        assert_eq!(mid, 89);
        let mean = samples.iter().map(|s| s.steps.len()).sum::<usize>() as f64 / 100.0;
        assert_eq!(mean, 4.0);
    }

    struct Broken;
    impl ModelBackend for Broken {
        fn complete(&self, _: &Dialogue, _: &SamplingParams, i: u64) -> Result<String, BackendError> {
            if i.is_multiple_of(2) {
                Err(BackendError::Transient("down".into()))
            } else {
                Ok(" Fine.".into())
            }
        }
        fn label_scores(&self, _: &Dialogue, labels: &[String]) -> Result<Option<Vec<f64>>, BackendError> {
            Ok(Some(vec![1.0; labels.len()]))
        }
        fn token_count(&self, _: &str) -> Result<Option<usize>, BackendError> {
            Ok(None)
        }
    }

    #[test]
    fn failures_are_marked_then_abort() {
        let gw = Gateway::new(None).without_backoff_sleep();
        gw.register_backend("broken", Arc::new(Broken));
        let b = BackendDescriptor { name: "broken".into(), ..BackendDescriptor::scripted("x") };
        let seg = RuleSegmenter::default();
        let q = tv_question();
        let s = collect_sample(&gw, &q, 0, &SamplingParams::default(), &b, &seg).unwrap();
        assert!(s.failed());
        let s = collect_sample(&gw, &q, 1, &SamplingParams::default(), &b, &seg).unwrap();
        assert!(!s.failed());
        assert!(s.token_fallback);
        let err = collect_samples(&gw, &q, 10, &SamplingParams::default(), &b, &seg).unwrap_err();
        assert!(matches!(err, PipelineError::TooManyFailures { failed: 5, total: 10, .. }));
    }
}
