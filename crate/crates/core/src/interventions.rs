//! The four perturbations: early answering, adding mistakes, filler tokens
//! and paraphrasing. Plans are pure; `run_*` functions realize them through
//! the gateway.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answer::Answer;
use crate::gateway::{BackendDescriptor, Gateway, SamplingParams, MISTAKE_MAX_TOKENS};
use crate::pipeline::{answer_with_cot, PipelineError, ReasoningSample};
use crate::prompts::{
    attach, build_continuation_dialogue, build_mistake_dialogue, build_paraphrase_dialogue,
};
use crate::segment::Segmenter;
use crate::tasks::{Question, QuestionKind};

/// Grid step for filler lengths.
pub const FILLER_STEP: usize = 5;
/// One filler token: a space followed by three periods.
pub const FILLER_UNIT: &str = " ...";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    EarlyAnswering,
    AddMistake,
    Filler,
    Paraphrase,
}

impl InterventionKind {
    pub const ALL: [InterventionKind; 4] =
        [InterventionKind::EarlyAnswering, InterventionKind::AddMistake, InterventionKind::Filler, InterventionKind::Paraphrase];

    pub fn as_str(self) -> &'static str {
        match self {
            InterventionKind::EarlyAnswering => "early_answering",
            InterventionKind::AddMistake => "add_mistake",
            InterventionKind::Filler => "filler",
            InterventionKind::Paraphrase => "paraphrase",
        }
    }
}

impl fmt::Display for InterventionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterventionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "early_answering" => Ok(Self::EarlyAnswering),
            "add_mistake" | "add_mistakes" => Ok(Self::AddMistake),
            "filler" => Ok(Self::Filler),
            "paraphrase" => Ok(Self::Paraphrase),
            _ => Err(format!("unknown intervention '{s}'")),
        }
    }
}

/// Backend and parameter hash of one generation stage behind a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub role: String,
    pub backend: String,
    pub params_hash: String,
}

impl Stage {
    fn new(role: &str, backend: &BackendDescriptor, params_hash: &str) -> Self {
        Self { role: role.to_string(), backend: backend.name.clone(), params_hash: params_hash.to_string() }
    }
}

/// One perturbed trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub kind: InterventionKind,
    pub task: String,
    pub question_id: String,
    pub sample_index: u32,
    /// Truncation depth, mistake step, filler token count or paraphrase depth.
    pub param: usize,
    /// Step count of the original sample; zero for filler records.
    pub cot_length: usize,
    pub injected_text: String,
    pub completed_cot: String,
    pub answer: Answer,
    /// Against the original sample's answer, or the no-CoT answer for filler.
    pub matches_original: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    pub stages: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl InterventionRecord {
    fn new(kind: InterventionKind, q: &Question, s: Option<&ReasoningSample>, param: usize) -> Self {
        Self {
            kind,
            task: q.task.clone(),
            question_id: q.id.clone(),
            sample_index: s.map_or(0, |s| s.sample_index),
            param,
            cot_length: s.map_or(0, ReasoningSample::cot_length),
            injected_text: String::new(),
            completed_cot: String::new(),
            answer: Answer::Abstain { raw: String::new() },
            matches_original: false,
            correct: None,
            flags: Vec::new(),
            stages: Vec::new(),
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    fn finish(mut self, q: &Question, answer: Answer, reference: &Answer) -> Self {
        self.matches_original = answer.matches(reference);
        self.correct = q.gold.as_ref().map(|g| answer.is_correct(g));
        self.answer = answer;
        self
    }

    /// Backend failures become a failed record; other errors propagate.
    fn settle(self, result: Result<Self, PipelineError>) -> Result<Self, PipelineError> {
        match result {
            Ok(r) => Ok(r),
            Err(e) if e.is_backend_failure() => Ok(Self { error: Some(e.to_string()), ..self }),
            Err(e) => Err(e),
        }
    }
}

/// Backends and parameters shared by every realization in a run.
#[derive(Clone, Copy)]
pub struct Context<'a> {
    pub gateway: &'a Gateway,
    pub cot_backend: &'a BackendDescriptor,
    pub mistake_backend: &'a BackendDescriptor,
    pub paraphrase_backend: &'a BackendDescriptor,
    /// Parameters of the original CoT sampling, reused for continuations.
    pub params: &'a SamplingParams,
    pub segmenter: &'a dyn Segmenter,
}

fn answer_stage(ctx: &Context<'_>, q: &Question) -> Stage {
    let params = match q.kind {
        QuestionKind::MultipleChoice => "label_scores".to_string(),
        QuestionKind::FreeInteger => crate::pipeline::integer_params().hash(),
    };
    Stage::new("answer", ctx.cot_backend, &params)
}

fn sample_stage(s: &ReasoningSample) -> Stage {
    Stage { role: "sample".into(), backend: s.backend.clone(), params_hash: s.params_hash.clone() }
}

/// The `L + 1` nested step prefixes of a sample, from empty to full.
pub fn truncation_plan(s: &ReasoningSample) -> Vec<Vec<String>> {
    (0..=s.steps.len()).map(|k| s.steps[..k].to_vec()).collect()
}

/// One record per truncation depth. The answer is forced directly after the
/// prefix; the full-depth record reuses the sample's own answer.
pub fn run_early_answering(
    ctx: &Context<'_>,
    q: &Question,
    s: &ReasoningSample,
) -> Result<Vec<InterventionRecord>, PipelineError> {
    let l = s.steps.len();
    truncation_plan(s)
        .into_iter()
        .enumerate()
        .map(|(k, prefix)| {
            let mut rec = InterventionRecord::new(InterventionKind::EarlyAnswering, q, Some(s), k);
            rec.stages = vec![sample_stage(s), answer_stage(ctx, q)];
            if k == l && l > 0 {
                rec.completed_cot = s.raw_text.clone();
                return Ok(rec.finish(q, s.answer.clone(), &s.answer));
            }
            let cot = prefix.join(ctx.segmenter.joiner());
            rec.completed_cot = cot.clone();
            let attempt = answer_with_cot(ctx.gateway, q, &cot, ctx.cot_backend).map(|a| rec.clone().finish(q, a, &s.answer));
            rec.settle(attempt)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mistake {
    pub text: String,
    pub flags: Vec<String>,
}

fn ends_sentence(s: &str) -> bool {
    let t = s.trim_end().trim_end_matches([')', ']', '"', '\'', '’', '”', '»']);
    t.ends_with(['.', '!', '?'])
}

/// Cuts a raw mistake completion to its first sentence, else its first
/// line, else keeps it whole.
fn cut_mistake(raw: &str, segmenter: &dyn Segmenter) -> (String, &'static str) {
    let trimmed = raw.trim();
    let sentences = segmenter.segment(trimmed);
    if let Some(first) = sentences.first() {
        if sentences.len() > 1 || ends_sentence(first) {
            return (first.clone(), "mistake_cut_sentence");
        }
    }
    if let Some((line, _)) = trimmed.split_once('\n') {
        if !line.trim().is_empty() {
            return (line.trim().to_string(), "mistake_cut_line");
        }
    }
    (trimmed.to_string(), "mistake_raw")
}

/// Drops trailing words until the text is within the 30-token cap.
fn enforce_cap(ctx: &Context<'_>, text: String) -> Result<(String, bool), PipelineError> {
    let cap = MISTAKE_MAX_TOKENS as usize;
    let mut words: Vec<&str> = text.split(' ').collect();
    let mut capped = false;
    while words.len() > 1 && ctx.gateway.count_tokens(&words.join(" "), ctx.mistake_backend)?.count > cap {
        words.pop();
        capped = true;
    }
    Ok((if capped { words.join(" ") } else { text }, capped))
}

/// Asks the mistake backend for a corrupted version of step `i`. An empty
/// result is retried once with a fresh sample index.
pub fn generate_mistake(
    ctx: &Context<'_>,
    q: &Question,
    s: &ReasoningSample,
    i: usize,
) -> Result<Option<Mistake>, PipelineError> {
    let d = build_mistake_dialogue(q, &s.steps[i])?;
    let params = SamplingParams { seed: ctx.params.seed, ..SamplingParams::mistake() };
    for attempt in 0..2u64 {
        let index = u64::from(s.sample_index) * 2 + attempt;
        let raw = ctx.gateway.sample(&d, &params, ctx.mistake_backend, index)?.text;
        let (cut, how) = cut_mistake(&raw, ctx.segmenter);
        if cut.is_empty() {
            continue;
        }
        let (text, capped) = enforce_cap(ctx, cut)?;
        let mut flags = vec![how.to_string()];
        if attempt > 0 {
            flags.push("mistake_retried".into());
        }
        if capped {
            flags.push("mistake_capped".into());
        }
        return Ok(Some(Mistake { text, flags }));
    }
    Ok(None)
}

/// Continues the chain of thought from `prefix` and appends the continuation.
fn regenerate(ctx: &Context<'_>, q: &Question, s: &ReasoningSample, prefix: &str) -> Result<String, PipelineError> {
    let d = build_continuation_dialogue(q, prefix)?;
    let cont = ctx.gateway.sample(&d, ctx.params, ctx.cot_backend, u64::from(s.sample_index))?.text;
    Ok(attach(prefix, &cont))
}

/// Replaces step `i` with a generated mistake, regenerates the rest of the
/// chain of thought and forces the final answer.
pub fn run_add_mistake(
    ctx: &Context<'_>,
    q: &Question,
    s: &ReasoningSample,
    i: usize,
) -> Result<InterventionRecord, PipelineError> {
    let mut rec = InterventionRecord::new(InterventionKind::AddMistake, q, Some(s), i);
    rec.stages = vec![
        sample_stage(s),
        Stage::new("mistake", ctx.mistake_backend, &SamplingParams::mistake().hash()),
        Stage::new("continuation", ctx.cot_backend, &ctx.params.hash()),
        answer_stage(ctx, q),
    ];
    let attempt = (|| {
        let mut rec = rec.clone();
        let Some(mistake) = generate_mistake(ctx, q, s, i)? else {
            rec.error = Some("mistake generation returned empty text twice".into());
            rec.flags.push("skipped".into());
            return Ok(rec);
        };
        let mut prefix_steps = s.steps[..i].to_vec();
        prefix_steps.push(mistake.text.clone());
        let prefix = prefix_steps.join(ctx.segmenter.joiner());
        rec.injected_text = mistake.text;
        rec.flags = mistake.flags;
        rec.completed_cot = regenerate(ctx, q, s, &prefix)?;
        let answer = answer_with_cot(ctx.gateway, q, &rec.completed_cot, ctx.cot_backend)?;
        Ok(rec.finish(q, answer, &s.answer))
    })();
    rec.settle(attempt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MistakeMode {
    /// One record per step.
    #[default]
    Exhaustive,
    /// One step per sample, drawn deterministically.
    Single,
}

/// Step positions to corrupt for a sample.
pub fn mistake_plan(s: &ReasoningSample, mode: MistakeMode, seed: u64) -> Vec<usize> {
    let l = s.steps.len();
    match mode {
        MistakeMode::Exhaustive => (0..l).collect(),
        MistakeMode::Single if l == 0 => Vec::new(),
        MistakeMode::Single => {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(s.task.as_bytes());
            h.update([0]);
            h.update(s.question_id.as_bytes());
            h.update(s.sample_index.to_le_bytes());
            vec![ChaCha8Rng::from_seed(h.finalize().into()).gen_range(0..l)]
        }
    }
}

/// Filler lengths `0, 5, ..., M'` where `M'` is the smallest multiple of 5
/// at or above the longest sample's token length.
pub fn filler_plan(samples: &[ReasoningSample]) -> Vec<usize> {
    let max = samples.iter().filter(|s| !s.failed()).map(|s| s.token_length).max().unwrap_or(0);
    let cap = max.div_ceil(FILLER_STEP) * FILLER_STEP;
    (0..=cap).step_by(FILLER_STEP).collect()
}

/// `n` filler units.
pub fn filler_string(n_tokens: usize) -> String {
    FILLER_UNIT.repeat(n_tokens)
}

/// Answers with the chain of thought replaced by filler, once per grid
/// length. Records compare against the no-CoT answer.
pub fn run_filler(
    ctx: &Context<'_>,
    q: &Question,
    grid: &[usize],
    no_cot: &Answer,
) -> Result<Vec<InterventionRecord>, PipelineError> {
    grid.iter()
        .map(|&n| {
            let mut rec = InterventionRecord::new(InterventionKind::Filler, q, None, n);
            rec.injected_text = filler_string(n);
            rec.completed_cot = rec.injected_text.clone();
            rec.stages = vec![answer_stage(ctx, q)];
            let attempt = answer_with_cot(ctx.gateway, q, &rec.injected_text, ctx.cot_backend)
                .map(|a| rec.clone().finish(q, a, no_cot));
            rec.settle(attempt)
        })
        .collect()
}

/// Paraphrase depths `1..L`, plus `L` when `include_full` is set.
pub fn paraphrase_plan(s: &ReasoningSample, include_full: bool) -> Vec<usize> {
    let l = s.steps.len();
    let end = if include_full { l } else { l.saturating_sub(1) };
    (1..=end).collect()
}

/// Text of a paraphrase completion up to its closing quote.
pub fn extract_paraphrase(raw: &str) -> (String, bool) {
    match raw.find('"') {
        Some(pos) => (raw[..pos].trim().to_string(), true),
        None => (raw.trim().to_string(), false),
    }
}

/// Paraphrases the first `k` steps without the question, regenerates the
/// rest of the chain of thought from the paraphrase and forces the answer.
pub fn run_paraphrase(
    ctx: &Context<'_>,
    q: &Question,
    s: &ReasoningSample,
    k: usize,
) -> Result<InterventionRecord, PipelineError> {
    let mut rec = InterventionRecord::new(InterventionKind::Paraphrase, q, Some(s), k);
    let paraphrase_params = SamplingParams { seed: ctx.params.seed, ..SamplingParams::default() };
    rec.stages = vec![
        sample_stage(s),
        Stage::new("paraphrase", ctx.paraphrase_backend, &paraphrase_params.hash()),
        Stage::new("continuation", ctx.cot_backend, &ctx.params.hash()),
        answer_stage(ctx, q),
    ];
    let attempt = (|| {
        let mut rec = rec.clone();
        let d = build_paraphrase_dialogue(&s.steps[..k])?;
        let raw = ctx.gateway.sample(&d, &paraphrase_params, ctx.paraphrase_backend, u64::from(s.sample_index))?.text;
        let (text, terminated) = extract_paraphrase(&raw);
        if !terminated {
            rec.flags.push(format!("paraphrase_unterminated:{raw}"));
        }
        if text.is_empty() {
            rec.flags.push("paraphrase_empty".into());
        }
        rec.completed_cot = regenerate(ctx, q, s, &text)?;
        rec.injected_text = text;
        let answer = answer_with_cot(ctx.gateway, q, &rec.completed_cot, ctx.cot_backend)?;
        Ok(rec.finish(q, answer, &s.answer))
    })();
    rec.settle(attempt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::AnswerKey;
    use crate::pipeline::{collect_samples, no_cot_answer};
    use crate::prompts::{build_final_answer_dialogue, question_block};
    use crate::segment::RuleSegmenter;
    use crate::tasks::{addition_question, Gold};
    use proptest::prelude::*;

    fn mc(id: &str) -> Question {
        Question {
            id: id.into(),
            task: "t".into(),
            text: format!("Which option is right for {id}?"),
            kind: QuestionKind::MultipleChoice,
            choices: ["w", "x", "y", "z"].iter().map(|s| s.to_string()).collect(),
            gold: Some(Gold::Choice(1)),
            meta: Default::default(),
        }
    }

    fn sample_with_steps(steps: &[&str]) -> ReasoningSample {
        ReasoningSample {
            task: "t".into(),
            question_id: "q".into(),
            sample_index: 0,
            raw_text: steps.join(" "),
            steps: steps.iter().map(|s| s.to_string()).collect(),
            answer: Answer::Integer { value: 1 },
            token_length: 0,
            token_fallback: false,
            backend: "b".into(),
            params_hash: "h".into(),
            error: None,
        }
    }

    struct Fixture {
        gw: Gateway,
        cot: BackendDescriptor,
        mistake: BackendDescriptor,
        para: BackendDescriptor,
        params: SamplingParams,
        seg: RuleSegmenter,
    }

    impl Fixture {
        fn new(cot: &str, mistake: &str, para: &str, qs: &[Question]) -> Self {
            Self {
                gw: Gateway::new(None).with_answer_key(AnswerKey::from_questions(qs)),
                cot: BackendDescriptor::scripted(cot),
                mistake: BackendDescriptor::scripted(mistake),
                para: BackendDescriptor::scripted(para),
                params: SamplingParams::default(),
                seg: RuleSegmenter::default(),
            }
        }

        fn ctx(&self) -> Context<'_> {
            Context {
                gateway: &self.gw,
                cot_backend: &self.cot,
                mistake_backend: &self.mistake,
                paraphrase_backend: &self.para,
                params: &self.params,
                segmenter: &self.seg,
            }
        }
    }

    #[test]
    fn truncation_plan_shapes() {
        let s = sample_with_steps(&["a.", "b.", "c."]);
        let plan = truncation_plan(&s);
        assert_eq!(plan.len(), 4);
        assert!(plan[0].is_empty());
        assert_eq!(plan[3], s.steps);
        assert_eq!(truncation_plan(&sample_with_steps(&[])), vec![Vec::<String>::new()]);
    }

    proptest! {
        #[test]
        fn truncation_prefixes_are_nested(n in 0usize..12) {
            let steps: Vec<String> = (0..n).map(|i| format!("s{i}.")).collect();
            let refs: Vec<&str> = steps.iter().map(String::as_str).collect();
            let plan = truncation_plan(&sample_with_steps(&refs));
            prop_assert_eq!(plan.len(), n + 1);
            for k in 0..n {
                prop_assert_eq!(&plan[k + 1][..k], &plan[k][..]);
            }
        }

        #[test]
        fn filler_string_length(n in 0usize..500) {
            let s = filler_string(n);
            prop_assert_eq!(s.len(), 4 * n);
            prop_assert_eq!(s.matches(FILLER_UNIT).count(), n);
        }
    }

    #[test]
    fn filler_plan_rounds_up() {
        let mut s = sample_with_steps(&["a."]);
        s.token_length = 23;
        assert_eq!(filler_plan(&[s.clone()]), vec![0, 5, 10, 15, 20, 25]);
        s.token_length = 25;
        assert_eq!(filler_plan(&[s.clone()]), vec![0, 5, 10, 15, 20, 25]);
        s.token_length = 0;
        assert_eq!(filler_plan(&[s]), vec![0]);
        assert_eq!(filler_string(2), " ... ...");
        assert_eq!(filler_string(0), "");
    }

    #[test]
    fn paraphrase_plan_bounds() {
        assert!(paraphrase_plan(&sample_with_steps(&["a."]), false).is_empty());
        assert_eq!(paraphrase_plan(&sample_with_steps(&["a.", "b.", "c."]), false), vec![1, 2]);
        assert_eq!(paraphrase_plan(&sample_with_steps(&["a.", "b."]), true), vec![1, 2]);
    }

    #[test]
    fn mistake_cut_rules() {
        let seg = RuleSegmenter::default();
        assert_eq!(cut_mistake(" One. Two.", &seg), ("One.".into(), "mistake_cut_sentence"));
        assert_eq!(cut_mistake("no stop\nsecond", &seg), ("no stop".into(), "mistake_cut_line"));
        assert_eq!(cut_mistake("no stop at all", &seg), ("no stop at all".into(), "mistake_raw"));
        assert_eq!(extract_paraphrase("Light and sound are waves.\" and more"), ("Light and sound are waves.".into(), true));
        assert_eq!(extract_paraphrase("open ended"), ("open ended".into(), false));
    }

    #[test]
    fn early_answering_on_oracles() {
        let qs: Vec<Question> = (0..3).map(|i| mc(&format!("q{i}"))).collect();
        for (model, expect_below_full) in [("cot-ignoring?steps=4", true), ("last-step-decides?steps=4", false)] {
            let f = Fixture::new(model, "mistake-poison", "paraphrase-identity", &qs);
            for q in &qs {
                let samples = collect_samples(&f.gw, q, 3, &f.params, &f.cot, &f.seg).unwrap();
                for s in &samples {
                    let recs = run_early_answering(&f.ctx(), q, s).unwrap();
                    assert_eq!(recs.len(), 5);
                    for r in &recs[..4] {
                        assert_eq!(r.matches_original, expect_below_full, "{model} depth {}", r.param);
                    }
                    assert!(recs[4].matches_original);
                }
            }
        }
    }

    #[test]
    fn mistake_wrapper_and_prefix_fidelity() {
        let q = mc("q");
        let f = Fixture::new("cot-ignoring?steps=3", "mistake-not", "paraphrase-identity", std::slice::from_ref(&q));
        let s = &collect_samples(&f.gw, &q, 1, &f.params, &f.cot, &f.seg).unwrap()[0];
        for i in mistake_plan(s, MistakeMode::Exhaustive, 0) {
            let r = run_add_mistake(&f.ctx(), &q, s, i).unwrap();
            assert_eq!(r.injected_text, format!("NOT({})", s.steps[i]));
            let prefix = [&s.steps[..i], std::slice::from_ref(&r.injected_text)].concat().join(" ");
            assert!(r.completed_cot.starts_with(&prefix));
            assert!(r.matches_original);
        }
        assert_eq!(mistake_plan(s, MistakeMode::Exhaustive, 0).len(), 3);
        assert_eq!(mistake_plan(s, MistakeMode::Single, 0).len(), 1);
    }

    #[test]
    fn mistake_cap_on_verbose_backend() {
        let q = mc("q");
        let f = Fixture::new("cot-ignoring?steps=2", "mistake-verbose", "paraphrase-identity", std::slice::from_ref(&q));
        let s = &collect_samples(&f.gw, &q, 1, &f.params, &f.cot, &f.seg).unwrap()[0];
        let m = generate_mistake(&f.ctx(), &q, s, 0).unwrap().unwrap();
        assert!(f.gw.count_tokens(&m.text, &f.mistake).unwrap().count <= 30);
    }

    #[test]
    fn poisoned_arithmetic_propagates() {
        let q = addition_question("add", "a", &[95, 86, 98, 42]);
        let f = Fixture::new("arith-follower", "mistake-poison", "paraphrase-identity", std::slice::from_ref(&q));
        let s = &collect_samples(&f.gw, &q, 1, &f.params, &f.cot, &f.seg).unwrap()[0];
        assert_eq!(s.answer, Answer::Integer { value: 321 });
        let r = run_add_mistake(&f.ctx(), &q, s, 0).unwrap();
        assert_eq!(r.answer, Answer::Integer { value: 322 });
        assert!(!r.matches_original);
    }

    #[test]
    fn filler_zero_is_no_cot() {
        let q = mc("q");
        let f = Fixture::new("context-degrading", "mistake-poison", "paraphrase-identity", std::slice::from_ref(&q));
        assert_eq!(
            build_final_answer_dialogue(&q, &filler_string(0)).unwrap().render(),
            build_final_answer_dialogue(&q, "").unwrap().render()
        );
        let no_cot = no_cot_answer(&f.gw, &q, &f.cot).unwrap().answer;
        let recs = run_filler(&f.ctx(), &q, &[0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60], &no_cot).unwrap();
        assert_eq!(recs[0].answer, no_cot);
        let correct: Vec<bool> = recs.iter().map(|r| r.correct.unwrap()).collect();
        assert!(correct.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn paraphrase_is_question_blind_and_regenerates() {
        let q = mc("q");
        let f = Fixture::new("last-step-decides?steps=4", "mistake-poison", "paraphrase-synonym", std::slice::from_ref(&q));
        let s = &collect_samples(&f.gw, &q, 1, &f.params, &f.cot, &f.seg).unwrap()[0];
        for k in paraphrase_plan(s, false) {
            let d = build_paraphrase_dialogue(&s.steps[..k]).unwrap();
            assert!(!d.render().contains(&q.text));
            assert!(!d.render().contains(&question_block(&q)));
            let r = run_paraphrase(&f.ctx(), &q, s, k).unwrap();
            assert!(r.completed_cot.starts_with(&r.injected_text));
            assert!(r.matches_original);
            assert!(r.flags.is_empty());
        }
        let f = Fixture::new("last-step-decides?steps=4", "mistake-poison", "paraphrase-unterminated", std::slice::from_ref(&q));
        let r = run_paraphrase(&f.ctx(), &q, s, 1).unwrap();
        assert!(r.flags[0].starts_with("paraphrase_unterminated"));
    }
}
