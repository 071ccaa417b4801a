//! Run manifests: every setting that affects the numbers, sealed once.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Backends, InterventionConfig, RunConfig};
use super::RunError;
use crate::gateway::{SamplingParams, MISTAKE_MAX_TOKENS};
use crate::interventions::{FILLER_STEP, FILLER_UNIT};
use crate::metrics::{ABSTAIN_POLICY, AOC_RULE, BOOTSTRAP_METHOD, PERCENTILE_RULE, TIE_BREAK};
use crate::prompts::{prompt_fingerprint, TurnLayout, STEP_JOINER};
use crate::segment::Segmenter;
use crate::tasks::Question;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub name: String,
    pub source: String,
    pub questions: usize,
    /// Hash of the questions as stored in `questions.jsonl`.
    pub questions_hash: String,
}

/// Pinned conventions, echoed so reports can be interpreted without code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    pub aoc_rule: String,
    pub percentile_rule: String,
    pub tie_break: String,
    pub abstain_policy: String,
    pub filler_unit: String,
    pub filler_step: usize,
    pub filler_cap: String,
    pub mistake_max_tokens: u32,
    pub mistake_extraction: String,
    pub paraphrase_extraction: String,
    pub continuation_params: String,
    pub score_fallback: String,
    pub integer_answer: String,
    pub bootstrap: String,
    pub bootstrap_resamples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmenterEntry {
    pub id: String,
    pub joiner: String,
    pub abbreviations: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: u32,
    pub run_id: String,
    pub created_at: String,
    pub tool_version: String,
    pub tasks: Vec<TaskEntry>,
    pub backends: Backends,
    pub sampling: SamplingParams,
    pub samples_per_question: u32,
    pub seed: u64,
    pub segmenter: SegmenterEntry,
    pub interventions: InterventionConfig,
    pub knobs: Knobs,
    pub prompt_hash: String,
    pub turn_separator: String,
}

pub fn questions_hash(questions: &[Question]) -> String {
    let mut h = Sha256::new();
    for q in questions {
        h.update(serde_json::to_string(q).expect("question serializes").as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn build(
        cfg: &RunConfig,
        backends: &Backends,
        tasks: &[(String, String, Vec<Question>)],
        segmenter: &dyn Segmenter,
    ) -> Self {
        Self {
            schema: 1,
            run_id: String::new(),
            created_at: cfg.created_at.clone().unwrap_or_default(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            tasks: tasks
                .iter()
                .map(|(name, source, qs)| TaskEntry {
                    name: name.clone(),
                    source: source.clone(),
                    questions: qs.len(),
                    questions_hash: questions_hash(qs),
                })
                .collect(),
            backends: backends.clone(),
            sampling: cfg.sampling.clone(),
            samples_per_question: cfg.samples_per_question,
            seed: cfg.seed,
            segmenter: SegmenterEntry {
                id: segmenter.id(),
                joiner: segmenter.joiner().to_string(),
                abbreviations: cfg.segmenter.abbreviations.clone(),
            },
            interventions: cfg.interventions.clone(),
            knobs: Knobs {
                aoc_rule: AOC_RULE.into(),
                percentile_rule: PERCENTILE_RULE.into(),
                tie_break: TIE_BREAK.into(),
                abstain_policy: ABSTAIN_POLICY.into(),
                filler_unit: FILLER_UNIT.into(),
                filler_step: FILLER_STEP,
                filler_cap: "smallest multiple of the step at or above the longest CoT, inclusive".into(),
                mistake_max_tokens: MISTAKE_MAX_TOKENS,
                mistake_extraction: "first sentence, else first line, else whole; one retry when empty".into(),
                paraphrase_extraction: format!("text up to the first closing quote; steps joined with {STEP_JOINER:?}"),
                continuation_params: "same as CoT sampling".into(),
                score_fallback: "greedy constrained vote when token scores are unavailable".into(),
                integer_answer: "greedy, parsed between <answer> tags; abstain otherwise".into(),
                bootstrap: BOOTSTRAP_METHOD.into(),
                bootstrap_resamples: cfg.report.bootstrap_resamples,
            },
            prompt_hash: prompt_fingerprint(),
            turn_separator: TurnLayout::default().separator,
        }
    }

    /// Hash over every setting that can change results: excludes `run_id`,
    /// `created_at` and backend rate limits and retry policy.
    pub fn content_hash(&self) -> String {
        let mut stripped = Self { run_id: String::new(), created_at: String::new(), ..self.clone() };
        for b in [&mut stripped.backends.cot, &mut stripped.backends.mistake, &mut stripped.backends.paraphrase] {
            b.limits = Default::default();
            b.retry = Default::default();
        }
        hex::encode(Sha256::digest(serde_json::to_string(&stripped).expect("manifest serializes").as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| RunError::Config(format!("no manifest at {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| RunError::Integrity(format!("{}: {e}", path.display())))
    }

    /// Writes the manifest, or checks that an existing one agrees.
    pub fn seal(&self, dir: &Path) -> Result<Self, RunError> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            let existing = Self::load(dir)?;
            if existing.content_hash() != self.content_hash() || existing.run_id != self.run_id {
                return Err(RunError::Config(format!(
                    "run {} already exists with different settings; choose another run_id",
                    self.run_id
                )));
            }
            return Ok(existing);
        }
        let mut sealed = self.clone();
        if sealed.created_at.is_empty() {
            sealed.created_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
        }
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        let mut text = serde_json::to_string_pretty(&sealed).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&tmp, text).map_err(|e| RunError::Io(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| RunError::Io(e.to_string()))?;
        Ok(sealed)
    }
}
