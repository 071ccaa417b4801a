//! Task corpus: normalized question records and synthetic addition problems.
//!
//! A task file is JSON Lines, one record per line:
//!
//! ```text
//! {"id": "q1", "task": "aqua", "text": "...", "kind": "multiple_choice",
//!  "choices": ["...", "..."], "gold": 3, "meta": {}}
//! ```
//!
//! `gold` is a choice index for `multiple_choice` and the integer value for
//! `free_integer`; it may be `null` for unlabeled items. `task` may be
//! omitted, in which case the loader's task name is used.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("cannot read task file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("invalid addition spec: {0}")]
    Spec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    MultipleChoice,
    FreeInteger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gold {
    Choice(usize),
    Integer(i64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawQuestion")]
pub struct Question {
    pub id: String,
    pub task: String,
    pub text: String,
    pub kind: QuestionKind,
    pub choices: Vec<String>,
    #[serde(serialize_with = "serialize_gold")]
    pub gold: Option<Gold>,
    pub meta: BTreeMap<String, String>,
}

impl Question {
    pub fn is_multiple_choice(&self) -> bool {
        self.kind == QuestionKind::MultipleChoice
    }

    fn check(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".into());
        }
        match self.kind {
            QuestionKind::MultipleChoice => {
                if self.choices.is_empty() {
                    return Err(format!("question {}: multiple_choice needs choices", self.id));
                }
                if self.choices.len() > crate::prompts::MAX_CHOICES {
                    return Err(format!(
                        "question {}: {} choices exceeds the {} label limit",
                        self.id,
                        self.choices.len(),
                        crate::prompts::MAX_CHOICES
                    ));
                }
                if let Some(Gold::Choice(g)) = self.gold {
                    if g >= self.choices.len() {
                        return Err(format!(
                            "question {}: gold index {} out of range for {} choices",
                            self.id,
                            g,
                            self.choices.len()
                        ));
                    }
                }
            }
            QuestionKind::FreeInteger => {
                if !self.choices.is_empty() {
                    return Err(format!("question {}: free_integer must have no choices", self.id));
                }
            }
        }
        Ok(())
    }
}

// Gold is stored as a bare JSON number; its meaning follows `kind`.
fn serialize_gold<S: serde::Serializer>(gold: &Option<Gold>, s: S) -> Result<S::Ok, S::Error> {
    match gold {
        Some(Gold::Choice(i)) => s.serialize_u64(*i as u64),
        Some(Gold::Integer(v)) => s.serialize_i64(*v),
        None => s.serialize_none(),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuestion {
    id: String,
    #[serde(default)]
    task: Option<String>,
    text: String,
    kind: QuestionKind,
    #[serde(default)]
    choices: Vec<String>,
    #[serde(default)]
    gold: Option<i64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl RawQuestion {
    fn into_question(self, task_name: &str) -> Result<Question, String> {
        let task = match self.task {
            Some(t) if !t.is_empty() && t != task_name => {
                return Err(format!(
                    "question {}: task '{}' does not match requested task '{}'",
                    self.id, t, task_name
                ))
            }
            _ => task_name.to_string(),
        };
        let gold = match (self.kind, self.gold) {
            (_, None) => None,
            (QuestionKind::MultipleChoice, Some(g)) => {
                let idx = usize::try_from(g)
                    .map_err(|_| format!("question {}: negative gold index {}", self.id, g))?;
                Some(Gold::Choice(idx))
            }
            (QuestionKind::FreeInteger, Some(g)) => Some(Gold::Integer(g)),
        };
        Ok(Question {
            id: self.id,
            task,
            text: self.text,
            kind: self.kind,
            choices: self.choices,
            gold,
            meta: self.meta,
        })
    }
}

impl TryFrom<RawQuestion> for Question {
    type Error = String;

    /// Used when reading back records that carry their own task name.
    fn try_from(raw: RawQuestion) -> Result<Self, Self::Error> {
        let task = raw.task.clone().filter(|t| !t.is_empty()).ok_or("record has no task")?;
        let q = raw.into_question(&task)?;
        q.check()?;
        Ok(q)
    }
}

/// Parses one task file line; `line` is 1-based and only used in errors.
pub fn parse_task_line(text: &str, line: usize, task_name: &str) -> Result<Question, TaskError> {
    let raw: RawQuestion = serde_json::from_str(text).map_err(|e| TaskError::Parse {
        line,
        message: e.to_string(),
    })?;
    let q = raw
        .into_question(task_name)
        .map_err(|message| TaskError::Validation { line, message })?;
    q.check().map_err(|message| TaskError::Validation { line, message })?;
    Ok(q)
}

/// Loads every record of a task file, failing on the first bad record.
/// Blank lines are skipped; every other line must be a valid record.
pub fn load_tasks(path: &Path, task_name: &str) -> Result<Vec<Question>, TaskError> {
    let io_err = |source| TaskError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let q = parse_task_line(&line, line_no, task_name)?;
        if !seen.insert(q.id.clone()) {
            return Err(TaskError::Validation {
                line: line_no,
                message: format!("duplicate id {}", q.id),
            });
        }
        out.push(q);
    }
    Ok(out)
}

/// Validates a list of questions held in memory (ids unique, choices/gold
/// consistent).
pub fn validate_questions(questions: &[Question]) -> Result<(), TaskError> {
    let mut seen = HashSet::new();
    for (i, q) in questions.iter().enumerate() {
        q.check().map_err(|message| TaskError::Validation { line: i + 1, message })?;
        if !seen.insert(q.id.as_str()) {
            return Err(TaskError::Validation {
                line: i + 1,
                message: format!("duplicate id {}", q.id),
            });
        }
    }
    Ok(())
}

pub const ADDITION_OPERAND_COUNTS: [usize; 4] = [2, 4, 8, 16];
pub const ADDITION_DIGITS: [u32; 2] = [2, 3];
pub const ADDITION_PREAMBLE: &str = "What is the solution to the following?";

/// Grid cell and sample size for synthetic addition problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdditionSpec {
    pub operand_count: usize,
    pub digits: u32,
    pub count: usize,
    pub seed: u64,
}

impl AdditionSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        if !ADDITION_OPERAND_COUNTS.contains(&self.operand_count) {
            return Err(TaskError::Spec(format!(
                "operand count {} not in {:?}",
                self.operand_count, ADDITION_OPERAND_COUNTS
            )));
        }
        if !ADDITION_DIGITS.contains(&self.digits) {
            return Err(TaskError::Spec(format!("digits {} not in {:?}", self.digits, ADDITION_DIGITS)));
        }
        if self.count == 0 {
            return Err(TaskError::Spec("count must be positive".into()));
        }
        Ok(())
    }

    pub fn task_name(&self) -> String {
        format!("addition-{}x{}d", self.operand_count, self.digits)
    }

    pub fn operand_range(&self) -> (u64, u64) {
        let lo = 10u64.pow(self.digits - 1);
        (lo, lo * 10 - 1)
    }
}

impl fmt::Display for AdditionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "operands={},digits={},count={},seed={}",
            self.operand_count, self.digits, self.count, self.seed
        )
    }
}

impl FromStr for AdditionSpec {
    type Err = TaskError;

    /// Parses `"operands=8,digits=2,count=200,seed=7"`. `seed` defaults to 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut operands = None;
        let mut digits = None;
        let mut count = None;
        let mut seed = 0u64;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| TaskError::Spec(format!("expected key=value, got '{part}'")))?;
            let bad = |_| TaskError::Spec(format!("bad value for {k}: '{v}'"));
            match k.trim() {
                "operands" => operands = Some(v.trim().parse().map_err(bad)?),
                "digits" => digits = Some(v.trim().parse().map_err(bad)?),
                "count" => count = Some(v.trim().parse().map_err(bad)?),
                "seed" => seed = v.trim().parse().map_err(bad)?,
                other => return Err(TaskError::Spec(format!("unknown key '{other}'"))),
            }
        }
        let spec = AdditionSpec {
            operand_count: operands.ok_or_else(|| TaskError::Spec("missing operands".into()))?,
            digits: digits.ok_or_else(|| TaskError::Spec("missing digits".into()))?,
            count: count.ok_or_else(|| TaskError::Spec("missing count".into()))?,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Renders the question text for a list of operands.
pub fn addition_text(operands: &[u64]) -> String {
    let terms: Vec<String> = operands.iter().map(u64::to_string).collect();
    format!("{} {} =", ADDITION_PREAMBLE, terms.join(" + "))
}

/// Builds a free-integer addition question from explicit operands.
pub fn addition_question(task: &str, id: &str, operands: &[u64]) -> Question {
    let sum: u64 = operands.iter().sum();
    Question {
        id: id.to_string(),
        task: task.to_string(),
        text: addition_text(operands),
        kind: QuestionKind::FreeInteger,
        choices: Vec::new(),
        gold: Some(Gold::Integer(sum as i64)),
        meta: BTreeMap::new(),
    }
}

/// Generates `spec.count` problems with operands drawn uniformly from the
/// digit band. Output is a pure function of `spec`.
pub fn generate_addition(spec: &AdditionSpec) -> Result<Vec<Question>, TaskError> {
    spec.validate()?;
    let (lo, hi) = spec.operand_range();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let task = spec.task_name();
    let questions = (0..spec.count)
        .map(|i| {
            let operands: Vec<u64> = (0..spec.operand_count).map(|_| rng.gen_range(lo..=hi)).collect();
            let id = format!("{}-s{}-{:05}", task, spec.seed, i);
            addition_question(&task, &id, &operands)
        })
        .collect();
    Ok(questions)
}

/// Extracts the operands back out of an addition question's text.
pub fn parse_addition_operands(text: &str) -> Option<Vec<u64>> {
    let body = text.strip_prefix(ADDITION_PREAMBLE)?.trim();
    let body = body.strip_suffix('=')?.trim();
    body.split('+').map(|t| t.trim().parse().ok()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_single_record() {
        let f = write_tmp(&[
            r#"{"id":"q1","task":"aqua","text":"Pick","kind":"multiple_choice","choices":["a","b","c","d"],"gold":3,"meta":{}}"#,
        ]);
        let qs = load_tasks(f.path(), "aqua").unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].gold, Some(Gold::Choice(3)));
    }

    #[test]
    fn gold_out_of_range_is_rejected() {
        let f = write_tmp(&[
            r#"{"id":"q1","text":"Pick","kind":"multiple_choice","choices":["a","b","c","d"],"gold":5}"#,
        ]);
        let err = load_tasks(f.path(), "aqua").unwrap_err();
        assert!(matches!(err, TaskError::Validation { line: 1, .. }), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let f = write_tmp(&[
            r#"{"id":"q1","text":"x","kind":"free_integer","gold":3}"#,
            r#"{"id":"q2","text":"#,
        ]);
        match load_tasks(f.path(), "t").unwrap_err() {
            TaskError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_fail() {
        let f = write_tmp(&[
            r#"{"id":"q1","text":"x","kind":"free_integer","gold":3}"#,
            r#"{"id":"q1","text":"y","kind":"free_integer","gold":4}"#,
        ]);
        assert!(matches!(load_tasks(f.path(), "t").unwrap_err(), TaskError::Validation { line: 2, .. }));
    }

    #[test]
    fn free_integer_with_choices_fails() {
        let f = write_tmp(&[r#"{"id":"q1","text":"x","kind":"free_integer","choices":["a"],"gold":3}"#]);
        assert!(load_tasks(f.path(), "t").is_err());
    }

    #[test]
    fn mismatched_task_name_fails() {
        let f = write_tmp(&[r#"{"id":"q1","task":"mmlu","text":"x","kind":"free_integer","gold":3}"#]);
        assert!(load_tasks(f.path(), "aqua").is_err());
    }

    #[test]
    fn table5_operands_sum() {
        assert_eq!(addition_question("t", "a", &[264, 964]).gold, Some(Gold::Integer(1228)));
        assert_eq!(
            addition_question("t", "b", &[95, 86, 98, 42, 16, 63, 58, 34]).gold,
            Some(Gold::Integer(492))
        );
        assert_eq!(
            addition_question("t", "a", &[264, 964]).text,
            "What is the solution to the following? 264 + 964 ="
        );
    }

    #[test]
    fn spec_parsing_and_grid() {
        let s: AdditionSpec = "operands=8,digits=2,count=200,seed=7".parse().unwrap();
        assert_eq!(s, AdditionSpec { operand_count: 8, digits: 2, count: 200, seed: 7 });
        assert_eq!(s.to_string().parse::<AdditionSpec>().unwrap(), s);
        assert!("operands=3,digits=2,count=1".parse::<AdditionSpec>().is_err());
        assert!("operands=2,digits=4,count=1".parse::<AdditionSpec>().is_err());
        assert!("operands=2,digits=2,count=0".parse::<AdditionSpec>().is_err());
        assert!("operands=2,digits=2".parse::<AdditionSpec>().is_err());
    }

    #[test]
    fn generation_is_deterministic_and_in_band() {
        let spec = AdditionSpec { operand_count: 2, digits: 2, count: 1000, seed: 11 };
        let a = generate_addition(&spec).unwrap();
        assert_eq!(a, generate_addition(&spec).unwrap());
        for q in &a {
            let ops = parse_addition_operands(&q.text).unwrap();
            assert_eq!(ops.len(), 2);
            assert!(ops.iter().all(|o| (10..=99).contains(o)));
            let mut total = 0i64;
            for o in &ops {
                total += *o as i64;
            }
            assert_eq!(q.gold, Some(Gold::Integer(total)));
        }
    }
}
