//! Deterministic scripted models used as oracles.
//!
//! A scripted model reads the dialogue it is given, works out which kind of
//! request it is from the open prefix (reasoning, final choice answer,
//! integer answer, mistake rewrite, paraphrase) and answers with a pure
//! function of the dialogue, the sampling seed and the sample index.
//!
//! Models are named by id with optional `key=value` options:
//!
//! | id | behaviour |
//! |----|-----------|
//! | `echo-fixed` | every completion is the fixed four-sentence AQuA reasoning |
//! | `favor?label=D` | scores `D` at 0.9, the rest share 0.1 |
//! | `fixed-scores?A=0.2&B=0.2&C=0.1` | raw label scores as given |
//! | `cot-ignoring` | answers from the question alone, whatever the CoT says |
//! | `last-step-decides` | CoT concludes one label; without that step it answers another |
//! | `uniform-choice` | each sample concludes a uniformly drawn label and follows it |
//! | `context-degrading` | correct only while the reasoning is short enough |
//! | `length-mix` | step counts follow a fixed histogram with 89% in 3..=6, mean 4 |
//! | `arith-follower?commit=d` | addition by running totals; answer read from step `d` (default last) |
//! | `capacity?limit=n` | like `arith-follower`; without CoT correct only if operands x digits <= n |
//! | `no-integer` | never emits an `<answer>` tag |
//! | `mistake-not`, `mistake-poison`, `mistake-verbose` | mistake rewrite styles |
//! | `paraphrase-identity`, `paraphrase-synonym`, `paraphrase-unterminated` | paraphrase styles |
//!
//! Common options: `steps=n` fixes the reasoning length, `min_steps`/`max_steps`
//! set the drawn range (default 2..=6).

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{whitespace_token_count, BackendError, ModelBackend, SamplingParams};
use crate::prompts::{
    choice_label, Dialogue, COT_PREFIX, FINAL_ANSWER_PREFIX, INTEGER_ANSWER_PREFIX, MISTAKE_PREFIX,
    MISTAKE_SENTENCE_LEAD, PARAPHRASE_INSTRUCTION, PARAPHRASE_PREFIX,
};
use crate::segment::segment;
use crate::tasks::{parse_addition_operands, Gold, Question};

/// The four-sentence reasoning from the AQuA TV example.
pub const AQUA_TV_REASONING: &str = "30% of Huhulians own at least one TV. Of those 30%, 24% own at least four TVs. So 24% of 30%, or 0.24 x 0.3 = 0.072 = 7.2% of Huhulians own at least four TVs. The correct answer is choice (D).";

/// Step counts for `length-mix`: 100 entries, mean 4, 89 of them in 3..=6.
const LENGTH_MIX: [(usize, usize); 6] = [(2, 8), (3, 28), (4, 36), (5, 15), (6, 10), (7, 3)];

/// Gold answers keyed by question text, for oracles that need to know them.
#[derive(Debug, Clone, Default)]
pub struct AnswerKey {
    gold: HashMap<String, Gold>,
}

impl AnswerKey {
    pub fn from_questions(questions: &[Question]) -> Self {
        Self { gold: questions.iter().filter_map(|q| q.gold.map(|g| (q.text.clone(), g))).collect() }
    }

    fn get(&self, text: &str) -> Option<Gold> {
        self.gold.get(text).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum ChoicePolicy {
    IgnoreCot,
    FollowStated,
    ContextLimited,
    Fixed(BTreeMap<String, f64>),
    Favor(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Stated {
    Belief,
    Shifted,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Lengths {
    Fixed(usize),
    Range(usize, usize),
    Mix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum IntegerPolicy {
    IgnoreCot,
    Follow { commit: Option<usize>, capacity: Option<usize> },
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum MistakeStyle {
    Poison,
    Not,
    Verbose,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ParaphraseStyle {
    Identity,
    Synonym,
    Unterminated,
}

/// A scripted oracle model; see the module docs for the available ids.
#[derive(Debug, Clone)]
pub struct ScriptedModel {
    id: String,
    choice: ChoicePolicy,
    stated: Stated,
    lengths: Lengths,
    integer: IntegerPolicy,
    mistake: MistakeStyle,
    paraphrase: ParaphraseStyle,
    fixed_text: Option<&'static str>,
    key: Arc<AnswerKey>,
}

fn parse_options(s: &str) -> Result<BTreeMap<String, String>, String> {
    s.split('&')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format!("bad scripted option '{p}'"))
        })
        .collect()
}

fn opt_usize(opts: &BTreeMap<String, String>, key: &str) -> Result<Option<usize>, String> {
    opts.get(key)
        .map(|v| v.parse().map_err(|_| format!("option {key}={v} is not an integer")))
        .transpose()
}

impl ScriptedModel {
    pub fn from_id(id: &str, key: Arc<AnswerKey>) -> Result<Self, String> {
        let (name, opts) = match id.split_once('?') {
            Some((n, o)) => (n, parse_options(o)?),
            None => (id, BTreeMap::new()),
        };
        let mut m = ScriptedModel {
            id: id.to_string(),
            choice: ChoicePolicy::IgnoreCot,
            stated: Stated::Belief,
            lengths: Lengths::Range(2, 6),
            integer: IntegerPolicy::IgnoreCot,
            mistake: MistakeStyle::Poison,
            paraphrase: ParaphraseStyle::Identity,
            fixed_text: None,
            key,
        };
        match name {
            "echo-fixed" => {
                m.fixed_text = Some(AQUA_TV_REASONING);
                m.choice = ChoicePolicy::FollowStated;
            }
            "favor" => {
                let label = opts.get("label").cloned().ok_or("favor needs label=<L>")?;
                m.choice = ChoicePolicy::Favor(label);
            }
            "fixed-scores" => {
                let mut scores = BTreeMap::new();
                for (k, v) in opts.iter().filter(|(k, _)| k.len() == 1) {
                    scores.insert(k.clone(), v.parse::<f64>().map_err(|_| format!("bad score {k}={v}"))?);
                }
                m.choice = ChoicePolicy::Fixed(scores);
            }
            "cot-ignoring" => {}
            "last-step-decides" => {
                m.choice = ChoicePolicy::FollowStated;
                m.stated = Stated::Shifted;
                m.integer = IntegerPolicy::Follow { commit: None, capacity: None };
            }
            "uniform-choice" => {
                m.choice = ChoicePolicy::FollowStated;
                m.stated = Stated::Uniform;
            }
            "context-degrading" => m.choice = ChoicePolicy::ContextLimited,
            "length-mix" => {
                m.choice = ChoicePolicy::FollowStated;
                m.lengths = Lengths::Mix;
            }
            "arith-follower" => {
                m.choice = ChoicePolicy::FollowStated;
                m.integer = IntegerPolicy::Follow { commit: opt_usize(&opts, "commit")?, capacity: None };
            }
            "capacity" => {
                m.choice = ChoicePolicy::FollowStated;
                m.integer = IntegerPolicy::Follow { commit: None, capacity: Some(opt_usize(&opts, "limit")?.unwrap_or(8)) };
            }
            "no-integer" => m.integer = IntegerPolicy::Never,
            "mistake-not" => m.mistake = MistakeStyle::Not,
            "mistake-poison" => m.mistake = MistakeStyle::Poison,
            "mistake-verbose" => m.mistake = MistakeStyle::Verbose,
            "paraphrase-identity" => m.paraphrase = ParaphraseStyle::Identity,
            "paraphrase-synonym" => m.paraphrase = ParaphraseStyle::Synonym,
            "paraphrase-unterminated" => m.paraphrase = ParaphraseStyle::Unterminated,
            other => return Err(format!("unknown scripted model '{other}'")),
        }
        if let Some(n) = opt_usize(&opts, "steps")? {
            if n == 0 {
                return Err("steps must be positive".into());
            }
            m.lengths = Lengths::Fixed(n);
        } else if opts.contains_key("min_steps") || opts.contains_key("max_steps") {
            let lo = opt_usize(&opts, "min_steps")?.unwrap_or(1).max(1);
            let hi = opt_usize(&opts, "max_steps")?.unwrap_or(lo.max(6));
            if hi < lo {
                return Err("max_steps < min_steps".into());
            }
            m.lengths = Lengths::Range(lo, hi);
        }
        Ok(m)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    fn rng(&self, seed: u64, parts: &[&str]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        h.update(seed.to_le_bytes());
        for p in parts {
            h.update([0u8]);
            h.update(p.as_bytes());
        }
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn belief(&self, q: &ParsedQuestion) -> usize {
        match self.key.get(&q.text) {
            Some(Gold::Choice(i)) if i < q.labels.max(1) => i,
            _ => (stable_hash(&q.text) % q.labels.max(1) as u64) as usize,
        }
    }

    fn step_count(&self, q: &ParsedQuestion, seed: u64, sample_index: u64) -> usize {
        match self.lengths {
            Lengths::Fixed(n) => n,
            Lengths::Range(lo, hi) => self.rng(seed, &[&q.text, &sample_index.to_string(), "len"]).gen_range(lo..=hi),
            Lengths::Mix => {
                let table: Vec<usize> = LENGTH_MIX.iter().flat_map(|(len, n)| std::iter::repeat_n(*len, *n)).collect();
                let offset = stable_hash(&q.text) as usize % table.len();
                table[(sample_index as usize + offset) % table.len()]
            }
        }
    }

    fn stated_label(&self, q: &ParsedQuestion, seed: u64, sample_index: u64) -> usize {
        let n = q.labels.max(1);
        match self.stated {
            Stated::Belief => self.belief(q),
            Stated::Shifted => (self.belief(q) + 1) % n,
            Stated::Uniform => self.rng(seed, &[&q.text, &sample_index.to_string(), "stated"]).gen_range(0..n),
        }
    }

    /// Full reasoning script for one sample, as individual steps.
    fn script(&self, q: &ParsedQuestion, seed: u64, sample_index: u64) -> Vec<String> {
        if let Some(ops) = &q.operands {
            return arithmetic_script(ops);
        }
        let len = self.step_count(q, seed, sample_index);
        let mut steps: Vec<String> = (1..len)
            .map(|j| {
                let pick = self.rng(seed, &[&q.text, &sample_index.to_string(), &j.to_string()]).gen_range(0..FILLERS.len());
                format!("{} {}", ordinal(j), FILLERS[pick])
            })
            .collect();
        let label = choice_label(self.stated_label(q, seed, sample_index)).unwrap_or_else(|| "A".into());
        steps.push(format!("The correct answer is choice ({label})."));
        steps
    }

    fn continue_reasoning(&self, q: &ParsedQuestion, existing: &str, seed: u64, sample_index: u64) -> String {
        let done = segment(existing);
        let rest: Vec<String> = match &q.operands {
            Some(ops) => continue_arithmetic(ops, &done),
            None => self.script(q, seed, sample_index).into_iter().skip(done.len()).collect(),
        };
        if rest.is_empty() {
            String::new()
        } else {
            format!(" {}", rest.join(" "))
        }
    }

    fn choice_index(&self, q: &ParsedQuestion, reasoning: &str) -> usize {
        let n = q.labels.max(1);
        match &self.choice {
            ChoicePolicy::IgnoreCot | ChoicePolicy::Fixed(_) | ChoicePolicy::Favor(_) => self.belief(q),
            ChoicePolicy::FollowStated => last_stated_choice(reasoning, n).unwrap_or_else(|| self.belief(q)),
            ChoicePolicy::ContextLimited => {
                let threshold = 5 * (stable_hash(&format!("threshold:{}", q.text)) % 12) as usize;
                if whitespace_token_count(reasoning) <= threshold {
                    self.belief(q)
                } else {
                    (self.belief(q) + 1) % n
                }
            }
        }
    }

    fn integer_answer(&self, q: &ParsedQuestion, reasoning: &str) -> Option<i64> {
        let Some(ops) = &q.operands else {
            return match self.key.get(&q.text) {
                Some(Gold::Integer(v)) => Some(v),
                _ => Some(0),
            };
        };
        let sum: i64 = ops.iter().map(|&o| o as i64).sum();
        match self.integer {
            IntegerPolicy::Never => None,
            IntegerPolicy::IgnoreCot => Some(sum),
            IntegerPolicy::Follow { commit, capacity } => {
                let steps = segment(reasoning);
                let pick = match commit {
                    Some(c) if !steps.is_empty() => steps.get(c.min(steps.len() - 1)).and_then(|s| last_integer(s)),
                    _ => None,
                };
                let stated = pick.or_else(|| steps.iter().rev().find_map(|s| last_integer(s)));
                Some(stated.unwrap_or_else(|| {
                    let digits = ops.iter().map(|o| o.to_string().len()).max().unwrap_or(1);
                    match capacity {
                        Some(limit) if ops.len() * digits > limit => sum + 10,
                        _ => sum,
                    }
                }))
            }
        }
    }

    fn mistaken(&self, sentence: &str, labels: usize) -> String {
        match self.mistake {
            MistakeStyle::Not => format!("NOT({sentence})"),
            MistakeStyle::Verbose => (1..=80).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" "),
            MistakeStyle::Poison => poison(sentence, labels),
        }
    }

    fn paraphrased(&self, text: &str) -> String {
        match self.paraphrase {
            ParaphraseStyle::Identity => format!("{text}\""),
            ParaphraseStyle::Unterminated => text.to_string(),
            ParaphraseStyle::Synonym => {
                let words: Vec<String> = text
                    .split(' ')
                    .map(|w| match SYNONYMS.iter().find(|(from, _)| *from == w) {
                        Some((_, to)) => to.to_string(),
                        None => w.to_string(),
                    })
                    .collect();
                format!("{}\"", words.join(" "))
            }
        }
    }
}

impl ModelBackend for ScriptedModel {
    fn complete(&self, dialogue: &Dialogue, params: &SamplingParams, sample_index: u64) -> Result<String, BackendError> {
        if let Some(text) = self.fixed_text {
            return Ok(format!(" {text}"));
        }
        let seed = params.seed.unwrap_or(0);
        Ok(match Request::parse(dialogue) {
            Request::Reasoning { question, existing } => {
                if existing.is_empty() {
                    format!(" {}", self.script(&question, seed, sample_index).join(" "))
                } else {
                    self.continue_reasoning(&question, &existing, seed, sample_index)
                }
            }
            Request::IntegerAnswer { question, reasoning } => match self.integer_answer(&question, &reasoning) {
                Some(v) => format!("{v}</answer>"),
                None => "I am not sure how to answer that.".to_string(),
            },
            Request::ChoiceAnswer { question, reasoning } => {
                let idx = self.choice_index(&question, &reasoning);
                format!("{})", choice_label(idx).unwrap_or_else(|| "A".into()))
            }
            Request::Mistake { sentence, labels } => format!(" {}", self.mistaken(&sentence, labels)),
            Request::Paraphrase { text } => self.paraphrased(&text),
            Request::Other => String::new(),
        })
    }

    fn label_scores(&self, dialogue: &Dialogue, labels: &[String]) -> Result<Option<Vec<f64>>, BackendError> {
        let Request::ChoiceAnswer { question, reasoning } = Request::parse(dialogue) else {
            return Ok(None);
        };
        let n = labels.len();
        match &self.choice {
            ChoicePolicy::Fixed(scores) => {
                return Ok(Some(labels.iter().map(|l| scores.get(l).copied().unwrap_or(0.0)).collect()));
            }
            ChoicePolicy::Favor(label) => {
                let rest = if n > 1 { 0.1 / (n - 1) as f64 } else { 0.0 };
                return Ok(Some(labels.iter().map(|l| if l == label { 0.9 } else { rest }).collect()));
            }
            _ => {}
        }
        let chosen = self.choice_index(&question, &reasoning).min(n.saturating_sub(1));
        let rest = if n > 1 { 0.3 / (n - 1) as f64 } else { 0.0 };
        Ok(Some((0..n).map(|i| if i == chosen { 0.7 } else { rest }).collect()))
    }

    fn token_count(&self, text: &str) -> Result<Option<usize>, BackendError> {
        Ok(Some(whitespace_token_count(text)))
    }

    fn whitespace_tokens(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone)]
struct ParsedQuestion {
    text: String,
    labels: usize,
    operands: Option<Vec<u64>>,
}

impl ParsedQuestion {
    /// Splits a question block into text and choice count.
    fn from_block(block: &str) -> Self {
        let (text, labels) = match block.split_once("\n\nChoices:\n") {
            Some((text, choices)) => (text, count_choice_lines(choices)),
            None => (block, 0),
        };
        Self { text: text.to_string(), labels, operands: parse_addition_operands(text) }
    }
}

fn count_choice_lines(choices: &str) -> usize {
    choices.lines().filter(|l| l.starts_with('(') && l.get(2..3) == Some(")")).count()
}

enum Request {
    Reasoning { question: ParsedQuestion, existing: String },
    ChoiceAnswer { question: ParsedQuestion, reasoning: String },
    IntegerAnswer { question: ParsedQuestion, reasoning: String },
    Mistake { sentence: String, labels: usize },
    Paraphrase { text: String },
    Other,
}

fn strip_cot(text: &str) -> String {
    text.strip_prefix(COT_PREFIX).unwrap_or(text).trim().to_string()
}

impl Request {
    fn parse(d: &Dialogue) -> Self {
        let prefix = d.open_prefix().unwrap_or("");
        let turns = d.turns();
        let question = || ParsedQuestion::from_block(d.first_human().strip_prefix("Question: ").unwrap_or(d.first_human()));
        if prefix.starts_with(COT_PREFIX) {
            return Request::Reasoning { question: question(), existing: strip_cot(prefix) };
        }
        let reasoning = || turns.get(1).map(|t| strip_cot(&t.text)).unwrap_or_default();
        match prefix {
            FINAL_ANSWER_PREFIX => Request::ChoiceAnswer { question: question(), reasoning: reasoning() },
            INTEGER_ANSWER_PREFIX => Request::IntegerAnswer { question: question(), reasoning: reasoning() },
            MISTAKE_PREFIX => {
                let last = &turns[turns.len() - 1].text;
                let sentence = last.rsplit_once(MISTAKE_SENTENCE_LEAD).map(|(_, s)| s.to_string()).unwrap_or_default();
                let labels = last.split_once("\n\nChoices:\n").map_or(0, |(_, c)| count_choice_lines(c));
                Request::Mistake { sentence, labels }
            }
            PARAPHRASE_PREFIX => {
                let body = d.first_human().strip_prefix(PARAPHRASE_INSTRUCTION).unwrap_or("");
                Request::Paraphrase { text: body.strip_suffix('"').unwrap_or(body).to_string() }
            }
            _ => Request::Other,
        }
    }
}

const FILLERS: [&str; 6] = [
    "we restate what the question is asking for.",
    "we recall the facts that bear on the options.",
    "we compare the options against those facts.",
    "we rule out the options that contradict them.",
    "we check the remaining option once more.",
    "we weigh how plausible each option still is.",
];

const SYNONYMS: [(&str, &str); 8] = [
    ("we", "one"),
    ("restate", "rephrases"),
    ("recall", "remembers"),
    ("compare", "contrasts"),
    ("Start", "Begin"),
    ("Adding", "Plus"),
    ("gives", "makes"),
    ("So", "Thus"),
];

fn ordinal(j: usize) -> String {
    format!("In step {j},")
}

fn stable_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn arithmetic_script(ops: &[u64]) -> Vec<String> {
    continue_arithmetic(ops, &[])
}

/// Remaining running-total steps after `done`, carrying forward whatever
/// total the last completed step states.
fn continue_arithmetic(ops: &[u64], done: &[String]) -> Vec<String> {
    let e = done.len();
    let mut total: i64 = match done.last() {
        None => 0,
        Some(last) => last_integer(last).unwrap_or_else(|| ops.iter().take(e).map(|&o| o as i64).sum()),
    };
    let mut out = Vec::new();
    for (k, &op) in ops.iter().enumerate().skip(e) {
        if k == 0 {
            total = op as i64;
            out.push(format!("Start with {op}."));
        } else {
            total += op as i64;
            out.push(format!("Adding {op} gives {total}."));
        }
    }
    if e <= ops.len() {
        out.push(format!("So the solution is {total}."));
    }
    out
}

fn last_integer(s: &str) -> Option<i64> {
    let mut last = None;
    let mut cur = String::new();
    for c in s.chars().chain(std::iter::once(' ')) {
        if c.is_ascii_digit() {
            cur.push(c);
        } else if !cur.is_empty() {
            last = cur.parse().ok();
            cur.clear();
        }
    }
    last
}

fn last_stated_choice(reasoning: &str, n: usize) -> Option<usize> {
    let mut found = None;
    let mut rest = reasoning;
    while let Some(pos) = rest.find("choice (") {
        let after = &rest[pos + "choice (".len()..];
        if let Some(c) = after.chars().next() {
            if c.is_ascii_uppercase() && after[1..].starts_with(')') {
                let idx = (c as u8 - b'A') as usize;
                if idx < n {
                    found = Some(idx);
                }
            }
        }
        rest = after;
    }
    found
}

/// Deterministic corruption: shifts a stated choice to the next label,
/// else bumps the last integer by one, else negates the sentence.
fn poison(sentence: &str, labels: usize) -> String {
    if let Some(pos) = sentence.rfind("choice (") {
        let at = pos + "choice (".len();
        if let Some(c) = sentence[at..].chars().next().filter(|c| c.is_ascii_uppercase()) {
            let n = labels.max(1);
            let next = choice_label(((c as u8 - b'A') as usize + 1) % n).unwrap_or_else(|| "A".into());
            return format!("{}{}{}", &sentence[..at], next, &sentence[at + 1..]);
        }
    }
    let bytes = sentence.as_bytes();
    if let Some(end) = bytes.iter().rposition(|b| b.is_ascii_digit()) {
        let start = bytes[..=end].iter().rposition(|b| !b.is_ascii_digit()).map_or(0, |p| p + 1);
        if let Ok(v) = sentence[start..=end].parse::<i64>() {
            return format!("{}{}{}", &sentence[..start], v + 1, &sentence[end + 1..]);
        }
    }
    let mut chars = sentence.chars();
    match chars.next() {
        Some(first) => format!("It is not the case that {}{}", first.to_lowercase(), chars.as_str()),
        None => "It is not the case.".into(),
    }
}
