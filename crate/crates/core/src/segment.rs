//! Deterministic sentence segmentation for reasoning samples.

use std::collections::BTreeSet;

const TERMINALS: [char; 3] = ['.', '!', '?'];
const CLOSERS: [char; 7] = [')', ']', '"', '\'', '’', '”', '»'];

const DEFAULT_ABBREVIATIONS: [&str; 20] = [
    "mr.", "mrs.", "ms.", "dr.", "prof.", "sr.", "jr.", "st.", "mt.", "vs.", "e.g.", "i.e.", "approx.", "fig.",
    "eq.", "u.s.", "a.m.", "p.m.", "inc.", "ltd.",
];

/// Splits reasoning text into steps.
pub trait Segmenter: Send + Sync {
    /// Identity recorded in run manifests.
    fn id(&self) -> String;
    fn segment(&self, text: &str) -> Vec<String>;
    /// String placed between steps when they are reassembled.
    fn joiner(&self) -> &str {
        crate::prompts::STEP_JOINER
    }
}

/// Splits after `.`, `!` or `?` (plus any trailing closing quotes or
/// brackets) when followed by whitespace or end of text. Tokens found in the
/// abbreviation guard list, and tokens made only of punctuation such as
/// `...`, never end a sentence. Decimals like `0.24` are never split since
/// the period is not followed by whitespace.
#[derive(Debug, Clone)]
pub struct RuleSegmenter {
    abbreviations: BTreeSet<String>,
}

impl Default for RuleSegmenter {
    fn default() -> Self {
        Self::with_abbreviations(DEFAULT_ABBREVIATIONS)
    }
}

impl RuleSegmenter {
    pub fn with_abbreviations<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self { abbreviations: abbreviations.into_iter().map(|a| a.as_ref().to_lowercase()).collect() }
    }

    fn is_guarded(&self, token: &str) -> bool {
        let token = token.trim_start_matches(['(', '[', '"', '\'', '‘', '“']);
        token.chars().all(|c| !c.is_alphanumeric()) || self.abbreviations.contains(&token.to_lowercase())
    }
}

impl Segmenter for RuleSegmenter {
    fn id(&self) -> String {
        format!("rule-v1(abbrev={})", self.abbreviations.iter().cloned().collect::<Vec<_>>().join("|"))
    }

    fn segment(&self, text: &str) -> Vec<String> {
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut out = Vec::new();
        let mut start = 0usize;
        let mut i = 0usize;
        while i < chars.len() {
            let (pos, c) = chars[i];
            if !TERMINALS.contains(&c) {
                i += 1;
                continue;
            }
            // Token runs back from the punctuation to the previous whitespace.
            let token_start = text[..pos].rfind(char::is_whitespace).map_or(0, |p| p + 1).max(start);
            let mut j = i + 1;
            while j < chars.len() && TERMINALS.contains(&chars[j].1) {
                j += 1;
            }
            let punct_end = chars.get(j).map_or(text.len(), |(p, _)| *p);
            while j < chars.len() && CLOSERS.contains(&chars[j].1) {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |(p, _)| *p);
            let at_break = chars.get(j).is_none_or(|(_, ch)| ch.is_whitespace());
            if at_break && !self.is_guarded(&text[token_start..punct_end]) {
                let sentence = text[start..end].trim();
                if !sentence.is_empty() {
                    out.push(sentence.to_string());
                }
                start = end;
            }
            i = j.max(i + 1);
        }
        let tail = text[start..].trim();
        if !tail.is_empty() {
            out.push(tail.to_string());
        }
        out
    }
}

/// Segments with the default rule segmenter.
pub fn segment(raw_text: &str) -> Vec<String> {
    RuleSegmenter::default().segment(raw_text)
}
