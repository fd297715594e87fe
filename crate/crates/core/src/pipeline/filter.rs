//! Turning raw model text into a predicate, or a reason to drop it.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;

pub const DEFAULT_MAX_WORDS: usize = 5;
pub const DEFAULT_BLOCKLIST: &[&str] = &["next to", "near", "beside", "with", "and", "close to"];

/// Answers that mean "no relation".
const NO_RELATION: &[&str] = &[
    "none",
    "no relation",
    "no relationship",
    "no clear relation",
    "not related",
    "unrelated",
    "unknown",
    "na",
    "n a",
];

const COPULAS: &[&str] = &["is", "are", "was", "were"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Accepted,
    RejectedLength,
    RejectedVague,
    RejectedEmpty,
    /// The backend failed for this pair after retries.
    ProviderError,
}

impl GenerationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationStatus::Accepted => "accepted",
            GenerationStatus::RejectedLength => "rejected_length",
            GenerationStatus::RejectedVague => "rejected_vague",
            GenerationStatus::RejectedEmpty => "rejected_empty",
            GenerationStatus::ProviderError => "provider_error",
        }
    }
}

impl fmt::Display for GenerationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Phrases that make a predicate too vague, matched as whole-word runs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blocklist {
    phrases: Vec<Vec<String>>,
}

impl Default for Blocklist {
    fn default() -> Self {
        Self::new(DEFAULT_BLOCKLIST.iter().copied())
    }
}

impl Blocklist {
    pub fn new<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut phrases: Vec<Vec<String>> = phrases
            .into_iter()
            .map(|p| tokens(&normalize(p.as_ref())))
            .filter(|t| !t.is_empty())
            .collect();
        phrases.sort();
        phrases.dedup();
        Self { phrases }
    }

    /// One phrase per line; blank lines and `#` comments are ignored.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')),
        ))
    }

    pub fn phrases(&self) -> Vec<String> {
        self.phrases.iter().map(|p| p.join(" ")).collect()
    }

    /// The first blocked phrase occurring in `predicate`, if any.
    pub fn hit(&self, predicate: &str) -> Option<String> {
        let words = tokens(predicate);
        self.phrases
            .iter()
            .find(|p| words.windows(p.len()).any(|w| w == p.as_slice()))
            .map(|p| p.join(" "))
    }
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Lowercases, turns punctuation into spaces and collapses whitespace.
fn normalize(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c.to_lowercase().next().unwrap_or(c)
            } else if c == '\'' || c == '\u{2019}' {
                '\0'
            } else {
                ' '
            }
        })
        .filter(|c| *c != '\0')
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_alias(words: &[&str]) -> bool {
    matches!(words, ["object", "1" | "2" | "one" | "two"])
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Filtered {
    pub status: GenerationStatus,
    /// Set only for accepted answers.
    pub predicate: Option<String>,
}

/// Normalises a raw answer and applies the emptiness, length and vagueness
/// checks in that order.
pub fn postprocess(raw_text: &str, blocklist: &Blocklist, max_words: usize) -> Filtered {
    let reject = |status| Filtered { status, predicate: None };
    let first = raw_text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let norm = normalize(first);
    let mut words: Vec<&str> = norm.split_whitespace().collect();

    if words.len() >= 2 && is_alias(&words[..2]) {
        words.drain(..2);
    }
    if words.len() >= 2 && is_alias(&words[words.len() - 2..]) {
        words.truncate(words.len() - 2);
    }
    if words.len() > 1 && COPULAS.contains(&words[0]) {
        words.remove(0);
    }
    let predicate = words.join(" ");
    if predicate.is_empty() || NO_RELATION.contains(&predicate.as_str()) {
        return reject(GenerationStatus::RejectedEmpty);
    }
    if words.len() > max_words {
        return reject(GenerationStatus::RejectedLength);
    }
    if blocklist.hit(&predicate).is_some() {
        return reject(GenerationStatus::RejectedVague);
    }
    Filtered {
        status: GenerationStatus::Accepted,
        predicate: Some(predicate),
    }
}
