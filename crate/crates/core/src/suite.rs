//! Benchmark suites: the list of conditioning quads, prompts and ground truth
//! a run iterates over, independent of the backend that produces logits.
//!
//! Serialized as pretty JSON with a `format`/`version` header.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fusion::ImageQuad;
use crate::provider::TokenId;

pub const SUITE_FORMAT: &str = "hdd-suite";
pub const SUITE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Binary "Is there a X in the image?" queries.
    Pope,
    /// Free captioning scored by object hallucination.
    Caption,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Pope => "pope",
            TaskKind::Caption => "caption",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pope" => Ok(TaskKind::Pope),
            "caption" | "chair" => Ok(TaskKind::Caption),
            other => Err(format!("unknown task kind `{other}` (expected pope or caption)")),
        }
    }
}

/// How generated token ids map back to text.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Surface text of the tokens the metrics need to read. Tokens not in
    /// the map render as nothing.
    pub token_text: BTreeMap<TokenId, String>,
    /// Token that closes a caption sentence, if the backend has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_end: Option<TokenId>,
}

impl Vocabulary {
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let words: Vec<&str> = tokens.iter().filter_map(|t| self.token_text.get(t).map(String::as_str)).collect();
        words.join(" ")
    }

    /// Renders tokens split into sentences at `sentence_end`. A trailing
    /// unterminated sentence is kept if non-empty.
    pub fn sentences(&self, tokens: &[TokenId]) -> Vec<String> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        for &t in tokens {
            if Some(t) == self.sentence_end {
                out.push(self.render(&current));
                current.clear();
            } else {
                current.push(t);
            }
        }
        let tail = self.render(&current);
        if !tail.trim().is_empty() {
            out.push(tail);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truth {
    Pope { object: String, present: bool },
    Caption { objects: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteItem {
    pub id: String,
    pub quad: ImageQuad,
    pub prompt_tokens: Vec<TokenId>,
    pub truth: Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub kind: TaskKind,
    pub vocabulary: Vocabulary,
    pub items: Vec<SuiteItem>,
}

impl Suite {
    pub fn new(name: impl Into<String>, kind: TaskKind, vocabulary: Vocabulary, items: Vec<SuiteItem>) -> Self {
        Self { format: SUITE_FORMAT.into(), version: SUITE_VERSION, name: name.into(), kind, vocabulary, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("suite serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let suite: Suite = serde_json::from_str(s).map_err(|e| format!("bad suite file: {e}"))?;
        if suite.format != SUITE_FORMAT {
            return Err(format!("not a suite file (format `{}`)", suite.format));
        }
        if suite.version != SUITE_VERSION {
            return Err(format!("unsupported suite version {}", suite.version));
        }
        for item in &suite.items {
            let ok = matches!(
                (&item.truth, suite.kind),
                (Truth::Pope { .. }, TaskKind::Pope) | (Truth::Caption { .. }, TaskKind::Caption)
            );
            if !ok {
                return Err(format!("item {} has truth of the wrong kind for a {} suite", item.id, suite.kind));
            }
        }
        Ok(suite)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        fs::write(path, self.to_json() + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, String> {
        let text = fs::read_to_string(path.as_ref()).map_err(|e| format!("{}: {e}", path.as_ref().display()))?;
        Self::from_json(&text)
    }
}
