//! POPE, CHAIR and latency metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::DecodeState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryOutcome {
    pub predicted: bool,
    pub actual: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopeMetrics {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
    /// Set when precision, recall or F1 had a zero denominator and was reported as 0.
    pub f1_undefined: bool,
}

pub fn pope_metrics(outcomes: &[BinaryOutcome]) -> Result<PopeMetrics> {
    if outcomes.is_empty() {
        return Err(MetricsError::InvalidInput("no outcomes".into()));
    }
    let count = |p: bool, a: bool| outcomes.iter().filter(|o| o.predicted == p && o.actual == a).count();
    let (tp, fp, tn, fn_) = (count(true, true), count(true, false), count(false, false), count(false, true));
    let n = outcomes.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1_undefined = tp == 0;
    let f1 = if f1_undefined { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(PopeMetrics {
        n,
        tp,
        fp,
        tn,
        fn_,
        accuracy: ratio(tp + tn, n),
        precision,
        recall,
        f1,
        yes_ratio: ratio(tp + fp, n),
        f1_undefined,
    })
}

/// Binarizes a free-form answer: the first affirmative or negative keyword
/// wins, case-insensitively. `None` means no keyword was found.
pub fn parse_yes_no(text: &str) -> Option<bool> {
    const YES: [&str; 5] = ["yes", "yeah", "yep", "true", "correct"];
    const NO: [&str; 6] = ["no", "not", "nope", "false", "none", "incorrect"];
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let w = word.to_lowercase();
        if YES.contains(&w.as_str()) {
            return Some(true);
        }
        if NO.contains(&w.as_str()) {
            return Some(false);
        }
    }
    None
}

/// Maps surface phrases to canonical object labels.
///
/// File format: one canonical label per line, optionally followed by `:` and
/// comma-separated synonyms. `#` starts a comment.
///
/// ```text
/// person: man, woman, people
/// tv: television
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynonymTable {
    phrases: BTreeMap<String, String>,
    longest: usize,
}

impl SynonymTable {
    /// Every label maps to itself only.
    pub fn identity<S: AsRef<str>>(labels: impl IntoIterator<Item = S>) -> Self {
        let mut t = Self::default();
        for l in labels {
            t.insert(l.as_ref(), l.as_ref());
        }
        t
    }

    pub fn insert(&mut self, phrase: &str, canonical: &str) {
        let key = normalize(phrase);
        self.longest = self.longest.max(key.split(' ').count());
        self.phrases.insert(key, canonical.trim().to_string());
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (canonical, rest) = line.split_once(':').unwrap_or((line, ""));
            let canonical = canonical.trim();
            if canonical.is_empty() {
                return Err(MetricsError::InvalidInput(format!("line {}: empty label", i + 1)));
            }
            t.insert(canonical, canonical);
            for syn in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                t.insert(syn, canonical);
            }
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())
            .map_err(|e| MetricsError::InvalidInput(format!("{}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn canonical(&self, phrase: &str) -> Option<&str> {
        self.phrases.get(&normalize(phrase)).map(String::as_str)
    }

    /// Object labels mentioned in `text`, matching the longest phrase first.
    /// A trailing plural `s` is tolerated.
    pub fn extract(&self, text: &str) -> BTreeSet<String> {
        let words: Vec<String> =
            text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect();
        let mut found = BTreeSet::new();
        let mut i = 0;
        'outer: while i < words.len() {
            for len in (1..=self.longest.min(words.len() - i)).rev() {
                let phrase = words[i..i + len].join(" ");
                let hit =
                    self.phrases.get(&phrase).or_else(|| phrase.strip_suffix('s').and_then(|p| self.phrases.get(p)));
                if let Some(label) = hit {
                    found.insert(label.clone());
                    i += len;
                    continue 'outer;
                }
            }
            i += 1;
        }
        found
    }
}

fn normalize(s: &str) -> String {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSentence {
    pub text: String,
    pub mentioned: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub generated_objects: BTreeSet<String>,
    pub ground_truth_objects: BTreeSet<String>,
    pub sentences: Vec<CaptionSentence>,
    pub token_count: usize,
}

impl CaptionRecord {
    /// Builds a record from caption sentences, folding mentions through `synonyms`.
    pub fn from_sentences<S: AsRef<str>>(
        sentences: &[S],
        ground_truth: impl IntoIterator<Item = String>,
        synonyms: &SynonymTable,
        token_count: usize,
    ) -> Self {
        let sentences: Vec<CaptionSentence> = sentences
            .iter()
            .map(|s| CaptionSentence { text: s.as_ref().to_string(), mentioned: synonyms.extract(s.as_ref()) })
            .collect();
        let generated_objects = sentences.iter().flat_map(|s| s.mentioned.iter().cloned()).collect();
        Self { generated_objects, ground_truth_objects: ground_truth.into_iter().collect(), sentences, token_count }
    }

    fn hallucinated(&self) -> usize {
        self.generated_objects.difference(&self.ground_truth_objects).count()
    }

    fn hallucinated_sentences(&self) -> usize {
        self.sentences.iter().filter(|s| s.mentioned.iter().any(|o| !self.ground_truth_objects.contains(o))).count()
    }

    fn hits(&self) -> usize {
        self.generated_objects.intersection(&self.ground_truth_objects).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChairMetrics {
    pub records: usize,
    /// Pooled over all records.
    pub chair_i: f64,
    pub chair_s: f64,
    pub recall: f64,
    pub avg_length: f64,
    /// Mean of per-record values, for diagnostics.
    pub macro_chair_i: f64,
    pub macro_chair_s: f64,
    pub macro_recall: f64,
    pub generated_objects: usize,
    pub hallucinated_objects: usize,
    pub sentences: usize,
    pub hallucinated_sentences: usize,
}

pub fn chair_metrics(records: &[CaptionRecord]) -> Result<ChairMetrics> {
    if records.is_empty() {
        return Err(MetricsError::InvalidInput("no caption records".into()));
    }
    if let Some(i) = records.iter().position(|r| r.ground_truth_objects.is_empty()) {
        return Err(MetricsError::InvalidInput(format!("record {i} has no ground-truth objects")));
    }
    for (i, r) in records.iter().enumerate() {
        if r.sentences.iter().any(|s| !s.mentioned.is_subset(&r.generated_objects)) {
            return Err(MetricsError::InvalidInput(format!(
                "record {i} mentions objects missing from its generated set"
            )));
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let sum = |f: &dyn Fn(&CaptionRecord) -> usize| records.iter().map(f).sum::<usize>();
    let generated = sum(&|r| r.generated_objects.len());
    let hallucinated = sum(&|r| r.hallucinated());
    let sentences = sum(&|r| r.sentences.len());
    let bad_sentences = sum(&|r| r.hallucinated_sentences());
    let hits = sum(&|r| r.hits());
    let truth = sum(&|r| r.ground_truth_objects.len());
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&CaptionRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    Ok(ChairMetrics {
        records: records.len(),
        chair_i: ratio(hallucinated, generated),
        chair_s: ratio(bad_sentences, sentences),
        recall: ratio(hits, truth),
        avg_length: sum(&|r| r.token_count) as f64 / n,
        macro_chair_i: mean(&|r| ratio(r.hallucinated(), r.generated_objects.len())),
        macro_chair_s: mean(&|r| ratio(r.hallucinated_sentences(), r.sentences.len())),
        macro_recall: mean(&|r| ratio(r.hits(), r.ground_truth_objects.len())),
        generated_objects: generated,
        hallucinated_objects: hallucinated,
        sentences,
        hallucinated_sentences: bad_sentences,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub tokens: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

/// Aggregates per-token latencies across decode states.
pub fn latency_stats(states: &[DecodeState]) -> Result<LatencyStats> {
    latency_from_samples(states.iter().flat_map(|s| s.per_token_latency_ms.iter().copied()).collect())
}

pub fn latency_from_samples(mut samples: Vec<f64>) -> Result<LatencyStats> {
    if samples.is_empty() {
        return Err(MetricsError::InvalidInput("no generated tokens".into()));
    }
    samples.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        tokens: samples.len(),
        mean_ms: samples.iter().sum::<f64>() / samples.len() as f64,
        p50_ms: percentile(&samples, 0.50),
        p95_ms: percentile(&samples, 0.95),
    })
}

/// Linear interpolation between closest ranks on sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Counts of values in `bins` equal-width bins over `[0, 1]`; the last bin
/// is closed on the right.
pub fn histogram_unit(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let i = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
}

/// Share of values in `[0, limit]`.
pub fn fraction_at_most(values: &[f64], limit: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|&&v| (0.0..=limit).contains(&v)).count() as f64 / values.len() as f64
}
