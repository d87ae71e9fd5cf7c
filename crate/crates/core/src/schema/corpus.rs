use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::audit::AuditTags;
use super::report::{parse_report, AuditReport, ParseError};

/// Similarity at or above which a record counts as a near duplicate.
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.95;

/// One corpus entry: an id, the raw report line and optional audit tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub line: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<AuditTags>,
}

impl Record {
    pub fn new(id: impl Into<String>, line: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            line: line.into(),
            tags: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One record per non-blank line; the id is the 1-based line number.
pub fn read_plain<R: BufRead>(input: R) -> Result<Vec<Record>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(Record::new((i + 1).to_string(), line));
        }
    }
    Ok(out)
}

/// JSON Lines with `{id, line, tags?}` objects. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Record>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CorpusError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Format,
    Duplicate,
    AiCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub id: String,
    pub reason: DropReason,
    pub detail: String,
    /// Structured parse error for format drops.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ParseError>,
    /// Id of the kept record this one duplicates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub format: usize,
    pub duplicate: usize,
    pub ai_check: usize,
}

/// Which records survived a filter and why the others did not.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: Vec<String>,
    pub dropped: Vec<Dropped>,
    pub counts: DropCounts,
}

impl FilterReport {
    fn drop(&mut self, d: Dropped) {
        match d.reason {
            DropReason::Format => self.counts.format += 1,
            DropReason::Duplicate => self.counts.duplicate += 1,
            DropReason::AiCheck => self.counts.ai_check += 1,
        }
        self.dropped.push(d);
    }

    pub fn is_clean(&self) -> bool {
        self.dropped.is_empty()
    }

    /// Folds a later stage in: its drops are added, its kept set replaces ours.
    fn then(mut self, later: FilterReport) -> FilterReport {
        self.kept = later.kept;
        for d in later.dropped {
            self.drop(d);
        }
        self
    }
}

/// Keeps the records that parse; the rest are dropped with their parse error.
pub fn validate_rules(records: &[Record]) -> FilterReport {
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };
    for r in records {
        match parse_report(&r.line) {
            Ok(_) => report.kept.push(r.id.clone()),
            Err(e) => report.drop(Dropped {
                id: r.id.clone(),
                reason: DropReason::Format,
                detail: e.to_string(),
                error: Some(e),
                duplicate_of: None,
                similarity: None,
            }),
        }
    }
    report
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Character 3-gram counts of normalized text. Text shorter than three characters
/// is a single gram.
#[derive(Clone, Debug, PartialEq)]
pub struct NgramProfile {
    text: String,
    counts: HashMap<String, u64>,
    norm_sq: u64,
}

impl NgramProfile {
    pub fn new(text: &str) -> Self {
        let text = normalize(text);
        let chars: Vec<char> = text.chars().collect();
        let mut counts: HashMap<String, u64> = HashMap::new();
        if chars.len() < 3 {
            if !chars.is_empty() {
                counts.insert(text.clone(), 1);
            }
        } else {
            for w in chars.windows(3) {
                *counts.entry(w.iter().collect()).or_default() += 1;
            }
        }
        let norm_sq = counts.values().map(|c| c * c).sum();
        Self { text, counts, norm_sq }
    }

    pub fn similarity(&self, other: &NgramProfile) -> f64 {
        if self.text == other.text {
            return 1.0;
        }
        if self.norm_sq == 0 || other.norm_sq == 0 {
            return 0.0;
        }
        let (small, large) = if self.counts.len() <= other.counts.len() {
            (self, other)
        } else {
            (other, self)
        };
        let dot: u64 = small
            .counts
            .iter()
            .filter_map(|(g, c)| large.counts.get(g).map(|d| c * d))
            .sum();
        (dot as f64 / ((self.norm_sq as f64).sqrt() * (other.norm_sq as f64).sqrt())).min(1.0)
    }
}

/// Cosine similarity of character 3-gram counts after lowercasing and collapsing
/// whitespace. Two empty texts score 1, an empty and a non-empty text 0.
pub fn similarity(a: &str, b: &str) -> f64 {
    NgramProfile::new(a).similarity(&NgramProfile::new(b))
}

#[derive(Debug, Error, PartialEq)]
#[error("threshold must lie in (0, 1], got {0}")]
pub struct ThresholdError(pub f64);

/// Greedy scan in input order: a record is dropped if it scores at least
/// `threshold` against any record already kept.
pub fn dedup_filter(records: &[Record], threshold: f64) -> Result<FilterReport, ThresholdError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ThresholdError(threshold));
    }
    let mut report = FilterReport {
        input: records.len(),
        ..Default::default()
    };
    let mut kept: Vec<(&str, NgramProfile)> = Vec::new();
    for r in records {
        let profile = NgramProfile::new(&r.line);
        let hit = kept
            .iter()
            .map(|(id, p)| (*id, p.similarity(&profile)))
            .find(|(_, s)| *s >= threshold);
        match hit {
            Some((id, score)) => report.drop(Dropped {
                id: r.id.clone(),
                reason: DropReason::Duplicate,
                detail: format!("similarity {score:.4} with {id}"),
                error: None,
                duplicate_of: Some(id.to_string()),
                similarity: Some(score),
            }),
            None => {
                report.kept.push(r.id.clone());
                kept.push((&r.id, profile));
            }
        }
    }
    Ok(report)
}

/// Stand-in for the model-based content check; returns a reason to reject.
pub trait AiCheck {
    fn reject(&self, report: &AuditReport) -> Option<String>;
}

/// Accepts everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoAiCheck;

impl AiCheck for NoAiCheck {
    fn reject(&self, _: &AuditReport) -> Option<String> {
        None
    }
}

impl<F: Fn(&AuditReport) -> Option<String>> AiCheck for F {
    fn reject(&self, report: &AuditReport) -> Option<String> {
        self(report)
    }
}

/// Format rules, then the content check, then near-duplicate removal.
pub fn filter_corpus(records: &[Record], threshold: f64, check: &dyn AiCheck) -> Result<FilterReport, ThresholdError> {
    let format = validate_rules(records);
    let mut checked = FilterReport {
        input: format.kept.len(),
        ..Default::default()
    };
    let mut survivors = Vec::new();
    for r in records.iter().filter(|r| format.kept.contains(&r.id)) {
        let parsed = parse_report(&r.line).expect("kept by the format stage");
        match check.reject(&parsed) {
            Some(why) => checked.drop(Dropped {
                id: r.id.clone(),
                reason: DropReason::AiCheck,
                detail: why,
                error: None,
                duplicate_of: None,
                similarity: None,
            }),
            None => {
                checked.kept.push(r.id.clone());
                survivors.push(r.clone());
            }
        }
    }
    let dedup = dedup_filter(&survivors, threshold)?;
    Ok(format.then(checked).then(dedup))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn records(lines: &[&str]) -> Vec<Record> {
        lines
            .iter()
            .enumerate()
            .map(|(i, l)| Record::new(format!("r{i}"), *l))
            .collect()
    }

    #[test]
    fn similarity_edge_cases() {
        assert_eq!(similarity("", ""), 1.0);
        assert_eq!(similarity("", "abc"), 0.0);
        assert_eq!(similarity("aaaa", "zzzz"), 0.0);
        assert_eq!(similarity("Same  Text", "same text"), 1.0);
        assert_eq!(similarity("ab", "ab "), 1.0);
        assert_eq!(similarity("ab", "abc"), 0.0);
    }

    #[test]
    fn mixed_corpus_counts() {
        let good = "a; b; c; truthful";
        let corpus = records(&[good, "a; b", good, "x; y; z; deceptive", "a; b; c; perhaps", good, good, "; b; c; truthful", good, good]);
        let r = validate_rules(&corpus);
        assert_eq!((r.kept.len(), r.dropped.len()), (7, 3));
        assert_eq!(r.counts.format, 3);
        assert_eq!(r.dropped[0].id, "r1");
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let corpus = records(&["one; two; three; truthful", "ONE;  two; three; truthful", "other; text; here; deceptive"]);
        let r = dedup_filter(&corpus, 0.95).unwrap();
        assert_eq!(r.kept, ["r0", "r2"]);
        assert_eq!(r.dropped[0].duplicate_of.as_deref(), Some("r0"));
        assert!(dedup_filter(&corpus, 0.0).is_err());
        assert!(dedup_filter(&corpus, 1.5).is_err());
    }

    #[test]
    fn pipeline_partitions_the_input() {
        let corpus = records(&["a; b; c; truthful", "a; b; c; truthful", "bad", "q; r; s; deceptive"]);
        let reject_q = |r: &AuditReport| (r.video_cues == "q").then(|| "flagged".to_string());
        let r = filter_corpus(&corpus, 0.95, &reject_q).unwrap();
        assert_eq!(r.input, 4);
        assert_eq!(r.kept, ["r0"]);
        assert_eq!(r.counts, DropCounts { format: 1, duplicate: 1, ai_check: 1 });
        let r = filter_corpus(&corpus, 0.95, &NoAiCheck).unwrap();
        assert_eq!(r.kept.len() + r.dropped.len(), 4);
    }

    #[test]
    fn readers() {
        let text = "a; b; c; truthful\n\nbad line\n";
        let r = read_plain(text.as_bytes()).unwrap();
        assert_eq!(r.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["1", "3"]);
        let jsonl = "{\"id\":\"x\",\"line\":\"a; b; c; truthful\"}\nnot json\n";
        match read_jsonl(jsonl.as_bytes()) {
            Err(CorpusError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
