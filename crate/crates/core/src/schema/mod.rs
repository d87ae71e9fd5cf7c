//! Single-line audit reports, corpus filters, audit statistics and manifest checks.

mod audit;
mod corpus;
mod manifest;
mod report;

pub use audit::{
    audit_stats, length_stats, word_count_stats, AuditSummary, AuditTags, AxisSummary, Bin, CategoryShare, CueTag,
    LengthSummary, ReasoningTag, DEFAULT_BIN_WIDTH,
};
pub use corpus::{
    dedup_filter, filter_corpus, read_jsonl, read_plain, similarity, validate_rules, AiCheck, CorpusError, DropCounts,
    DropReason, Dropped, FilterReport, NgramProfile, NoAiCheck, Record, ThresholdError, DEFAULT_DEDUP_THRESHOLD,
};
pub use manifest::{
    read_manifest, validate_manifest, ManifestEntry, ManifestError, ManifestReport, Ratio, Totals, Violation,
    ViolationKind, T4_MANIFEST_CSV, T4_TOTALS,
};
pub use report::{parse_report, AuditReport, ParseError, FIELD_COUNT, FIELD_LABELS};
