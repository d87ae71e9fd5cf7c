use serde::{Deserialize, Serialize};

use super::corpus::Record;
use super::report::parse_report;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueTag {
    Correct,
    Counterfactual,
    NonExistent,
}

impl CueTag {
    pub const ALL: [CueTag; 3] = [CueTag::Correct, CueTag::Counterfactual, CueTag::NonExistent];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningTag {
    Correct,
    FalseCue,
    Incoherent,
    SingleCue,
}

impl ReasoningTag {
    pub const ALL: [ReasoningTag; 4] = [
        ReasoningTag::Correct,
        ReasoningTag::FalseCue,
        ReasoningTag::Incoherent,
        ReasoningTag::SingleCue,
    ];
}

/// Audit of one report: a tag per cited cue and one for the reasoning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTags {
    #[serde(default)]
    pub visual: Vec<CueTag>,
    #[serde(default)]
    pub acoustic: Vec<CueTag>,
    pub reasoning: ReasoningTag,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryShare {
    pub category: String,
    pub count: usize,
    pub fraction: f64,
}

/// Counts per category, in taxonomy order. Empty when nothing was tagged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AxisSummary {
    pub total: usize,
    pub categories: Vec<CategoryShare>,
}

impl AxisSummary {
    fn from_counts<T: Serialize>(labels: &[T], counts: &[usize]) -> Self {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Self::default();
        }
        let categories = labels
            .iter()
            .zip(counts)
            .map(|(l, &count)| CategoryShare {
                category: serde_json::to_value(l)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                count,
                fraction: count as f64 / total as f64,
            })
            .collect();
        Self { total, categories }
    }

    pub fn fraction(&self, category: &str) -> Option<f64> {
        self.categories.iter().find(|c| c.category == category).map(|c| c.fraction)
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.categories.iter().map(|c| c.fraction).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub records: usize,
    pub visual: AxisSummary,
    pub acoustic: AxisSummary,
    pub reasoning: AxisSummary,
}

pub fn audit_stats<'a>(tagged: impl IntoIterator<Item = &'a AuditTags>) -> AuditSummary {
    let (mut visual, mut acoustic, mut reasoning) = ([0usize; 3], [0usize; 3], [0usize; 4]);
    let mut records = 0;
    let cue_slot = |t: &CueTag| CueTag::ALL.iter().position(|c| c == t).expect("closed set");
    for tags in tagged {
        records += 1;
        tags.visual.iter().for_each(|t| visual[cue_slot(t)] += 1);
        tags.acoustic.iter().for_each(|t| acoustic[cue_slot(t)] += 1);
        reasoning[ReasoningTag::ALL.iter().position(|r| *r == tags.reasoning).expect("closed set")] += 1;
    }
    AuditSummary {
        records,
        visual: AxisSummary::from_counts(&CueTag::ALL, &visual),
        acoustic: AxisSummary::from_counts(&CueTag::ALL, &acoustic),
        reasoning: AxisSummary::from_counts(&ReasoningTag::ALL, &reasoning),
    }
}

/// Half-open word-count bin `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
}

/// Reasoning-field word counts. All statistics are absent for an empty corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthSummary {
    pub count: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub min: Option<usize>,
    pub max: Option<usize>,
    pub histogram: Vec<Bin>,
}

pub const DEFAULT_BIN_WIDTH: usize = 5;

pub fn word_count_stats(counts: &[usize], bin_width: usize) -> LengthSummary {
    if counts.is_empty() {
        return LengthSummary::default();
    }
    let bin_width = bin_width.max(1);
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let max = sorted[n - 1];
    let histogram = (0..=max / bin_width)
        .map(|b| {
            let (lo, hi) = (b * bin_width, (b + 1) * bin_width);
            Bin {
                lo,
                hi,
                count: sorted.iter().filter(|&&c| c >= lo && c < hi).count(),
            }
        })
        .collect();
    LengthSummary {
        count: n,
        mean: Some(sorted.iter().sum::<usize>() as f64 / n as f64),
        median: Some(median),
        min: Some(sorted[0]),
        max: Some(max),
        histogram,
    }
}

/// Word counts of the reasoning field over the records that parse.
pub fn length_stats(records: &[Record], bin_width: usize) -> LengthSummary {
    let counts: Vec<usize> = records
        .iter()
        .filter_map(|r| parse_report(&r.line).ok())
        .map(|r| r.reasoning.split_whitespace().count())
        .collect();
    word_count_stats(&counts, bin_width)
}
