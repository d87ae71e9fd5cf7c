use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Label;

/// Number of `;`-separated fields in a report line.
pub const FIELD_COUNT: usize = 4;

/// Canonical field labels, in canonical order.
pub const FIELD_LABELS: [&str; FIELD_COUNT] = ["Video Cues", "Audio Cues", "Reasoning", "Prediction"];

#[derive(Clone, Debug, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseError {
    #[error("expected {FIELD_COUNT} ';'-separated fields, found {found}")]
    FieldCount { found: usize },
    #[error("field {index} is empty")]
    EmptyField { index: usize },
    #[error("field {index}: unknown prediction {value:?} (expected deceptive or truthful)")]
    UnknownPrediction { index: usize, value: String },
    #[error("field {index} contains an internal ';'")]
    InternalSemicolon { index: usize },
    #[error("field {index} is labeled {label:?}, which does not belong there")]
    MisplacedLabel { index: usize, label: String },
}

impl ParseError {
    /// Segment the error points at, when there is one.
    pub fn index(&self) -> Option<usize> {
        match self {
            ParseError::FieldCount { .. } => None,
            ParseError::EmptyField { index }
            | ParseError::UnknownPrediction { index, .. }
            | ParseError::InternalSemicolon { index }
            | ParseError::MisplacedLabel { index, .. } => Some(*index),
        }
    }
}

/// A single-line audit report `Video Cues: …; Audio Cues: …; Reasoning: …; Prediction: …`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub video_cues: String,
    pub audio_cues: String,
    pub reasoning: String,
    pub prediction: Label,
    /// The line as it was read.
    pub raw_line: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Field {
    Video,
    Audio,
    Reasoning,
    Prediction,
}

impl Field {
    fn position(self) -> usize {
        self as usize
    }
}

const ALIASES: [(&str, Field); 5] = [
    ("video cues", Field::Video),
    ("visual cues", Field::Video),
    ("audio cues", Field::Audio),
    ("reasoning", Field::Reasoning),
    ("prediction", Field::Prediction),
];

/// Splits a leading `Label:` off a segment, case-insensitively.
fn strip_label(segment: &str) -> (Option<(Field, &str)>, &str) {
    let trimmed = segment.trim_start();
    for (alias, field) in ALIASES {
        let Some(head) = trimmed.get(..alias.len()) else { continue };
        if !head.eq_ignore_ascii_case(alias) {
            continue;
        }
        if let Some(rest) = trimmed[alias.len()..].trim_start().strip_prefix(':') {
            return (Some((field, head)), rest.trim());
        }
    }
    (None, segment.trim())
}

impl AuditReport {
    pub fn new(video_cues: &str, audio_cues: &str, reasoning: &str, prediction: Label) -> Result<Self, ParseError> {
        let fields = [video_cues, audio_cues, reasoning];
        for (index, f) in fields.iter().enumerate() {
            if f.trim().is_empty() {
                return Err(ParseError::EmptyField { index });
            }
            if f.contains(';') {
                return Err(ParseError::InternalSemicolon { index });
            }
        }
        let mut report = Self {
            video_cues: video_cues.trim().to_string(),
            audio_cues: audio_cues.trim().to_string(),
            reasoning: reasoning.trim().to_string(),
            prediction,
            raw_line: String::new(),
        };
        report.raw_line = report.canonical();
        Ok(report)
    }

    /// `Video Cues: v; Audio Cues: a; Reasoning: r; Prediction: p`.
    pub fn canonical(&self) -> String {
        format!(
            "Video Cues: {}; Audio Cues: {}; Reasoning: {}; Prediction: {}",
            self.video_cues, self.audio_cues, self.reasoning, self.prediction
        )
    }

    /// Whether the line was already in canonical form.
    pub fn is_canonical(&self) -> bool {
        self.raw_line == self.canonical()
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

impl FromStr for AuditReport {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_report(s)
    }
}

/// Parses one report line.
///
/// Labels are optional and matched case-insensitively; `Visual Cues` is accepted for
/// video. When both cue segments are labeled they may come in either order and are
/// normalized. Fields may not contain `;`: a labeled line that splits into more than
/// four segments, where an unlabeled segment follows a labeled one, is reported as an
/// internal semicolon in the field it interrupts.
pub fn parse_report(line: &str) -> Result<AuditReport, ParseError> {
    let raw_line = line.strip_suffix('\n').unwrap_or(line);
    let raw_line = raw_line.strip_suffix('\r').unwrap_or(raw_line);
    let segments: Vec<&str> = raw_line.split(';').collect();
    let labeled: Vec<(Option<(Field, &str)>, &str)> = segments.iter().map(|s| strip_label(s)).collect();

    if segments.len() != FIELD_COUNT {
        if segments.len() > FIELD_COUNT {
            let any_labeled = labeled.iter().any(|(l, _)| l.is_some());
            if any_labeled {
                // The first unlabeled segment after a labeled one continues that field.
                let mut field = None;
                for (l, _) in &labeled {
                    match l {
                        Some((f, _)) => field = Some(f.position()),
                        None => {
                            if let Some(index) = field {
                                return Err(ParseError::InternalSemicolon { index });
                            }
                        }
                    }
                }
            }
        }
        return Err(ParseError::FieldCount { found: segments.len() });
    }

    let mut fields: [(usize, &str); FIELD_COUNT] = [(0, ""); FIELD_COUNT];
    for (index, (l, text)) in labeled.iter().enumerate() {
        fields[index] = (index, text);
        if let Some((f, label)) = l {
            if f.position() != index {
                let swapped_cues = matches!(
                    (index, f, &labeled[1 - index.min(1)].0),
                    (0, Field::Audio, Some((Field::Video, _))) | (1, Field::Video, Some((Field::Audio, _)))
                );
                if !swapped_cues {
                    return Err(ParseError::MisplacedLabel {
                        index,
                        label: label.to_string(),
                    });
                }
            }
        }
    }
    if matches!(labeled[0].0, Some((Field::Audio, _))) {
        fields.swap(0, 1);
    }
    for (index, text) in fields {
        if text.is_empty() {
            return Err(ParseError::EmptyField { index });
        }
    }
    let (pred_index, pred_text) = fields[3];
    let prediction = pred_text.parse::<Label>().map_err(|value| ParseError::UnknownPrediction {
        index: pred_index,
        value,
    })?;
    Ok(AuditReport {
        video_cues: fields[0].1.to_string(),
        audio_cues: fields[1].1.to_string(),
        reasoning: fields[2].1.to_string(),
        prediction,
        raw_line: raw_line.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LINE: &str = "Video Cues: gaze aversion; Audio Cues: rising pitch; Reasoning: cues co-occur under direct question; Prediction: deceptive";

    #[test]
    fn canonical_line_parses_and_round_trips() {
        let r = parse_report(LINE).unwrap();
        assert_eq!(r.video_cues, "gaze aversion");
        assert_eq!(r.audio_cues, "rising pitch");
        assert_eq!(r.prediction, Label::Deceptive);
        assert_eq!(r.canonical(), LINE);
        assert!(r.is_canonical());
    }

    #[test]
    fn spec_failures() {
        assert_eq!(parse_report("a; b; c"), Err(ParseError::FieldCount { found: 3 }));
        assert_eq!(
            parse_report("a; b; c; maybe"),
            Err(ParseError::UnknownPrediction {
                index: 3,
                value: "maybe".into()
            })
        );
        assert_eq!(parse_report("a;  ; c; truthful"), Err(ParseError::EmptyField { index: 1 }));
        assert_eq!(
            parse_report("Video Cues: a; b; Audio Cues: c; Reasoning: r; Prediction: truthful"),
            Err(ParseError::InternalSemicolon { index: 0 })
        );
        assert_eq!(parse_report("a; b; c; d; truthful"), Err(ParseError::FieldCount { found: 5 }));
    }

    #[test]
    fn labels_are_optional_and_case_insensitive() {
        let r = parse_report("x; y; z; TRUTHFUL").unwrap();
        assert_eq!((r.video_cues.as_str(), r.prediction), ("x", Label::Truthful));
        let r = parse_report("video cues:x;AUDIO CUES :y; reasoning: z;prediction:Deceptive").unwrap();
        assert_eq!(r.canonical(), "Video Cues: x; Audio Cues: y; Reasoning: z; Prediction: deceptive");
        assert!(!r.is_canonical());
    }

    #[test]
    fn swapped_cues_are_normalized() {
        let r = parse_report("Audio Cues: pitch; Visual Cues: gaze; Reasoning: r; Prediction: truthful").unwrap();
        assert_eq!((r.video_cues.as_str(), r.audio_cues.as_str()), ("gaze", "pitch"));
        assert_eq!(
            parse_report("Audio Cues: pitch; gaze; Reasoning: r; Prediction: truthful"),
            Err(ParseError::MisplacedLabel {
                index: 0,
                label: "Audio Cues".into()
            })
        );
        assert!(matches!(
            parse_report("Reasoning: r; Audio Cues: a; Video Cues: v; Prediction: truthful"),
            Err(ParseError::MisplacedLabel { index: 0, .. })
        ));
    }

    #[test]
    fn constructor_rejects_bad_fields() {
        assert_eq!(
            AuditReport::new("a;b", "c", "d", Label::Truthful),
            Err(ParseError::InternalSemicolon { index: 0 })
        );
        assert_eq!(AuditReport::new("a", " ", "d", Label::Truthful), Err(ParseError::EmptyField { index: 1 }));
        let r = AuditReport::new("a", "b", "c", Label::Truthful).unwrap();
        assert_eq!(parse_report(&r.canonical()).unwrap(), r);
    }
}
