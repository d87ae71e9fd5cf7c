use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sample counts of one dataset edition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub edition: String,
    pub total: u64,
    pub deceptive: u64,
    pub truthful: u64,
}

/// Grand totals `(total, deceptive, truthful)`.
pub type Totals = (u64, u64, u64);

/// Published grand totals of the four T4-Deception editions.
pub const T4_TOTALS: Totals = (1695, 1130, 565);

/// The bundled T4-Deception manifest.
pub const T4_MANIFEST_CSV: &str = include_str!("../../fixtures/t4_deception.csv");

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("expected header edition,total,deceptive,truthful, found {0}")]
    Header(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

const HEADER: [&str; 4] = ["edition", "total", "deceptive", "truthful"];

/// Reads `edition,total,deceptive,truthful` rows. Row numbers in errors count the
/// header as row 1.
pub fn read_manifest<R: Read>(input: R) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().map(str::to_ascii_lowercase).collect::<Vec<_>>() != HEADER {
        if header.is_empty() || header.iter().all(str::is_empty) {
            return Ok(Vec::new());
        }
        return Err(ManifestError::Header(header.iter().collect::<Vec<_>>().join(",")));
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ManifestError::Row {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != HEADER.len() {
            return Err(ManifestError::Row {
                row,
                message: format!("expected {} cells, found {}", HEADER.len(), rec.len()),
            });
        }
        let count = |k: usize| {
            rec[k].parse::<u64>().map_err(|_| ManifestError::Row {
                row,
                message: format!("{} must be a non-negative integer, got {:?}", HEADER[k], &rec[k]),
            })
        };
        if rec[0].is_empty() {
            return Err(ManifestError::Row {
                row,
                message: "edition name is empty".into(),
            });
        }
        out.push(ManifestEntry {
            edition: rec[0].to_string(),
            total: count(1)?,
            deceptive: count(2)?,
            truthful: count(3)?,
        });
    }
    Ok(out)
}

/// `deceptive : truthful`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub deceptive: u64,
    pub truthful: u64,
}

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (d, t) = s.split_once(':').ok_or_else(|| format!("ratio {s:?} is not of the form D:T"))?;
        let parse = |x: &str| x.trim().parse::<u64>().map_err(|_| format!("bad ratio part {x:?}"));
        let ratio = Ratio {
            deceptive: parse(d)?,
            truthful: parse(t)?,
        };
        if ratio.deceptive == 0 && ratio.truthful == 0 {
            return Err("ratio 0:0 is meaningless".into());
        }
        Ok(ratio)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.deceptive, self.truthful)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    TotalMismatch,
    RatioViolation,
    GrandTotalMismatch,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::TotalMismatch => "total mismatch",
            ViolationKind::RatioViolation => "ratio violation",
            ViolationKind::GrandTotalMismatch => "grand total mismatch",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// `None` for checks over the whole manifest.
    pub edition: Option<String>,
    pub kind: ViolationKind,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestReport {
    pub editions: usize,
    pub totals: Totals,
    /// Groups implied by the ratio, e.g. identities with one truthful and two deceptive participants.
    pub groups: Option<u64>,
    pub violations: Vec<Violation>,
    pub warnings: Vec<String>,
}

impl ManifestReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_ratio(edition: Option<&str>, deceptive: u64, truthful: u64, ratio: Ratio, out: &mut Vec<Violation>) {
    if deceptive * ratio.truthful != truthful * ratio.deceptive {
        let who = edition.unwrap_or("overall");
        out.push(Violation {
            edition: edition.map(str::to_string),
            kind: ViolationKind::RatioViolation,
            message: format!("ratio violation: {who} has {deceptive} deceptive to {truthful} truthful, expected {ratio}"),
        });
    }
}

/// Checks every edition's arithmetic, the grand totals and, when asked, the
/// deceptive-to-truthful ratio per edition and overall. Every violation is reported.
pub fn validate_manifest(entries: &[ManifestEntry], ratio: Option<Ratio>, expected: Option<Totals>) -> ManifestReport {
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    if entries.is_empty() {
        warnings.push("manifest has no editions; nothing to check".to_string());
    }
    for e in entries {
        if e.deceptive + e.truthful != e.total {
            violations.push(Violation {
                edition: Some(e.edition.clone()),
                kind: ViolationKind::TotalMismatch,
                message: format!(
                    "total mismatch: {} lists {} but {} + {} = {}",
                    e.edition,
                    e.total,
                    e.deceptive,
                    e.truthful,
                    e.deceptive + e.truthful
                ),
            });
        }
        if let Some(r) = ratio {
            check_ratio(Some(&e.edition), e.deceptive, e.truthful, r, &mut violations);
        }
    }
    let totals = entries.iter().fold((0, 0, 0), |(t, d, u), e| (t + e.total, d + e.deceptive, u + e.truthful));
    if totals.1 + totals.2 != totals.0 {
        violations.push(Violation {
            edition: None,
            kind: ViolationKind::TotalMismatch,
            message: format!("total mismatch: editions sum to {} but {} + {} = {}", totals.0, totals.1, totals.2, totals.1 + totals.2),
        });
    }
    let mut groups = None;
    if let Some(r) = ratio {
        if !entries.is_empty() {
            check_ratio(None, totals.1, totals.2, r, &mut violations);
            if r.truthful > 0 && totals.2 % r.truthful == 0 {
                groups = Some(totals.2 / r.truthful);
            }
        }
    }
    if let Some(exp) = expected {
        if totals != exp && !entries.is_empty() {
            violations.push(Violation {
                edition: None,
                kind: ViolationKind::GrandTotalMismatch,
                message: format!(
                    "grand total mismatch: found {}/{}/{}, expected {}/{}/{}",
                    totals.0, totals.1, totals.2, exp.0, exp.1, exp.2
                ),
            });
        }
    }
    ManifestReport {
        editions: entries.len(),
        totals,
        groups,
        violations,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_TO_ONE: Ratio = Ratio {
        deceptive: 2,
        truthful: 1,
    };

    #[test]
    fn bundled_manifest_is_consistent() {
        let entries = read_manifest(T4_MANIFEST_CSV.as_bytes()).unwrap();
        assert_eq!(entries.len(), 4);
        let r = validate_manifest(&entries, Some(TWO_TO_ONE), Some(T4_TOTALS));
        assert!(r.passed(), "{:?}", r.violations);
        assert_eq!(r.totals, (1695, 1130, 565));
        assert_eq!(r.groups, Some(565));
    }

    #[test]
    fn tampered_germany() {
        let mut entries = read_manifest(T4_MANIFEST_CSV.as_bytes()).unwrap();
        entries[1].deceptive = 469;
        let r = validate_manifest(&entries, Some(TWO_TO_ONE), Some(T4_TOTALS));
        let messages: Vec<&str> = r.violations.iter().map(|v| v.message.as_str()).collect();
        assert!(messages.iter().any(|m| m.starts_with("total mismatch: Germany")));
        assert!(messages.iter().any(|m| m.starts_with("ratio violation: Germany")));
        assert!(r.violations.iter().any(|v| v.kind == ViolationKind::GrandTotalMismatch));
    }

    #[test]
    fn empty_manifest_passes_with_a_warning() {
        let r = validate_manifest(&[], Some(TWO_TO_ONE), Some(T4_TOTALS));
        assert!(r.passed());
        assert_eq!(r.warnings.len(), 1);
        assert!(read_manifest("".as_bytes()).unwrap().is_empty());
        assert!(read_manifest("edition,total,deceptive,truthful\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn malformed_rows_name_their_row() {
        let csv = "edition,total,deceptive,truthful\nUS,876,584,292\nDE,7x2,468,234\n";
        match read_manifest(csv.as_bytes()) {
            Err(ManifestError::Row { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        let csv = "edition,total,deceptive,truthful\nUS,876,584\n";
        assert!(matches!(read_manifest(csv.as_bytes()), Err(ManifestError::Row { row: 2, .. })));
        assert!(matches!(read_manifest("a,b\n".as_bytes()), Err(ManifestError::Header(_))));
        assert!(matches!(read_manifest("edition,total,deceptive,truthful\nUS,-1,0,0\n".as_bytes()), Err(ManifestError::Row { row: 2, .. })));
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("2:1".parse::<Ratio>(), Ok(TWO_TO_ONE));
        assert!("2-1".parse::<Ratio>().is_err());
        assert!("0:0".parse::<Ratio>().is_err());
    }
}
