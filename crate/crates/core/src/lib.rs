//! Robust multimodal deception-detection building blocks at desk scale.
//!
//! - [`numerics`]: a small reverse-mode tensor engine and finite-difference checker.
//! - [`sics`]: the gated global-prior / per-sample residual feature adapter.
//! - [`dmc`]: unimodal students distilled toward the fused prediction.
//! - [`harness`]: synthetic data, training objective, ablations, diagnostics.
//! - [`schema`]: the single-line audit report grammar, corpus filters, audit
//!   statistics and dataset manifest checks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod dmc;
pub mod harness;
pub mod numerics;
pub mod schema;
pub mod sics;

/// Binary label. Index 0 is deceptive, which is also the positive class for F1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Deceptive,
    Truthful,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Deceptive => 0,
            Label::Truthful => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Deceptive
        } else {
            Label::Truthful
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Deceptive => "deceptive",
            Label::Truthful => "truthful",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    /// Case-insensitive, surrounding whitespace ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "deceptive" => Ok(Label::Deceptive),
            "truthful" => Ok(Label::Truthful),
            _ => Err(s.trim().to_string()),
        }
    }
}
