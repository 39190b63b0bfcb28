use serde::{Deserialize, Serialize};

use super::{Decision, FilterConfig, FilterOutcome, PromptGroupStats};
use crate::Real;

/// A sample that could not be scored (e.g. a zero-norm embedding).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvalidSample {
    pub sample_id: String,
    pub prompt_id: String,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    /// Scored plus invalid.
    pub total: usize,
    pub selected: usize,
    pub rejected: usize,
    pub invalid: usize,
}

/// Machine-readable record of one filter application.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct FilterReport<T> {
    pub config: FilterConfig<T>,
    pub counts: FilterCounts,
    /// `selected / total`.
    pub retention: f64,
    pub groups: Vec<PromptGroupStats<T>>,
    pub decisions: Vec<Decision<T>>,
    #[serde(default)]
    pub invalid: Vec<InvalidSample>,
}

impl<T: Real> FilterReport<T> {
    pub fn new(
        config: FilterConfig<T>,
        groups: Vec<PromptGroupStats<T>>,
        outcome: FilterOutcome<T>,
        invalid: Vec<InvalidSample>,
    ) -> Self {
        let selected = outcome.selected_count();
        let scored = outcome.decisions.len();
        let total = scored + invalid.len();
        FilterReport {
            config,
            counts: FilterCounts {
                total,
                selected,
                rejected: scored - selected,
                invalid: invalid.len(),
            },
            retention: if total == 0 {
                0.0
            } else {
                selected as f64 / total as f64
            },
            groups,
            decisions: outcome.decisions,
            invalid,
        }
    }

    pub fn to_json_pretty(&self) -> serde_json::Result<String>
    where
        T: Serialize,
    {
        serde_json::to_string_pretty(self)
    }
}
