use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::labels::Task;
use crate::seed::ContentHash;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Real,
    Synthetic,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    #[default]
    None,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "" | "none" => Ok(Split::None),
            other => Err(format!("unknown split `{other}` (expected train, test or none)")),
        }
    }
}

/// How a synthetic sample was produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptProvenance {
    pub prompt_id: String,
    pub text: String,
    pub slot_choices: BTreeMap<String, usize>,
    pub request_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter_id: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub verdict: Verdict,
    pub reason: String,
    pub threshold: Option<f64>,
}

/// One stored image. Records are immutable; a later line with the same
/// `sample_id` supersedes an earlier one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: ContentHash,
    pub origin: Origin,
    /// Label space `label` is expressed in.
    pub task: Task,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptProvenance>,
    /// Fine-tuning caption of a real sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter_decision: Option<FilterDecision>,
    pub split: Split,
    /// Blob path relative to the store root.
    pub path: String,
    /// How many times these exact bytes were ingested.
    pub multiplicity: u32,
}

impl SampleRecord {
    pub fn prompt_id(&self) -> Option<&str> {
        self.prompt.as_ref().map(|p| p.prompt_id.as_str())
    }

    pub fn class_name(&self) -> &'static str {
        self.task.class_names()[self.label]
    }

    pub fn is_selected(&self) -> bool {
        matches!(
            self.filter_decision,
            Some(FilterDecision {
                verdict: Verdict::Kept,
                ..
            })
        )
    }

    pub fn is_rejected(&self) -> bool {
        matches!(
            self.filter_decision,
            Some(FilterDecision {
                verdict: Verdict::Rejected,
                ..
            })
        )
    }
}

/// Running tallies over the current view of a manifest.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub records: u64,
    pub real: u64,
    pub synthetic: u64,
    pub selected: u64,
    pub rejected: u64,
    /// Keyed by class name under each record's own task.
    pub by_class: BTreeMap<String, u64>,
}

impl ManifestCounts {
    pub fn tally<'a>(records: impl IntoIterator<Item = &'a SampleRecord>) -> Self {
        let mut c = ManifestCounts::default();
        for r in records {
            c.records += 1;
            match r.origin {
                Origin::Real => c.real += 1,
                Origin::Synthetic => c.synthetic += 1,
            }
            if r.is_selected() {
                c.selected += 1;
            }
            if r.is_rejected() {
                c.rejected += 1;
            }
            *c.by_class.entry(r.class_name().to_owned()).or_default() += 1;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub manifest_id: String,
    pub format: String,
}

/// Closes a delta. Everything between two commits is one atomic stage
/// result; `counts` is the tally of the whole view after the delta.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub seq: u64,
    pub stage: String,
    pub records: u64,
    pub counts: ManifestCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub info: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum ManifestEntry {
    Header(ManifestHeader),
    Record(SampleRecord),
    Commit(Commit),
}
