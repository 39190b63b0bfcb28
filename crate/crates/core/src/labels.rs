//! Task label spaces shared by the store, exports and metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Classification task a label index is expressed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// `clean` vs `dirty`.
    Binary,
    /// `clean`, `lightly dirty`, `heavily dirty`.
    ThreeClass,
}

const BINARY: [&str; 2] = ["clean", "dirty"];
const THREE_CLASS: [&str; 3] = ["clean", "lightly dirty", "heavily dirty"];

impl Task {
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Task::Binary => &BINARY,
            Task::ThreeClass => &THREE_CLASS,
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    /// The binary task reports positive-class metrics for `dirty`.
    pub fn positive_class(self) -> Option<usize> {
        match self {
            Task::Binary => Some(1),
            Task::ThreeClass => None,
        }
    }

    /// Filesystem-safe directory name for a class.
    pub fn dir_name(self, class: usize) -> Option<String> {
        self.class_names().get(class).map(|n| n.replace(' ', "_"))
    }

    /// Map a label of this task into `target`. Returns `None` when the
    /// label has no counterpart (a binary `dirty` has no known severity).
    pub fn convert(self, label: usize, target: Task) -> Option<usize> {
        if label >= self.num_classes() {
            return None;
        }
        match (self, target) {
            (a, b) if a == b => Some(label),
            (Task::ThreeClass, Task::Binary) => Some(usize::from(label > 0)),
            (Task::Binary, Task::ThreeClass) => (label == 0).then_some(0),
            _ => unreachable!(),
        }
    }

    /// Parse a label given either as a class index or as a class name
    /// (case-insensitive; `_` and ` ` are interchangeable).
    pub fn parse_label(self, raw: &str) -> Option<usize> {
        let raw = raw.trim();
        if let Ok(idx) = raw.parse::<usize>() {
            return (idx < self.num_classes()).then_some(idx);
        }
        let norm = raw.to_ascii_lowercase().replace('_', " ");
        self.class_names().iter().position(|n| *n == norm)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Binary => "binary",
            Task::ThreeClass => "three-class",
        })
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(Task::Binary),
            "three-class" | "three_class" | "3" => Ok(Task::ThreeClass),
            other => Err(format!("unknown task `{other}` (expected `binary` or `three-class`)")),
        }
    }
}
