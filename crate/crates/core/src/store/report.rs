use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{DatasetStore, ManifestCounts};
use crate::prompt::PromptTemplate;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionUsage {
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCoverage {
    pub slot: String,
    /// Sums to the number of synthetic samples.
    pub total: u64,
    pub options_used: usize,
    pub options: Vec<OptionUsage>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSummary {
    pub seq: u64,
    pub stage: String,
    pub records: u64,
}

/// Summary of a store: counts, retention, prompt coverage and the most
/// recent config snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub manifest_id: String,
    pub counts: ManifestCounts,
    /// `selected / synthetic`, zero when nothing was generated.
    pub retention: f64,
    pub coverage: Vec<SlotCoverage>,
    pub stages: Vec<StageSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl PipelineReport {
    pub(super) fn build(store: &DatasetStore, template: Option<&PromptTemplate>) -> Self {
        let counts = store.counts();
        let retention = if counts.synthetic == 0 {
            0.0
        } else {
            counts.selected as f64 / counts.synthetic as f64
        };

        let mut usage: BTreeMap<&str, BTreeMap<usize, u64>> = BTreeMap::new();
        for r in store.synthetic() {
            if let Some(p) = &r.prompt {
                for (slot, &i) in &p.slot_choices {
                    *usage.entry(slot.as_str()).or_default().entry(i).or_default() += 1;
                }
            }
        }
        let coverage = match template {
            Some(t) => t
                .slots()
                .iter()
                .map(|s| {
                    let used = usage.get(s.name.as_str());
                    let options = s
                        .options
                        .iter()
                        .enumerate()
                        .map(|(i, o)| OptionUsage {
                            index: i,
                            text: Some(o.text.clone()),
                            count: used.and_then(|u| u.get(&i)).copied().unwrap_or(0),
                        })
                        .collect();
                    slot_coverage(s.name.clone(), options)
                })
                .collect(),
            None => usage
                .iter()
                .map(|(slot, used)| {
                    let options = used
                        .iter()
                        .map(|(&index, &count)| OptionUsage {
                            index,
                            text: None,
                            count,
                        })
                        .collect();
                    slot_coverage((*slot).to_owned(), options)
                })
                .collect(),
        };

        PipelineReport {
            manifest_id: store.manifest_id().to_owned(),
            counts,
            retention,
            coverage,
            stages: store
                .commits()
                .map(|c| StageSummary {
                    seq: c.seq,
                    stage: c.stage.clone(),
                    records: c.records,
                })
                .collect(),
            config: store.commits().filter_map(|c| c.config.clone()).last(),
        }
    }

    pub fn to_text(&self) -> String {
        let c = &self.counts;
        let mut out = String::new();
        let _ = writeln!(out, "manifest {}", self.manifest_id);
        let _ = writeln!(out, "records    {:>8}", c.records);
        let _ = writeln!(out, "  real     {:>8}", c.real);
        let _ = writeln!(out, "  synthetic{:>8}", c.synthetic);
        let _ = writeln!(out, "  selected {:>8}", c.selected);
        let _ = writeln!(out, "  rejected {:>8}", c.rejected);
        let _ = writeln!(out, "retention  {}/{} = {:.4}", c.selected, c.synthetic, self.retention);
        if !c.by_class.is_empty() {
            let _ = writeln!(out, "classes");
            for (name, n) in &c.by_class {
                let _ = writeln!(out, "  {name:<14}{n:>8}");
            }
        }
        if !self.coverage.is_empty() {
            let _ = writeln!(out, "prompt coverage");
            for s in &self.coverage {
                let _ = writeln!(
                    out,
                    "  {:<40} {}/{} options used",
                    s.slot,
                    s.options_used,
                    s.options.len()
                );
            }
        }
        if !self.stages.is_empty() {
            let _ = writeln!(out, "stages");
            for s in &self.stages {
                let _ = writeln!(out, "  #{:<3} {:<10} {:>6} records", s.seq, s.stage, s.records);
            }
        }
        out
    }
}

fn slot_coverage(slot: String, options: Vec<OptionUsage>) -> SlotCoverage {
    SlotCoverage {
        slot,
        total: options.iter().map(|o| o.count).sum(),
        options_used: options.iter().filter(|o| o.count > 0).count(),
        options,
    }
}
