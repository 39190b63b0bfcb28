//! Content-addressed image store with an append-only JSON Lines manifest.
//!
//! Layout under the store root:
//!
//! ```text
//! manifest.jsonl              header, records, commits
//! blobs/<2 hex>/<hash>.png    image bytes, named by SHA-256
//! reports/                    stage reports
//! export/<class>/<hash>.png   training bundle, plus export/index.csv
//! ```
//!
//! Every stage appends its records followed by one commit line. Readers only
//! see committed records; a torn tail left by a crash is ignored and cut off
//! before the next append.

mod record;
mod report;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde_json::Value;

pub use record::{
    Commit, FilterDecision, ManifestCounts, ManifestEntry, ManifestHeader, Origin, PromptProvenance, SampleRecord,
    Split, Verdict,
};
pub use report::{OptionUsage, PipelineReport, SlotCoverage, StageSummary};

use crate::filter::FilterReport;
use crate::image::{self, ImageError};
use crate::labels::Task;
use crate::prompt::PromptTemplate;
use crate::seed::{hash_parts, ContentHash};
use crate::Real;

pub const MANIFEST_FORMAT: &str = "dtgen-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_DIR: &str = "blobs";
pub const REPORT_DIR: &str = "reports";
pub const EXPORT_DIR: &str = "export";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("manifest line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("no manifest at {}", .0.display())]
    Missing(PathBuf),
    #[error("manifest already exists at {}", .0.display())]
    Exists(PathBuf),
    #[error("item {index}: {source}")]
    Image { index: usize, source: ImageError },
    #[error("item {index}: label {label} is not a {task} class")]
    UnknownLabel { index: usize, label: usize, task: Task },
    #[error("item {index}: {reason}")]
    Provenance { index: usize, reason: String },
    #[error("unknown sample_id `{0}`")]
    UnknownSample(String),
    #[error("sample `{0}` is not synthetic")]
    NotSynthetic(String),
    #[error("sample `{0}` appears more than once in the filter report")]
    DuplicateDecision(String),
    #[error("filter report covers {covered} of {synthetic} synthetic samples")]
    Conservation { synthetic: u64, covered: u64 },
    #[error("selection is empty; nothing to export")]
    EmptySelection,
    #[error("sample {0} is in the test split and cannot be exported for training")]
    TestSplit(ContentHash),
    #[error("sample {sample_id}: {from} label {label} has no {to} counterpart")]
    Unmappable {
        sample_id: ContentHash,
        label: usize,
        from: Task,
        to: Task,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Name, config snapshot and free-form info attached to a commit.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage {
    pub name: String,
    pub config: Option<Value>,
    pub info: BTreeMap<String, Value>,
}

impl Stage {
    pub fn new(name: impl Into<String>) -> Self {
        Stage {
            name: name.into(),
            ..Stage::default()
        }
    }

    pub fn with_config(mut self, config: Value) -> Self {
        self.config = Some(config);
        self
    }

    pub fn with_info(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.info.insert(key.into(), value.into());
        self
    }
}

/// An image to ingest with its label and provenance.
#[derive(Clone, Debug)]
pub struct IngestItem {
    pub bytes: Vec<u8>,
    pub origin: Origin,
    pub task: Task,
    pub label: usize,
    pub split: Split,
    pub prompt: Option<PromptProvenance>,
    /// Real samples only.
    pub caption: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestDelta {
    /// Newly stored samples, in input order.
    pub added: Vec<ContentHash>,
    /// Inputs whose bytes were already stored; their multiplicity grew.
    pub duplicates: Vec<ContentHash>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterDelta {
    pub selected: u64,
    pub rejected: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportBundle {
    pub dir: PathBuf,
    pub task: Task,
    pub rows: usize,
    pub per_class: BTreeMap<String, u64>,
}

pub struct DatasetStore {
    root: PathBuf,
    header: ManifestHeader,
    entries: Vec<ManifestEntry>,
    records: Vec<SampleRecord>,
    index: HashMap<ContentHash, usize>,
    committed_len: u64,
}

/// Relative blob path for a hash.
pub fn blob_rel_path(hash: &ContentHash) -> String {
    let hex = hash.to_hex();
    format!("{BLOB_DIR}/{}/{hex}.png", &hex[..2])
}

/// Deterministic manifest id from a caller-chosen label such as the run
/// seed and template version.
pub fn manifest_id_for(label: &str) -> String {
    hex::encode(&hash_parts([b"dtgen-manifest".as_slice(), label.as_bytes()])[..16])
}

impl DatasetStore {
    /// Create a new store with an empty manifest.
    pub fn create(root: impl Into<PathBuf>, manifest_id: impl Into<String>) -> Result<Self, StoreError> {
        let root = root.into();
        let manifest = root.join(MANIFEST_FILE);
        if manifest.exists() {
            return Err(StoreError::Exists(manifest));
        }
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let header = ManifestHeader {
            manifest_id: manifest_id.into(),
            format: MANIFEST_FORMAT.to_owned(),
        };
        let mut line = serde_json::to_string(&ManifestEntry::Header(header.clone())).expect("header serializes");
        line.push('\n');
        fs::write(&manifest, &line).map_err(io_err(&manifest))?;
        Ok(DatasetStore {
            root,
            entries: vec![ManifestEntry::Header(header.clone())],
            header,
            records: Vec::new(),
            index: HashMap::new(),
            committed_len: line.len() as u64,
        })
    }

    /// Open an existing store, validating every commit against the records
    /// it closes.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let manifest = root.join(MANIFEST_FILE);
        if !manifest.exists() {
            return Err(StoreError::Missing(manifest));
        }
        let file = File::open(&manifest).map_err(io_err(&manifest))?;
        let mut reader = BufReader::new(file);

        let mut header = None;
        let mut entries = Vec::new();
        let mut records: Vec<SampleRecord> = Vec::new();
        let mut index = HashMap::new();
        let mut pending: Vec<(usize, SampleRecord)> = Vec::new();
        let mut offset = 0u64;
        let mut committed_len = 0u64;
        let mut last_seq = None;
        let mut lineno = 0usize;
        let mut buf = String::new();

        loop {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(io_err(&manifest))?;
            if n == 0 {
                break;
            }
            lineno += 1;
            offset += n as u64;
            if !buf.ends_with('\n') {
                tracing::warn!(line = lineno, "ignoring truncated manifest line");
                break;
            }
            let entry: ManifestEntry =
                serde_json::from_str(buf.trim_end()).map_err(|source| StoreError::Json { line: lineno, source })?;
            let corrupt = |reason: String| StoreError::Corrupt { line: lineno, reason };
            match &entry {
                ManifestEntry::Header(h) => {
                    if header.is_some() || lineno != 1 {
                        return Err(corrupt("header must be the first and only header line".into()));
                    }
                    if h.format != MANIFEST_FORMAT {
                        return Err(corrupt(format!("unsupported format `{}`", h.format)));
                    }
                    header = Some(h.clone());
                    committed_len = offset;
                    entries.push(entry);
                }
                ManifestEntry::Record(r) => {
                    if header.is_none() {
                        return Err(corrupt("record before header".into()));
                    }
                    check_record(r).map_err(corrupt)?;
                    pending.push((lineno, r.clone()));
                }
                ManifestEntry::Commit(c) => {
                    if header.is_none() {
                        return Err(corrupt("commit before header".into()));
                    }
                    if last_seq.is_some_and(|s| c.seq != s + 1) || (last_seq.is_none() && c.seq != 0) {
                        return Err(corrupt(format!("commit seq {} out of order", c.seq)));
                    }
                    if c.records != pending.len() as u64 {
                        return Err(corrupt(format!(
                            "commit closes {} records but {} precede it",
                            c.records,
                            pending.len()
                        )));
                    }
                    for (_, r) in pending.drain(..) {
                        entries.push(ManifestEntry::Record(r.clone()));
                        upsert(&mut records, &mut index, r);
                    }
                    let tally = ManifestCounts::tally(&records);
                    if tally != c.counts {
                        return Err(corrupt(format!(
                            "commit counts {:?} disagree with record tally {:?}",
                            c.counts, tally
                        )));
                    }
                    last_seq = Some(c.seq);
                    committed_len = offset;
                    entries.push(entry.clone());
                }
            }
        }
        let header = header.ok_or(StoreError::Corrupt {
            line: 1,
            reason: "missing header".into(),
        })?;
        if !pending.is_empty() {
            tracing::warn!(
                records = pending.len(),
                first_line = pending[0].0,
                "ignoring uncommitted manifest tail"
            );
        }
        Ok(DatasetStore {
            root,
            header,
            entries,
            records,
            index,
            committed_len,
        })
    }

    pub fn open_or_create(root: impl Into<PathBuf>, manifest_id: impl Into<String>) -> Result<Self, StoreError> {
        let root = root.into();
        if root.join(MANIFEST_FILE).exists() {
            Self::open(root)
        } else {
            Self::create(root, manifest_id)
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn manifest_id(&self) -> &str {
        &self.header.manifest_id
    }

    /// Every committed manifest line, in file order.
    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    /// Current view: latest record per sample, in first-appearance order.
    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn get(&self, id: &ContentHash) -> Option<&SampleRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn commits(&self) -> impl Iterator<Item = &Commit> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Commit(c) => Some(c),
            _ => None,
        })
    }

    /// Most recent commit for `stage`.
    pub fn last_commit(&self, stage: &str) -> Option<&Commit> {
        self.commits().filter(|c| c.stage == stage).last()
    }

    pub fn counts(&self) -> ManifestCounts {
        ManifestCounts::tally(&self.records)
    }

    pub fn real(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.origin == Origin::Real)
    }

    pub fn synthetic(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.origin == Origin::Synthetic)
    }

    pub fn selected(&self) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(|r| r.is_selected())
    }

    pub fn blob_path(&self, id: &ContentHash) -> PathBuf {
        self.root.join(blob_rel_path(id))
    }

    pub fn read_blob(&self, id: &ContentHash) -> Result<Vec<u8>, StoreError> {
        let p = self.blob_path(id);
        fs::read(&p).map_err(io_err(&p))
    }

    /// Store bytes under their hash. Safe to call concurrently: the blob is
    /// written to a unique temporary name and renamed into place.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<ContentHash, StoreError> {
        static TMP: AtomicU64 = AtomicU64::new(0);
        let id = ContentHash::of(bytes);
        let dest = self.blob_path(&id);
        if dest.exists() {
            return Ok(id);
        }
        let dir = dest.parent().expect("blob path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            id.to_hex(),
            std::process::id(),
            TMP.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
        Ok(id)
    }

    /// Append a commit with no records, e.g. to record a fine-tune job.
    pub fn mark_stage(&mut self, stage: Stage) -> Result<(), StoreError> {
        self.append(Vec::new(), stage)
    }

    /// Validate every item, then store blobs and append records. A failing
    /// item rejects the whole batch. An empty batch appends nothing.
    pub fn ingest(&mut self, items: Vec<IngestItem>, stage: Stage) -> Result<IngestDelta, StoreError> {
        if items.is_empty() {
            return Ok(IngestDelta::default());
        }
        for (index, item) in items.iter().enumerate() {
            image::decode(&item.bytes).map_err(|source| StoreError::Image { index, source })?;
            if item.label >= item.task.num_classes() {
                return Err(StoreError::UnknownLabel {
                    index,
                    label: item.label,
                    task: item.task,
                });
            }
            match (item.origin, &item.prompt) {
                (Origin::Synthetic, None) => {
                    return Err(StoreError::Provenance {
                        index,
                        reason: "synthetic sample without prompt provenance".into(),
                    })
                }
                (Origin::Real, Some(_)) => {
                    return Err(StoreError::Provenance {
                        index,
                        reason: "real sample must not carry prompt provenance".into(),
                    })
                }
                _ => {}
            }
            if item.origin == Origin::Synthetic && item.caption.is_some() {
                return Err(StoreError::Provenance {
                    index,
                    reason: "synthetic sample takes its caption from the prompt".into(),
                });
            }
        }

        let mut delta = IngestDelta::default();
        let mut batch: Vec<SampleRecord> = Vec::new();
        let mut in_batch: HashMap<ContentHash, usize> = HashMap::new();
        for item in items {
            let id = self.put_blob(&item.bytes)?;
            if let Some(&i) = in_batch.get(&id) {
                batch[i].multiplicity += 1;
                delta.duplicates.push(id);
                continue;
            }
            let rec = match self.get(&id) {
                Some(existing) => {
                    delta.duplicates.push(id);
                    SampleRecord {
                        multiplicity: existing.multiplicity + 1,
                        ..existing.clone()
                    }
                }
                None => {
                    delta.added.push(id);
                    SampleRecord {
                        sample_id: id,
                        origin: item.origin,
                        task: item.task,
                        label: item.label,
                        prompt: item.prompt,
                        caption: item.caption,
                        score: None,
                        filter_decision: None,
                        split: item.split,
                        path: blob_rel_path(&id),
                        multiplicity: 1,
                    }
                }
            };
            in_batch.insert(id, batch.len());
            batch.push(rec);
        }
        if !delta.duplicates.is_empty() {
            tracing::info!(duplicates = delta.duplicates.len(), "identical images recorded once");
        }
        self.append(batch, stage)?;
        Ok(delta)
    }

    /// Record the decisions of one filter application on the synthetic
    /// set. The report must cover every synthetic sample exactly once.
    pub fn apply_filter_report<T: Real>(
        &mut self,
        report: &FilterReport<T>,
        stage: Stage,
    ) -> Result<FilterDelta, StoreError> {
        let mut seen = HashSet::new();
        let mut updates = Vec::new();
        let mut delta = FilterDelta::default();

        let mut resolve = |raw: &str| -> Result<SampleRecord, StoreError> {
            let id: ContentHash = raw.parse().map_err(|_| StoreError::UnknownSample(raw.to_owned()))?;
            let rec = self.get(&id).ok_or_else(|| StoreError::UnknownSample(raw.to_owned()))?;
            if rec.origin != Origin::Synthetic {
                return Err(StoreError::NotSynthetic(raw.to_owned()));
            }
            if !seen.insert(id) {
                return Err(StoreError::DuplicateDecision(raw.to_owned()));
            }
            Ok(rec.clone())
        };

        for d in &report.decisions {
            let rec = resolve(&d.sample_id)?;
            let score = d.score.to_f64().expect("finite score");
            let tau = d.threshold.to_f64().expect("finite threshold");
            let (verdict, op) = if d.kept {
                delta.selected += 1;
                (Verdict::Kept, ">=")
            } else {
                delta.rejected += 1;
                (Verdict::Rejected, "<")
            };
            updates.push(SampleRecord {
                score: Some(score),
                filter_decision: Some(FilterDecision {
                    verdict,
                    reason: format!("score {score:.6} {op} threshold {tau:.6} ({}, {})", d.rule, d.group_key),
                    threshold: Some(tau),
                }),
                ..rec
            });
        }
        for inv in &report.invalid {
            let rec = resolve(&inv.sample_id)?;
            delta.rejected += 1;
            updates.push(SampleRecord {
                score: None,
                filter_decision: Some(FilterDecision {
                    verdict: Verdict::Rejected,
                    reason: format!("unscorable: {}", inv.reason),
                    threshold: None,
                }),
                ..rec
            });
        }

        let synthetic = self.synthetic().count() as u64;
        let covered = delta.selected + delta.rejected;
        if covered != synthetic {
            return Err(StoreError::Conservation { synthetic, covered });
        }
        if delta.selected == 0 && synthetic > 0 {
            tracing::warn!(
                rejected = delta.rejected,
                "filter rejected every synthetic sample; export will refuse to run"
            );
        }
        self.append(updates, stage)?;
        Ok(delta)
    }

    /// Write `export/<class>/<hash>.png` for every selected sample plus
    /// `export/index.csv`. Any previous export is replaced.
    pub fn export_training_set(&self, task: Task) -> Result<ExportBundle, StoreError> {
        let selection: Vec<&SampleRecord> = self.selected().collect();
        if selection.is_empty() {
            return Err(StoreError::EmptySelection);
        }
        let mut mapped = Vec::with_capacity(selection.len());
        for r in &selection {
            if r.split == Split::Test {
                return Err(StoreError::TestSplit(r.sample_id));
            }
            let label = r.task.convert(r.label, task).ok_or(StoreError::Unmappable {
                sample_id: r.sample_id,
                label: r.label,
                from: r.task,
                to: task,
            })?;
            mapped.push((*r, label));
        }

        let dir = self.root.join(EXPORT_DIR);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        for c in 0..task.num_classes() {
            let d = dir.join(task.dir_name(c).expect("class in range"));
            fs::create_dir_all(&d).map_err(io_err(&d))?;
        }

        let index_path = dir.join(INDEX_FILE);
        let mut w = csv::Writer::from_path(&index_path)?;
        w.write_record(["path", "label", "origin", "prompt_id", "score"])?;
        let mut per_class: BTreeMap<String, u64> = task.class_names().iter().map(|n| ((*n).to_owned(), 0)).collect();
        for (r, label) in &mapped {
            let rel = format!("{}/{}.png", task.dir_name(*label).expect("class in range"), r.sample_id);
            let src = self.root.join(&r.path);
            let dst = dir.join(&rel);
            fs::copy(&src, &dst).map_err(io_err(&src))?;
            let name = task.class_names()[*label];
            *per_class.get_mut(name).expect("seeded") += 1;
            w.write_record([
                rel.as_str(),
                name,
                &r.origin.to_string(),
                r.prompt_id().unwrap_or(""),
                &r.score.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(io_err(&index_path))?;
        Ok(ExportBundle {
            dir,
            task,
            rows: mapped.len(),
            per_class,
        })
    }

    /// Re-hash every blob; returns the ids whose stored bytes no longer
    /// match (or are missing).
    pub fn verify_blobs(&self) -> Vec<ContentHash> {
        self.records
            .iter()
            .filter(|r| {
                fs::read(self.root.join(&r.path))
                    .map(|b| ContentHash::of(&b) != r.sample_id)
                    .unwrap_or(true)
            })
            .map(|r| r.sample_id)
            .collect()
    }

    pub fn report(&self, template: Option<&PromptTemplate>) -> PipelineReport {
        PipelineReport::build(self, template)
    }

    /// Write a file under `reports/`, returning its path.
    pub fn write_report_file(&self, name: &str, contents: &[u8]) -> Result<PathBuf, StoreError> {
        let dir = self.root.join(REPORT_DIR);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let p = dir.join(name);
        fs::write(&p, contents).map_err(io_err(&p))?;
        Ok(p)
    }

    fn append(&mut self, batch: Vec<SampleRecord>, stage: Stage) -> Result<(), StoreError> {
        let mut records = self.records.clone();
        let mut index = self.index.clone();
        for r in &batch {
            upsert(&mut records, &mut index, r.clone());
        }
        let commit = Commit {
            seq: self.commits().count() as u64,
            stage: stage.name,
            records: batch.len() as u64,
            counts: ManifestCounts::tally(&records),
            config: stage.config,
            info: stage.info,
        };
        let mut new_entries: Vec<ManifestEntry> = batch.into_iter().map(ManifestEntry::Record).collect();
        new_entries.push(ManifestEntry::Commit(commit));

        let mut buf = String::new();
        for e in &new_entries {
            buf.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            buf.push('\n');
        }

        let path = self.manifest_path();
        let mut f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
        f.set_len(self.committed_len).map_err(io_err(&path))?;
        f.seek(SeekFrom::End(0)).map_err(io_err(&path))?;
        f.write_all(buf.as_bytes()).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))?;

        self.committed_len += buf.len() as u64;
        self.entries.extend(new_entries);
        self.records = records;
        self.index = index;
        Ok(())
    }
}

fn upsert(records: &mut Vec<SampleRecord>, index: &mut HashMap<ContentHash, usize>, r: SampleRecord) {
    match index.get(&r.sample_id) {
        Some(&i) => records[i] = r,
        None => {
            index.insert(r.sample_id, records.len());
            records.push(r);
        }
    }
}

fn check_record(r: &SampleRecord) -> Result<(), String> {
    if r.label >= r.task.num_classes() {
        return Err(format!("label {} is not a {} class", r.label, r.task));
    }
    if r.path != blob_rel_path(&r.sample_id) {
        return Err(format!("path `{}` does not match sample_id", r.path));
    }
    match (r.origin, &r.prompt) {
        (Origin::Synthetic, None) => return Err("synthetic record without prompt".into()),
        (Origin::Real, Some(_)) => return Err("real record with prompt".into()),
        _ => {}
    }
    if r.multiplicity == 0 {
        return Err("multiplicity must be at least 1".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{blocky_rgb, encode_rgb};

    fn png(key: &str) -> Vec<u8> {
        encode_rgb(8, 8, &blocky_rgb(key.as_bytes(), 8, 8), &[]).unwrap()
    }

    fn real(key: &str, label: usize) -> IngestItem {
        IngestItem {
            bytes: png(key),
            origin: Origin::Real,
            task: Task::Binary,
            label,
            split: Split::Train,
            caption: None,
            prompt: None,
        }
    }

    #[test]
    fn ingest_counts_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DatasetStore::create(dir.path(), "t").unwrap();
        let mut items: Vec<_> = (0..4).map(|i| real(&format!("img{i}"), i % 2)).collect();
        items.push(real("img0", 0));
        let delta = s.ingest(items, Stage::new("ingest")).unwrap();
        assert_eq!(delta.added.len(), 4);
        assert_eq!(delta.duplicates.len(), 1);
        assert_eq!(s.get(&delta.added[0]).unwrap().multiplicity, 2);
        let c = s.counts();
        assert_eq!(c.by_class["clean"], 2);
        assert_eq!(c.by_class["dirty"], 2);

        let again = s.ingest(vec![real("img1", 1)], Stage::new("ingest")).unwrap();
        assert_eq!(again.duplicates, vec![delta.added[1]]);
        assert_eq!(s.records().len(), 4);

        assert_eq!(
            s.ingest(Vec::new(), Stage::new("ingest")).unwrap(),
            IngestDelta::default()
        );
        assert_eq!(s.commits().count(), 2);
    }

    #[test]
    fn ingest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DatasetStore::create(dir.path(), "t").unwrap();
        let mut bad = real("a", 0);
        bad.bytes = b"nope".to_vec();
        assert!(matches!(
            s.ingest(vec![bad], Stage::new("x")),
            Err(StoreError::Image { index: 0, .. })
        ));
        assert!(matches!(
            s.ingest(vec![real("a", 0), real("b", 2)], Stage::new("x")),
            Err(StoreError::UnknownLabel { index: 1, .. })
        ));
        let mut syn = real("c", 0);
        syn.origin = Origin::Synthetic;
        assert!(matches!(
            s.ingest(vec![syn], Stage::new("x")),
            Err(StoreError::Provenance { .. })
        ));
        assert!(s.records().is_empty());
    }

    #[test]
    fn reopen_ignores_torn_tail() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DatasetStore::create(dir.path(), "t").unwrap();
        s.ingest(vec![real("a", 0)], Stage::new("ingest")).unwrap();
        let path = s.manifest_path();
        let good = fs::read_to_string(&path).unwrap();
        let rec_line = good.lines().nth(1).unwrap().to_owned();
        fs::write(&path, format!("{good}{rec_line}\n{{\"entry\":\"com")).unwrap();

        let mut s2 = DatasetStore::open(dir.path()).unwrap();
        assert_eq!(s2.records().len(), 1);
        s2.ingest(vec![real("b", 1)], Stage::new("ingest")).unwrap();
        let s3 = DatasetStore::open(dir.path()).unwrap();
        assert_eq!(s3.records().len(), 2);
        assert_eq!(s3.entries(), s2.entries());
    }

    #[test]
    fn tampered_counts_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = DatasetStore::create(dir.path(), "t").unwrap();
        s.ingest(vec![real("a", 0)], Stage::new("ingest")).unwrap();
        let path = s.manifest_path();
        let text = fs::read_to_string(&path).unwrap().replace("\"clean\":1", "\"clean\":2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            DatasetStore::open(dir.path()),
            Err(StoreError::Corrupt { line: 3, .. })
        ));
    }

    #[test]
    fn create_refuses_existing_and_open_requires_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(DatasetStore::open(dir.path()), Err(StoreError::Missing(_))));
        DatasetStore::create(dir.path(), "t").unwrap();
        assert!(matches!(
            DatasetStore::create(dir.path(), "t"),
            Err(StoreError::Exists(_))
        ));
        assert_eq!(
            DatasetStore::open_or_create(dir.path(), "other").unwrap().manifest_id(),
            "t"
        );
    }
}
