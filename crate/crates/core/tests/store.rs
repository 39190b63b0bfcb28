use std::collections::BTreeMap;
use std::fs;

use dtgen_core::filter::{apply_filter, group_stats, FilterConfig, FilterReport, InvalidSample, ScoredSample};
use dtgen_core::image::{blocky_rgb, encode_rgb};
use dtgen_core::prompt::{sample_uniform, PromptTemplate};
use dtgen_core::store::{
    DatasetStore, IngestItem, ManifestEntry, Origin, PromptProvenance, Split, Stage, StoreError, Verdict,
};
use dtgen_core::{ContentHash, Task};

fn png(key: &str) -> Vec<u8> {
    encode_rgb(8, 8, &blocky_rgb(key.as_bytes(), 8, 8), &[]).unwrap()
}

fn synthetic_items(t: &PromptTemplate, n: usize) -> Vec<IngestItem> {
    sample_uniform(t, n, 3)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, p)| IngestItem {
            bytes: png(&format!("syn{i}")),
            origin: Origin::Synthetic,
            task: Task::ThreeClass,
            label: p.derived_label.unwrap(),
            split: Split::None,
            caption: None,
            prompt: Some(PromptProvenance {
                prompt_id: p.prompt_id.0.clone(),
                text: p.text,
                slot_choices: p.slot_choices,
                request_id: format!("r{i}"),
                seed: i as u64,
                adapter_id: None,
            }),
        })
        .collect()
}

/// Scores with a known low tail so some samples are rejected.
fn report_for(store: &DatasetStore, alpha: f64) -> FilterReport<f64> {
    let scores: Vec<ScoredSample<f64>> = store
        .synthetic()
        .enumerate()
        .map(|(i, r)| {
            let s = if i % 10 == 0 { 0.4 } else { 0.9 - 0.001 * (i % 7) as f64 };
            ScoredSample::new(r.sample_id.to_hex(), r.prompt_id().unwrap(), s).unwrap()
        })
        .collect();
    let cfg = FilterConfig::default().with_alpha(alpha);
    let stats = group_stats(&scores, &cfg).unwrap();
    let outcome = apply_filter(&scores, &stats, &cfg).unwrap();
    FilterReport::new(cfg, stats, outcome, Vec::new())
}

fn populated(n: usize) -> (tempfile::TempDir, DatasetStore, PromptTemplate) {
    let dir = tempfile::tempdir().unwrap();
    let t = PromptTemplate::default_template();
    let mut s = DatasetStore::create(dir.path(), "test-run").unwrap();
    let real: Vec<_> = (0..40)
        .map(|i| IngestItem {
            bytes: png(&format!("real{i}")),
            origin: Origin::Real,
            task: Task::Binary,
            label: usize::from(i >= 20),
            split: Split::Train,
            caption: None,
            prompt: None,
        })
        .collect();
    s.ingest(real, Stage::new("ingest")).unwrap();
    if n > 0 {
        s.ingest(synthetic_items(&t, n), Stage::new("generate")).unwrap();
    }
    (dir, s, t)
}

#[test]
fn forty_real_images_count_twenty_twenty() {
    let (_d, s, _) = populated(0);
    let c = s.counts();
    assert_eq!(c.real, 40);
    assert_eq!(c.by_class["clean"], 20);
    assert_eq!(c.by_class["dirty"], 20);
}

#[test]
fn manifest_roundtrip_and_blob_integrity() {
    let (dir, mut s, _) = populated(60);
    let rep = report_for(&s, 1.5);
    s.apply_filter_report(
        &rep,
        Stage::new("filter").with_config(serde_json::json!({"alpha": 1.5})),
    )
    .unwrap();
    let reopened = DatasetStore::open(dir.path()).unwrap();
    assert_eq!(reopened.entries(), s.entries());
    assert_eq!(reopened.records(), s.records());
    assert!(reopened.verify_blobs().is_empty());
    for r in reopened.records() {
        assert_eq!(
            ContentHash::of(&fs::read(dir.path().join(&r.path)).unwrap()),
            r.sample_id
        );
    }

    // Serializing the parsed entries reproduces the file byte for byte.
    let text: String = reopened
        .entries()
        .iter()
        .map(|e| serde_json::to_string(e).unwrap() + "\n")
        .collect();
    assert_eq!(text, fs::read_to_string(reopened.manifest_path()).unwrap());

    let victim = &s.records()[3];
    fs::write(dir.path().join(&victim.path), b"tampered").unwrap();
    assert_eq!(reopened.verify_blobs(), vec![victim.sample_id]);
}

#[test]
fn filter_conservation_and_audit_trail() {
    let (_d, mut s, _) = populated(100);
    let rep = report_for(&s, 1.5);
    let delta = s.apply_filter_report(&rep, Stage::new("filter")).unwrap();
    assert_eq!(delta.selected + delta.rejected, 100);
    assert_eq!(delta.selected as usize, rep.counts.selected);
    let c = s.counts();
    assert_eq!(c.synthetic, c.selected + c.rejected);
    let rejected: Vec<_> = s.records().iter().filter(|r| r.is_rejected()).collect();
    assert!(!rejected.is_empty());
    for r in rejected {
        let d = r.filter_decision.as_ref().unwrap();
        assert_eq!(d.verdict, Verdict::Rejected);
        assert!(d.reason.contains("< threshold"), "{}", d.reason);
    }
    assert!(s.selected().all(|r| r.origin == Origin::Synthetic));
}

#[test]
fn filter_report_errors() {
    let (_d, mut s, _) = populated(10);
    let mut rep = report_for(&s, 1.5);
    rep.decisions[0].sample_id = "f".repeat(64);
    match s.apply_filter_report(&rep, Stage::new("filter")) {
        Err(StoreError::UnknownSample(id)) => assert_eq!(id, "f".repeat(64)),
        other => panic!("{other:?}"),
    }

    let mut partial = report_for(&s, 1.5);
    partial.decisions.pop();
    assert!(matches!(
        s.apply_filter_report(&partial, Stage::new("filter")),
        Err(StoreError::Conservation {
            synthetic: 10,
            covered: 9
        })
    ));

    let mut real = report_for(&s, 1.5);
    real.decisions[0].sample_id = s.real().next().unwrap().sample_id.to_hex();
    assert!(matches!(
        s.apply_filter_report(&real, Stage::new("filter")),
        Err(StoreError::NotSynthetic(_))
    ));

    let mut with_invalid = report_for(&s, 1.5);
    let d = with_invalid.decisions.pop().unwrap();
    with_invalid.invalid.push(InvalidSample {
        sample_id: d.sample_id.clone(),
        prompt_id: d.prompt_id,
        reason: "zero-norm image embedding".into(),
    });
    s.apply_filter_report(&with_invalid, Stage::new("filter")).unwrap();
    let id: ContentHash = d.sample_id.parse().unwrap();
    assert!(s.get(&id).unwrap().is_rejected());
}

#[test]
fn all_rejected_blocks_export() {
    let (_d, mut s, _) = populated(10);
    let mut rep = report_for(&s, 1.5);
    for d in &mut rep.decisions {
        d.kept = false;
    }
    let delta = s.apply_filter_report(&rep, Stage::new("filter")).unwrap();
    assert_eq!(delta.selected, 0);
    assert!(matches!(
        s.export_training_set(Task::Binary),
        Err(StoreError::EmptySelection)
    ));
}

#[test]
fn exports_by_task() {
    let (dir, mut s, _) = populated(200);
    let rep = report_for(&s, 1.5);
    s.apply_filter_report(&rep, Stage::new("filter")).unwrap();
    let selected = s.selected().count();

    let three = s.export_training_set(Task::ThreeClass).unwrap();
    assert_eq!(three.rows, selected);
    let mut dirs: Vec<_> = fs::read_dir(&three.dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    dirs.sort();
    assert_eq!(dirs, ["clean", "heavily_dirty", "lightly_dirty"]);
    let files: usize = dirs
        .iter()
        .map(|d| fs::read_dir(three.dir.join(d)).unwrap().count())
        .sum();
    assert_eq!(files, selected);
    let index = fs::read_to_string(three.dir.join("index.csv")).unwrap();
    assert_eq!(index.lines().next().unwrap(), "path,label,origin,prompt_id,score");
    assert_eq!(index.lines().count(), selected + 1);

    let binary = s.export_training_set(Task::Binary).unwrap();
    let expected_dirty = s.selected().filter(|r| r.label > 0).count() as u64;
    assert_eq!(binary.per_class["dirty"], expected_dirty);
    assert_eq!(binary.per_class["clean"] + expected_dirty, selected as u64);
    assert!(!dir.path().join("export/heavily_dirty").exists());
}

#[test]
fn export_refuses_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let t = PromptTemplate::default_template();
    let mut s = DatasetStore::create(dir.path(), "x").unwrap();
    let mut items = synthetic_items(&t, 10);
    items[4].split = Split::Test;
    s.ingest(items, Stage::new("generate")).unwrap();
    let mut rep = report_for(&s, 1.5);
    for d in &mut rep.decisions {
        d.kept = true;
    }
    s.apply_filter_report(&rep, Stage::new("filter")).unwrap();
    assert!(matches!(
        s.export_training_set(Task::Binary),
        Err(StoreError::TestSplit(_))
    ));
}

#[test]
fn binary_dirty_has_no_severity() {
    let dir = tempfile::tempdir().unwrap();
    let t = PromptTemplate::default_template();
    let mut s = DatasetStore::create(dir.path(), "x").unwrap();
    let mut items = synthetic_items(&t, 5);
    for it in &mut items {
        it.task = Task::Binary;
        it.label = 1;
    }
    s.ingest(items, Stage::new("generate")).unwrap();
    let mut rep = report_for(&s, 1.5);
    for d in &mut rep.decisions {
        d.kept = true;
    }
    s.apply_filter_report(&rep, Stage::new("filter")).unwrap();
    assert!(s.export_training_set(Task::Binary).is_ok());
    assert!(matches!(
        s.export_training_set(Task::ThreeClass),
        Err(StoreError::Unmappable { .. })
    ));
}

#[test]
fn report_coverage_and_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let empty = DatasetStore::create(dir.path(), "e").unwrap();
    let r = empty.report(None);
    assert_eq!(r.counts.records, 0);
    assert_eq!(r.retention, 0.0);
    assert!(r.coverage.is_empty());

    let (_d, mut s, t) = populated(150);
    let rep = report_for(&s, 1.5);
    s.apply_filter_report(
        &rep,
        Stage::new("filter").with_config(serde_json::json!({"alpha": 1.5})),
    )
    .unwrap();
    let r = s.report(Some(&t));
    assert_eq!(r.coverage.len(), 4);
    for (cov, slot) in r.coverage.iter().zip(t.slots()) {
        assert_eq!(cov.options.len(), slot.options.len());
        assert_eq!(cov.options.iter().map(|o| o.count).sum::<u64>(), 150);
        assert_eq!(cov.total, 150);
    }
    assert_eq!(r.retention, r.counts.selected as f64 / 150.0);
    assert_eq!(r.config.as_ref().unwrap()["alpha"], 1.5);
    assert!(r.to_text().contains("retention"));
    let untemplated = s.report(None);
    assert!(untemplated.coverage.iter().all(|c| c.total == 150));
}

#[test]
fn superseding_keeps_first_appearance_order() {
    let (_d, mut s, _) = populated(20);
    let before: Vec<_> = s.records().iter().map(|r| r.sample_id).collect();
    let rep = report_for(&s, 1.5);
    s.apply_filter_report(&rep, Stage::new("filter")).unwrap();
    let after: Vec<_> = s.records().iter().map(|r| r.sample_id).collect();
    assert_eq!(before, after);
    let lines = s
        .entries()
        .iter()
        .filter(|e| matches!(e, ManifestEntry::Record(_)))
        .count();
    assert_eq!(lines, 40 + 20 + 20);
    let stages: BTreeMap<_, _> = s.commits().map(|c| (c.seq, c.stage.clone())).collect();
    assert_eq!(stages.values().collect::<Vec<_>>(), ["ingest", "generate", "filter"]);
}
