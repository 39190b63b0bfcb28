#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dtgen_core::image::{blocky_rgb, encode_rgb};
use dtgen_core::prompt::PromptTemplate;

pub const GOLDEN_FILES: [&str; 5] = [
    "data/manifest.jsonl",
    "data/reports/filter_report.json",
    "data/reports/report.json",
    "data/export/index.csv",
    "data/reports/metrics.json",
];

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Run the `dtgen` binary in `dir`.
pub fn dtgen(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_dtgen"))
        .args(args)
        .current_dir(dir)
        .env_remove("DTGEN_ENDPOINT")
        .output()
        .expect("dtgen runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = dtgen(dir, args);
    assert_eq!(
        r.code, 0,
        "dtgen {args:?}\nstdout:\n{}\nstderr:\n{}",
        r.stdout, r.stderr
    );
    r
}

/// Slot tags for a real image: option `i` of every slot, with the dirt
/// slot moved to an option whose severity agrees with the binary label.
fn slot_tags(t: &PromptTemplate, i: usize, dirty: bool) -> String {
    let label_slot = t.label_slot().unwrap();
    t.slots()
        .iter()
        .enumerate()
        .map(|(s, slot)| {
            let n = slot.options.len();
            let pick = (0..n).map(|k| (i + k) % n).find(|&j| {
                s != label_slot
                    || slot.options[j]
                        .severity
                        .as_deref()
                        .and_then(|sev| t.taxonomy().class_of(sev))
                        .map(|c| c > 0)
                        == Some(dirty)
            });
            pick.unwrap().to_string()
        })
        .collect::<Vec<_>>()
        .join("/")
}

/// 40 labelled 32×32 real images: 30 train with slot tags, 10 test; 26
/// dirty overall. Writes `real/*.png` and `real.csv`, returns the CSV path.
pub fn toy_dataset(dir: &Path) -> PathBuf {
    let t = PromptTemplate::default_template();
    let img_dir = dir.join("real");
    std::fs::create_dir_all(&img_dir).unwrap();
    let mut csv = String::from("path,label,split,slots\n");
    for i in 0..40usize {
        let dirty = i % 3 != 0;
        let label = if dirty { "dirty" } else { "clean" };
        let (split, tags) = if i < 30 {
            ("train", slot_tags(&t, i, dirty))
        } else {
            ("test", String::new())
        };
        let png = encode_rgb(32, 32, &blocky_rgb(format!("real-{i}").as_bytes(), 32, 32), &[]).unwrap();
        std::fs::write(img_dir.join(format!("{i:02}.png")), png).unwrap();
        csv.push_str(&format!("real/{i:02}.png,{label},{split},{tags}\n"));
    }
    let p = dir.join("real.csv");
    std::fs::write(&p, csv).unwrap();
    p
}

/// Predict `dirty` for every test image.
pub fn all_dirty_predictions(dir: &Path) -> PathBuf {
    let src = std::fs::read_to_string(dir.join("real.csv")).unwrap();
    let mut out = String::from("sample_id,true_label,predicted_label\n");
    for line in src.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f[2] == "test" {
            out.push_str(&format!("{},{},dirty\n", f[0], f[1]));
        }
    }
    let p = dir.join("predictions.csv");
    std::fs::write(&p, out).unwrap();
    p
}

/// Set `key` inside `[section]` (dotted) of the config in `dir`.
pub fn set_config(dir: &Path, section: &str, key: &str, value: impl Into<toml::Value>) {
    let path = dir.join("dtgen.toml");
    let mut doc: toml::Table = std::fs::read_to_string(&path).unwrap().parse().unwrap();
    let mut t = &mut doc;
    for part in section.split('.').filter(|s| !s.is_empty()) {
        t = t
            .entry(part)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .unwrap();
    }
    t.insert(key.to_owned(), value.into());
    std::fs::write(&path, toml::to_string(&doc).unwrap()).unwrap();
}

/// Fast retries so injected failures do not stall the tests.
pub fn fast_retries(dir: &Path) {
    set_config(dir, "backend.retry", "base_delay_ms", 1);
}

/// init → ingest → finetune → generate(200) → filter → export → eval.
pub fn golden_run(dir: &Path) -> Duration {
    let t0 = Instant::now();
    ok(dir, &["init", "."]);
    toy_dataset(dir);
    ok(dir, &["ingest", "real.csv"]);
    ok(dir, &["finetune"]);
    ok(dir, &["generate", "--n", "200"]);
    ok(dir, &["filter"]);
    ok(dir, &["export"]);
    all_dirty_predictions(dir);
    ok(dir, &["eval", "--pred", "predictions.csv", "--scheme", "Few-Shot"]);
    ok(dir, &["report"]);
    t0.elapsed()
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn golden_name(rel: &str) -> &str {
    rel.rsplit('/').next().unwrap()
}

/// Files that differ from the checked-in goldens. With
/// `DTGEN_UPDATE_GOLDEN=1` the goldens are rewritten instead.
pub fn golden_mismatches(dir: &Path) -> Vec<String> {
    let gdir = golden_dir();
    let update = std::env::var("DTGEN_UPDATE_GOLDEN").is_ok_and(|v| v == "1");
    let mut bad = Vec::new();
    for rel in GOLDEN_FILES {
        let got = std::fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"));
        let gp = gdir.join(golden_name(rel));
        if update {
            std::fs::create_dir_all(&gdir).unwrap();
            std::fs::write(&gp, &got).unwrap();
            continue;
        }
        match std::fs::read(&gp) {
            Ok(want) if want == got => {}
            Ok(_) => bad.push(format!("{rel} differs from {}", gp.display())),
            Err(e) => bad.push(format!("{}: {e}", gp.display())),
        }
    }
    bad
}
