use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attentionet::dsp::archive;
use attentionet::train::metrics::{parse_metrics, MetricsRecord};

fn attentionet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attentionet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn attentionet")
}

fn ok(args: &[&str]) -> Output {
    let out = attentionet(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn synth_writes_one_directory_per_subject_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["synth", "--subjects", "6", "--profile", "shifted", "--seed", "7", "--seconds-per-class", "20", "--out", p(dir)]);
    }
    let subjects: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(subjects.len(), 6);
    for s in &subjects {
        assert_eq!(fs::read_dir(s).unwrap().count(), 5, "{}", s.display());
    }
    assert!(a.join("manifest.txt").is_file());
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn missing_seed_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("never");
    let out = attentionet(&["synth", "--subjects", "2", "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--seed"), "{}", stderr(&out));
    assert!(!out_dir.exists());
}

#[test]
fn config_file_supplies_values_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# cohort\nseed = 3\nsubjects = 4\nseconds_per_class = 10\n").unwrap();
    let out_dir = tmp.path().join("c");
    ok(&["--config", p(&cfg), "synth", "--subjects", "2", "--out", p(&out_dir)]);
    let dirs = fs::read_dir(&out_dir).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 2);

    fs::write(&cfg, "seed = 3\nlearning_rte = 0.1\n").unwrap();
    let bad_dir = tmp.path().join("d");
    let out = attentionet(&["--config", p(&cfg), "synth", "--out", p(&bad_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("run.cfg:2") && stderr(&out).contains("learning_rte"), "{}", stderr(&out));
    assert!(!bad_dir.exists());
}

#[test]
fn one_minute_segment_gives_237_windows() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    ok(&["synth", "--subjects", "1", "--seconds-per-class", "60", "--seed", "1", "--out", p(&rec)]);
    let manifest = fs::read_to_string(rec.join("manifest.txt")).unwrap();
    let first = manifest.lines().find(|l| !l.starts_with('#')).unwrap();
    let single = rec.join("single.txt");
    fs::write(&single, format!("{first}\n")).unwrap();

    let arc = tmp.path().join("w.bin");
    ok(&["preprocess", "--manifest", p(&single), "--out", p(&arc)]);
    assert_eq!(archive::load(&arc).unwrap().len(), 237);

    let all = tmp.path().join("all.bin");
    ok(&["preprocess", "--manifest", p(&rec.join("manifest.txt")), "--out", p(&all)]);
    let windows = archive::load(&all).unwrap();
    assert_eq!(windows.len(), 5 * 237);
    assert_eq!(archive::from_bytes(&archive::to_bytes(&windows).unwrap()).unwrap(), windows);
}

#[test]
fn corrupt_recording_names_file_and_channel_count() {
    let tmp = tempfile::tempdir().unwrap();
    let rec = tmp.path().join("rec");
    ok(&["synth", "--subjects", "1", "--seconds-per-class", "10", "--seed", "1", "--out", p(&rec)]);
    let seg = rec.join("S01").join("02_sustained.txt");
    let text = fs::read_to_string(&seg).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let row = lines.iter().position(|l| l.starts_with('-') || l.starts_with(|c: char| c.is_ascii_digit())).unwrap();
    let cut = lines[row].rfind(',').unwrap();
    lines[row].truncate(cut);
    fs::write(&seg, lines.join("\n") + "\n").unwrap();

    let arc = tmp.path().join("w.bin");
    let out = attentionet(&["preprocess", "--manifest", p(&rec.join("manifest.txt")), "--out", p(&arc)]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("02_sustained.txt") && err.contains("14"), "{err}");
    assert!(!arc.exists());
}

#[test]
fn loso_personalize_evaluate_and_plot() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |name: &str| tmp.path().join(name);
    ok(&["synth", "--subjects", "3", "--profile", "easy", "--seconds-per-class", "14", "--seed", "4", "--out", p(&t("rec"))]);
    ok(&["preprocess", "--manifest", p(&t("rec").join("manifest.txt")), "--out", p(&t("w.bin"))]);

    let out = attentionet(&["personalize", "--archive", p(&t("w.bin")), "--checkpoints", p(&t("none")), "--out", p(&t("pers")), "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("train-loso"), "{}", stderr(&out));
    assert!(!t("pers").exists());

    for run in ["loso", "loso2"] {
        ok(&["--jobs", if run == "loso" { "1" } else { "2" }, "train-loso", "--archive", p(&t("w.bin")), "--out", p(&t(run)), "--seed", "9", "--max-epochs", "2"]);
    }
    let metrics = fs::read_to_string(t("loso").join("metrics.jsonl")).unwrap();
    assert_eq!(metrics, fs::read_to_string(t("loso2").join("metrics.jsonl")).unwrap());
    for s in ["S01", "S02", "S03"] {
        assert_eq!(fs::read(t("loso").join(format!("{s}.ckpt"))).unwrap(), fs::read(t("loso2").join(format!("{s}.ckpt"))).unwrap());
    }
    let records = parse_metrics(&metrics).unwrap();
    assert_eq!(records.len(), 4);
    let folds: Vec<f64> = records
        .iter()
        .filter_map(|r| match r {
            MetricsRecord::Fold(f) => Some(f.best_val_accuracy),
            _ => None,
        })
        .collect();
    let MetricsRecord::Aggregate(agg) = &records[3] else { panic!("last record is not the aggregate") };
    assert_eq!(folds.len(), 3);
    assert!((agg.mean_accuracy - folds.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    ok(&["personalize", "--archive", p(&t("w.bin")), "--checkpoints", p(&t("loso")), "--out", p(&t("pers")), "--seed", "1", "--schedule", "10", "--finetune-epochs", "1"]);
    let curve = fs::read_to_string(t("pers").join("curve.tsv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 3 * 2);
    let summary = fs::read_to_string(t("pers").join("summary.tsv")).unwrap();
    assert_eq!(summary.lines().filter(|l| l.ends_with("\t1")).count(), 1);

    let out = ok(&["evaluate", "--archive", p(&t("w.bin")), "--checkpoint", p(&t("loso").join("S02.ckpt")), "--subject", "S02"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let best = records.iter().find_map(|r| match r {
        MetricsRecord::Fold(f) if f.held_out_subject == "S02" => Some(f.best_val_accuracy),
        _ => None,
    });
    assert_eq!(report["accuracy"].as_f64(), best);

    ok(&["plot", "--curve", p(&t("pers").join("curve.tsv")), "--metrics", p(&t("loso").join("metrics.jsonl")), "--out", p(&t("fig"))]);
    for f in ["personalization.svg", "loso.svg"] {
        let svg = fs::read_to_string(t("fig").join(f)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"), "{f}");
    }
}

#[test]
fn gradcheck_reports_injected_fault_by_block() {
    let out = attentionet(&["gradcheck", "--seed", "0", "--inject-fault", "nta"]);
    assert_eq!(out.status.code(), Some(1));
    let report = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(report.lines().count(), 5);
    for line in report.lines() {
        assert!(line.contains("max_rel_error="), "{line}");
        let failed = line.ends_with("FAIL");
        assert_eq!(failed, line.starts_with("nta"), "{line}");
    }
    assert!(stderr(&out).contains("nta"));
}
