use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn labmae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labmae"))
        .current_dir(dir)
        .args(args)
        .env_remove("LABMAE_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let o = labmae(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

/// Exit code plus the parsed JSON error line.
fn fails(dir: &Path, args: &[&str]) -> (i32, Value) {
    let o = labmae(dir, args);
    let err = String::from_utf8_lossy(&o.stderr);
    let last = err.lines().last().unwrap_or_default();
    let v: Value = serde_json::from_str(last).unwrap_or_else(|_| panic!("not JSON: {err}"));
    (o.status.code().unwrap(), v)
}

fn synth(dir: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["synth", "--rows", "240", "--features", "12", "--missing-rate", "0.1", "--groups", "2", "--out-dir", out];
    args.extend_from_slice(extra);
    ok(dir, &args);
    dir.join(out).join("cohort.csv")
}

fn tiny_train<'a>(cohort: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--cohort", cohort, "--embed-dim", "8", "--enc-layers", "1", "--dec-layers", "1", "--heads", "2",
        "--epochs", "4", "--batch-size", "32", "--out-dir", out,
    ]
}

#[test]
fn same_seed_same_bytes() {
    let d = tempfile::tempdir().unwrap();
    let a = synth(d.path(), "a", &["--seed", "3"]);
    let b = synth(d.path(), "b", &["--seed", "3"]);
    let c = synth(d.path(), "c", &["--seed", "4"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn config_overlay_precedence() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("cfg.json"), r#"{"rows": 50, "features": 3, "seed": 9}"#).unwrap();
    ok(d.path(), &["synth", "--config", "cfg.json", "--rows", "40", "--out-dir", "x"]);
    let m: Value = serde_json::from_str(&fs::read_to_string(d.path().join("x/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["args"]["rows"], 40);
    assert_eq!(m["args"]["features"], 3);
    assert_eq!(m["seed"], 9);
    let lines = fs::read_to_string(d.path().join("x/cohort.csv")).unwrap().lines().count();
    assert_eq!(lines, 41);

    fs::write(d.path().join("bad.json"), r#"{"rowz": 50}"#).unwrap();
    let (code, v) = fails(d.path(), &["synth", "--config", "bad.json"]);
    assert_eq!((code, v["error"].as_str().unwrap()), (2, "usage"));
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(fails(p, &["synth", "--no-such-flag"]).0, 2);
    assert_eq!(fails(p, &["synth", "--nonlinearity", "cubic"]).0, 2);
    assert_eq!(fails(p, &["eval", "--cohort", "absent.csv", "--methods", "mean"]).0, 3);

    fs::write(p.join("junk.csv"), "a,b\n1,2\n").unwrap();
    assert_eq!(fails(p, &["eval", "--cohort", "junk.csv", "--methods", "mean"]).0, 4);

    synth(p, "s", &[]);
    assert_eq!(fails(p, &["eval", "--cohort", "s/cohort.csv"]).0, 2, "labmae without --model");
    let (code, v) = fails(p, &["carbon", "--cohort", "s/cohort.csv", "--methods", "mean", "--regions", "XX"]);
    assert_eq!((code, v["error"].as_str().unwrap()), (5, "data"));
    assert_eq!(fails(p, &["eval", "--cohort", "s/cohort.csv", "--methods", "mean", "--cutoff", "0"]).0, 5);
    let (code, v) = fails(p, &["train", "--cohort", "s/cohort.csv", "--batch-size", "0"]);
    assert_eq!(code, 2, "{v}");
}

#[test]
fn oracle_scores_zero_error() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "s", &[]);
    ok(d.path(), &["eval", "--cohort", "s/cohort.csv", "--methods", "oracle,mean", "--reference", "oracle", "--out-dir", "e"]);
    let text = fs::read_to_string(d.path().join("e/records.csv")).unwrap();
    let oracle: Vec<&str> = text.lines().filter(|l| l.contains(",oracle,")).collect();
    assert_eq!(oracle.len(), 12);
    for l in oracle {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!((cols[4], cols[6], cols[7]), ("0", "0", "0"), "{l}");
    }
    let table: Value = serde_json::from_str(&fs::read_to_string(d.path().join("e/win_counts.json")).unwrap()).unwrap();
    assert_eq!(table["reference"], "oracle");
}

#[test]
fn resume_matches_uninterrupted_training() {
    let d = tempfile::tempdir().unwrap();
    synth(d.path(), "s", &[]);
    ok(d.path(), &tiny_train("s/cohort.csv", "full"));
    let mut args = tiny_train("s/cohort.csv", "part");
    args.extend(["--checkpoint-every", "2"]);
    ok(d.path(), &args);
    ok(d.path(), &["train", "--cohort", "s/cohort.csv", "--resume", "part/checkpoints/ckpt_0002.lmae", "--out-dir", "resumed"]);
    // same config (checkpoint cadence included), so byte-identical files
    let part = fs::read(d.path().join("part/model.lmae")).unwrap();
    assert_eq!(part, fs::read(d.path().join("resumed/model.lmae")).unwrap());
    assert_eq!(
        fs::read(d.path().join("full/train_log.csv")).unwrap(),
        fs::read(d.path().join("resumed/train_log.csv")).unwrap()
    );
}

#[test]
fn replay_reproduces_and_detects_changes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "s", &[]);
    ok(p, &tiny_train("s/cohort.csv", "t"));
    ok(p, &["eval", "--cohort", "s/cohort.csv", "--model", "t/model.lmae", "--out-dir", "e"]);
    ok(p, &["carbon", "--cohort", "s/cohort.csv", "--methods", "mean,em", "--workload-rows", "16", "--out-dir", "c"]);
    for run in ["s", "t", "e", "c"] {
        let out = format!("{run}_again");
        ok(p, &["replay", "--manifest", &format!("{run}/manifest.json"), "--out-dir", &out]);
        let read = |d: &Path| -> Value {
            serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap()
        };
        assert_eq!(read(&p.join(run))["outputs"], read(&p.join(&out))["outputs"]);
    }

    let mut csv = fs::read_to_string(p.join("s/cohort.csv")).unwrap();
    csv.push('\n');
    fs::write(p.join("s/cohort.csv"), csv).unwrap();
    let (code, v) = fails(p, &["replay", "--manifest", "e/manifest.json", "--out-dir", "e3"]);
    assert_eq!((code, v["error"].as_str().unwrap()), (7, "replay_mismatch"));
}

#[test]
fn impute_fills_only_missing_cells() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "s", &[]);
    ok(p, &tiny_train("s/cohort.csv", "t"));
    ok(p, &["impute", "--model", "t/model.lmae", "--cohort", "s/cohort.csv", "--out-dir", "i"]);
    let preds = fs::read_to_string(p.join("i/predictions.csv")).unwrap();
    let cohort = fs::read_to_string(p.join("s/cohort.csv")).unwrap();
    let header: Vec<&str> = cohort.lines().next().unwrap().split(',').collect();
    let missing: usize = cohort
        .lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .zip(&header)
                .filter(|(v, h)| h.starts_with("npval_") && !h.starts_with("npval_last_") && v.is_empty())
                .count()
        })
        .sum();
    assert!(missing > 0);
    assert_eq!(preds.lines().count() - 1, missing);
    assert!(preds.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap().is_finite()));
}

#[test]
fn thread_count_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "s", &[]);
    let mut one = tiny_train("s/cohort.csv", "one");
    one.extend(["--threads", "1"]);
    ok(p, &one);
    let mut many = tiny_train("s/cohort.csv", "many");
    many.extend(["--threads", "3"]);
    ok(p, &many);
    assert_eq!(fs::read(p.join("one/model.lmae")).unwrap(), fs::read(p.join("many/model.lmae")).unwrap());
}

#[test]
fn report_writes_charts() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    synth(p, "s", &[]);
    ok(p, &["eval", "--cohort", "s/cohort.csv", "--methods", "mean,softimpute", "--reference", "softimpute", "--out-dir", "e"]);
    ok(p, &["report", "--records", "e/records.csv", "--reference", "softimpute", "--out-dir", "r"]);
    for f in ["report.html", "rmse.svg", "wd.svg", "r2.svg", "win_counts.md"] {
        assert!(p.join("r").join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(p.join("r/rmse.svg")).unwrap().starts_with("<svg"));
}
