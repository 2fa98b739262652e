//! End-to-end runs of the `msd` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn msd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msd"))
        .args(args)
        .env_remove("MSD_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = msd(args);
    assert!(
        out.status.success(),
        "msd {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a planted-pair dataset and returns its manifest path.
fn synth(dir: &Path, spec: &str) -> std::path::PathBuf {
    let spec_path = dir.join("spec.json");
    fs::write(&spec_path, spec).unwrap();
    let data = dir.join("data");
    ok(&["synth", "--spec", p(&spec_path), "--out-dir", p(&data)]);
    data.join("manifest.jsonl")
}

const ROTATED: &str = r#"{"dim": 32, "k": 2, "kappa": 20, "n_pairs": 60, "n_img": 49, "n_txt": 12,
    "change": {"kind": "rotate", "index": 0, "angle": 0.8}, "grid": [7, 7], "seed": 11}"#;

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn accuracy(report: &Value, metric: &str) -> f64 {
    report
        .as_array()
        .unwrap()
        .iter()
        .find(|r| r["metric"] == metric)
        .unwrap_or_else(|| panic!("no metric {metric}"))["point_estimate"]
        .as_f64()
        .unwrap()
}

#[test]
fn synth_score_pairwise_round_trip() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), ROTATED);
    let scores = dir.path().join("scores.jsonl");
    ok(&["score", "--manifest", p(&manifest), "--out", p(&scores)]);
    let out = dir.path().join("pw");
    ok(&["pairwise", "--scores", p(&scores), "--out-dir", p(&out)]);
    let report = json(&out.join("pairwise.json"));
    let acc = accuracy(&report, "soft_msd");
    assert!(acc > 0.5, "soft_msd accuracy {acc}");
    for f in [
        "pairwise.csv",
        "comparison.json",
        "margin_buckets.json",
        "length_buckets.json",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let cmp = json(&out.join("comparison.json"));
    let pv = cmp["mcnemar"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pv));
    let margins = json(&out.join("margin_buckets.json"));
    let n: u64 = margins["bins"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["n"].as_u64().unwrap())
        .sum();
    assert_eq!(n, 60);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), ROTATED);
    let run = |tag: &str| {
        let scores = dir.path().join(format!("{tag}.jsonl"));
        ok(&[
            "score",
            "--manifest",
            p(&manifest),
            "--out",
            p(&scores),
            "--seed",
            "7",
        ]);
        let out = dir.path().join(format!("{tag}_pw"));
        ok(&[
            "pairwise",
            "--scores",
            p(&scores),
            "--out-dir",
            p(&out),
            "--seed",
            "7",
        ]);
        (
            fs::read(&scores).unwrap(),
            fs::read(out.join("pairwise.json")).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
    let again = dir.path().join("again");
    let spec_path = dir.path().join("spec.json");
    ok(&["synth", "--spec", p(&spec_path), "--out-dir", p(&again)]);
    for f in ["manifest.jsonl", "img_3.msde", "txt_3_neg.msde"] {
        assert_eq!(
            fs::read(dir.path().join("data").join(f)).unwrap(),
            fs::read(again.join(f)).unwrap()
        );
    }
}

#[test]
fn thread_count_does_not_change_scores() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), ROTATED);
    let one = dir.path().join("one.jsonl");
    let many = dir.path().join("many.jsonl");
    let env = dir.path().join("env.jsonl");
    ok(&[
        "score",
        "--manifest",
        p(&manifest),
        "--out",
        p(&one),
        "--threads",
        "1",
    ]);
    ok(&[
        "score",
        "--manifest",
        p(&manifest),
        "--out",
        p(&many),
        "--threads",
        "4",
    ]);
    let out = Command::new(env!("CARGO_BIN_EXE_msd"))
        .args(["score", "--manifest", p(&manifest), "--out", p(&env)])
        .env("MSD_THREADS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("threads=3"));
    let a = fs::read(&one).unwrap();
    assert_eq!(a, fs::read(&many).unwrap());
    assert_eq!(a, fs::read(&env).unwrap());
}

#[test]
fn single_candidate_has_full_uncertainty() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), ROTATED);
    let text = fs::read_to_string(&manifest).unwrap();
    let mut rec: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    rec["candidates"].as_array_mut().unwrap().truncate(1);
    let single = manifest.with_file_name("single.jsonl");
    fs::write(&single, format!("{rec}\n")).unwrap();
    let scores = dir.path().join("s.jsonl");
    ok(&["score", "--manifest", p(&single), "--out", p(&scores)]);
    let line: Value = serde_json::from_str(fs::read_to_string(&scores).unwrap().trim()).unwrap();
    assert_eq!(line["u"].as_f64(), Some(1.0));
    assert_eq!(line["soft_msd"], line["msd"]);
}

fn score_line(id: &str, role: &str, g: f64, d: f64) -> String {
    format!(
        r#"{{"fingerprint":"f","sample_id":"{id}","role":"{role}","bikl":{d},"candidate_id":"{role}","g":{g},"d":{d},"msd":{m},"soft_msd":{m},"u":1.0,"p":0.5,"kl_img_txt":{d},"kl_txt_img":{d},"beta":0.5,"caption_length":8}}"#,
        m = g - 0.1 * d
    )
}

#[test]
fn all_positive_wins_give_accuracy_one() {
    let dir = TempDir::new().unwrap();
    let mut text = String::new();
    for i in 0..5 {
        text.push_str(&score_line(&format!("s{i}"), "pos", 0.8, 1.0));
        text.push('\n');
        text.push_str(&score_line(&format!("s{i}"), "neg", 0.2, 3.0));
        text.push('\n');
    }
    let scores = dir.path().join("s.jsonl");
    fs::write(&scores, text).unwrap();
    let out = dir.path().join("pw");
    ok(&["pairwise", "--scores", p(&scores), "--out-dir", p(&out)]);
    let report = json(&out.join("pairwise.json"));
    for m in ["soft_msd", "cosine", "msd", "bikl"] {
        assert_eq!(accuracy(&report, m), 1.0, "{m}");
    }
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.msde");
    fs::write(&bad, b"NOPE\x01\x00\x00\x00").unwrap();
    let out = dir.path().join("x.json");
    let r = msd(&[
        "em-diag",
        "--container",
        p(&bad),
        "--k",
        "2",
        "--out",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("magic"));
    assert!(!out.exists());

    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "alpha = 0.1\nlambda = 2\n").unwrap();
    let r = msd(&[
        "--config",
        p(&cfg),
        "synth",
        "--spec",
        "x",
        "--out-dir",
        "y",
    ]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("run.cfg:2"));

    let mut mixed = score_line("a", "pos", 0.5, 1.0);
    mixed.push('\n');
    mixed.push_str(&score_line("a", "neg", 0.4, 1.0).replace("\"f\"", "\"g\""));
    let scores = dir.path().join("mixed.jsonl");
    fs::write(&scores, mixed).unwrap();
    let r = msd(&[
        "pairwise",
        "--scores",
        p(&scores),
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(r.status.code(), Some(2));

    let r = msd(&[
        "score",
        "--manifest",
        p(&dir.path().join("none.jsonl")),
        "--out",
        "o",
        "--xi",
        "-1",
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn io_failures_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let r = msd(&[
        "score",
        "--manifest",
        p(&dir.path().join("absent.jsonl")),
        "--out",
        p(&dir.path().join("o.jsonl")),
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn config_file_changes_the_fingerprint() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), ROTATED);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "profile = long\nalpha = 0.2\n").unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["score", "--manifest", p(&manifest), "--out", p(&a)]);
    let out = ok(&[
        "--config",
        p(&cfg),
        "score",
        "--manifest",
        p(&manifest),
        "--out",
        p(&b),
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("profile=long") && stderr.contains("alpha=2e-1"));
    let first = |path: &Path| -> Value {
        serde_json::from_str(fs::read_to_string(path).unwrap().lines().next().unwrap()).unwrap()
    };
    assert_ne!(first(&a)["fingerprint"], first(&b)["fingerprint"]);
}

#[test]
fn agreement_reports_caption_and_model_levels() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), ROTATED);
    let scores = dir.path().join("s.jsonl");
    ok(&["score", "--manifest", p(&manifest), "--out", p(&scores)]);
    let labelled: Vec<String> = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .enumerate()
        .map(|(i, line)| {
            let mut rec: Value = serde_json::from_str(line).unwrap();
            rec["human"] = serde_json::json!({"label": "first", "difficulty_level": i % 3});
            rec["candidates"][0]["model"] = Value::from(format!("m{}", i % 3));
            rec["candidates"][1]["model"] = Value::from(format!("m{}", 3 + i % 2));
            rec.to_string()
        })
        .collect();
    let labels = manifest.with_file_name("labels.jsonl");
    fs::write(&labels, labelled.join("\n")).unwrap();
    let out = dir.path().join("agree");
    ok(&[
        "agree",
        "--scores",
        p(&scores),
        "--labels",
        p(&labels),
        "--out-dir",
        p(&out),
    ]);
    let report = json(&out.join("agree.json"));
    let soft = &report["caption_level"][0];
    assert_eq!(soft["metric"], "agreement(soft_msd)");
    assert_eq!(soft["n"], 60);
    assert_eq!(soft["per_bucket"].as_array().unwrap().len(), 3);
    assert_eq!(report["models"].as_array().unwrap().len(), 5);
    assert!(report["spearman"].is_number());
    assert!(fs::read_to_string(out.join("models.csv"))
        .unwrap()
        .starts_with("model,"));
}

#[test]
fn attribution_writes_grids_and_sidecar() {
    let dir = TempDir::new().unwrap();
    let manifest = synth(dir.path(), ROTATED);
    let out = dir.path().join("attr");
    ok(&[
        "attribute",
        "--manifest",
        p(&manifest),
        "--id",
        "pair2",
        "--cand",
        "neg",
        "--out-dir",
        p(&out),
    ]);
    let pgm = fs::read(out.join("penalty.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n7 7\n255\n"));
    assert_eq!(pgm.len(), 11 + 49);
    let csv = fs::read_to_string(out.join("coverage.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.lines().all(|l| l.split(',').count() == 7));
    let side = json(&out.join("attribution.json"));
    assert_eq!(side["maps"].as_array().unwrap().len(), 3);
    assert!(side["maps"][0]["min"].as_f64().unwrap() <= side["maps"][0]["max"].as_f64().unwrap());
    let r = msd(&[
        "attribute",
        "--manifest",
        p(&manifest),
        "--id",
        "nope",
        "--cand",
        "neg",
        "--out-dir",
        p(&out),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn mask_probe_and_em_diag_produce_reports() {
    let dir = TempDir::new().unwrap();
    let spec = ROTATED.replace("\"n_pairs\": 60", "\"n_pairs\": 6");
    let manifest = synth(dir.path(), &spec);
    let out = dir.path().join("mask");
    ok(&[
        "mask-probe",
        "--manifest",
        p(&manifest),
        "--modes",
        "top,bottom",
        "--out-dir",
        p(&out),
    ]);
    let csv = fs::read_to_string(out.join("mask_probe.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 2 * 2);
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(4) == Some("5")));
    let summary = json(&out.join("mask_summary.json"));
    assert_eq!(summary.as_array().unwrap().len(), 4);

    let diag = dir.path().join("diag.json");
    let img = manifest.with_file_name("img_0.msde");
    ok(&[
        "em-diag",
        "--container",
        p(&img),
        "--k",
        "2",
        "--seeds",
        "4",
        "--kappas",
        "5,40",
        "--out",
        p(&diag),
    ]);
    let report = json(&diag);
    let sweeps = report["sweeps"].as_array().unwrap();
    assert_eq!(sweeps.len(), 2);
    for s in sweeps {
        let ari = s["mean_pairwise_ari"].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&ari));
        assert_eq!(s["runs"].as_array().unwrap().len(), 4);
    }
}
