use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const GOLDEN: &str = "The demographics information: 30.0 year-old, black African American, female. \
The vital parameters: temperature 36.1, heartrate 88.0, resprate 16.0. \
The biometrics information: bmi 31.1, weight 84.8, height 165.1.";

const EXAMPLE_RECORD: &str = "age=30,race=black African American,sex=female,temperature=36.1,heartrate=88,resprate=16,bmi=31.1,weight=84.8,height=165.1";

fn unipact(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unipact")).args(args).env_remove("UNIPACT_SEED").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = unipact(args);
    assert!(out.status.success(), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn failure(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    let last = lines.last().copied().unwrap_or("");
    assert!(last.starts_with("error: "), "{err}");
    last.to_string()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn gen_data_writes_the_configured_cohort_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--out", p(&a)]);
    ok(&["gen-data", "--out", p(&b)]);
    assert_eq!(read(a.join("manifest.jsonl")).lines().count(), 200);
    let mut files: Vec<_> = std::fs::read_dir(a.join("ecg")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 200);
    for f in ["manifest.jsonl", "tasks.jsonl", "cohort.json", "config.txt", "run.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    for f in files {
        assert_eq!(std::fs::read(a.join("ecg").join(&f)).unwrap(), std::fs::read(b.join("ecg").join(&f)).unwrap());
    }
    let run: serde_json::Value = serde_json::from_str(&read(a.join("run.json"))).unwrap();
    assert_eq!(run["seed"], 42);
    assert_eq!(run["artifacts"].as_object().unwrap().len(), 4);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[run]\nfoo = 3\n").unwrap();
    let line = failure(&unipact(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("x"))]));
    assert!(line.starts_with("error: config: ") && line.contains("foo"), "{line}");
    let line = failure(&unipact(&["gen-data", "--set", "cohort.foo=1", "--out", p(&dir.path().join("x"))]));
    assert!(line.contains("foo"), "{line}");
}

#[test]
fn usage_errors_are_single_line() {
    let out = unipact(&["train", "--stage", "1"]);
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(failure(&out).starts_with("error: usage: "));
    assert!(unipact(&["--help"]).status.success());
}

#[test]
fn seed_env_overrides_and_is_logged() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_unipact"))
        .args(["gen-data", "--set", "cohort.n_patients=30", "--set", "cohort.n_test=5", "--out", p(dir.path())])
        .env("UNIPACT_SEED", "17")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("UNIPACT_SEED"));
    let run: serde_json::Value = serde_json::from_str(&read(dir.path().join("run.json"))).unwrap();
    assert_eq!(run["seed"], 17);
    assert_eq!(run["seed_source"], "UNIPACT_SEED");
    assert!(read(dir.path().join("config.txt")).contains("seed = 17"));
    let bad = Command::new(env!("CARGO_BIN_EXE_unipact"))
        .args(["gen-data", "--out", p(&dir.path().join("y"))])
        .env("UNIPACT_SEED", "seventeen")
        .output()
        .unwrap();
    assert!(failure(&bad).starts_with("error: usage: "));
}

#[test]
fn stage_two_without_init_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--set", "cohort.n_patients=30", "--set", "cohort.n_test=5", "--out", p(&data)]);
    let line = failure(&unipact(&["train", "--stage", "2", "--data", p(&data), "--out", p(&dir.path().join("r"))]));
    assert!(line.starts_with("error: missing-checkpoint: "), "{line}");
    let line = failure(&unipact(&["train", "--stage", "3", "--data", p(&data), "--out", p(&dir.path().join("r"))]));
    assert!(line.contains("stage"), "{line}");
}

#[test]
fn malformed_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let line = failure(&unipact(&["eval", "--checkpoint", "/nope.ckpt", "--data", "/nope", "--out", p(dir.path())]));
    assert!(line.starts_with("error: io: "), "{line}");
    let line = failure(&unipact(&["report", "/nope/report.json"]));
    assert!(line.starts_with("error: io: "), "{line}");
}

/// Stage 1, stage 2, evaluation, ablation and prediction on the default
/// 200-patient cohort.
#[test]
fn default_pipeline_end_to_end() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (r1, r2, ev) = (dir.path().join("s1"), dir.path().join("s2"), dir.path().join("eval"));
    ok(&["gen-data", "--out", p(&data)]);
    ok(&["build-vocab", "--data", p(&data)]);
    assert!(data.join("vocab.txt").exists());
    let s1 = ok(&["train", "--stage", "1", "--data", p(&data), "--out", p(&r1)]);
    assert!(s1.starts_with("stage1: "), "{s1}");
    let ck1 = r1.join("model.ckpt");
    ok(&["train", "--stage", "2", "--data", p(&data), "--init", p(&ck1), "--out", p(&r2)]);
    assert!(t0.elapsed() < Duration::from_secs(15 * 60), "{:?}", t0.elapsed());

    for run in [&r1, &r2] {
        let rec: serde_json::Value = serde_json::from_str(&read(run.join("run.json"))).unwrap();
        assert_eq!(rec["seed"], 42);
        let hashes = rec["artifacts"].as_object().unwrap();
        for f in ["model.ckpt", "losses.csv", "config.txt"] {
            assert_eq!(hashes[f].as_str().unwrap().len(), 64, "{f}");
        }
        let csv = read(run.join("losses.csv"));
        assert!(csv.starts_with("step,stage,loss\n"));
    }
    assert!(read(r2.join("losses.csv")).lines().skip(1).all(|l| l.contains(",stage2,")));

    let ck2 = r2.join("model.ckpt");
    let table = ok(&["eval", "--checkpoint", p(&ck2), "--data", p(&data), "--out", p(&ev), "--ablate", "C"]);
    assert!(table.contains("overall"));
    let ablation = read(ev.join("ablation.txt"));
    let rows: Vec<&str> = ablation.lines().skip(2).collect();
    assert_eq!(rows.len(), 6, "{ablation}");
    for (row, name) in rows.iter().zip(["w/o Demographics", "w/o Biometrics", "w/o Vitals", "w/o ECG", "w/o EHR", "Full model"]) {
        assert!(row.starts_with(name), "{row}");
    }
    let report: serde_json::Value = serde_json::from_str(&read(ev.join("report.json"))).unwrap();
    let cats: Vec<f64> = report["categories"].as_array().unwrap().iter().map(|c| c["mean_auroc"].as_f64().unwrap()).collect();
    let overall = report["overall"].as_f64().unwrap();
    assert!((overall - cats.iter().sum::<f64>() / cats.len() as f64).abs() < 1e-12);
    assert_eq!(read(ev.join("scores.csv")).lines().count(), 1 + 50 * 27);
    let shown = ok(&["report", p(&ev)]);
    assert!(shown.contains("w/o Vitals"));

    // Inline record with a synthetic ECG from the cohort.
    let ecg = data.join("ecg/P00000.upct");
    let out = ok(&["predict", "--checkpoint", p(&ck2), "--data", p(&data), "--record", EXAMPLE_RECORD, "--ecg", p(&ecg)]);
    assert!(out.contains(GOLDEN), "{out}");
    assert!(out.contains("ecg_tokens: 20"));
    let score_line = out.lines().find(|l| l.starts_with("score: ")).unwrap();
    let score = &score_line["score: ".len()..];
    assert_eq!(score.split('.').nth(1).unwrap().len(), 4, "{score}");
    let v: f64 = score.parse().unwrap();
    assert!(v > 0.0 && v < 1.0);
    let answer = out.lines().find(|l| l.starts_with("answer: ")).unwrap();
    assert!(answer == "answer: Yes" || answer == "answer: No");

    let no_ecg = ok(&["predict", "--checkpoint", p(&ck2), "--data", p(&data), "--record", EXAMPLE_RECORD, "--no-ecg"]);
    assert!(no_ecg.contains("ecg_tokens: 0"));
    let by_id = ok(&["predict", "--checkpoint", p(&ck2), "--data", p(&data), "--patient", "P00190", "--task", "mort_28d"]);
    assert!(by_id.contains("die within 28 days"));

    let bad = unipact(&["predict", "--checkpoint", p(&ck2), "--data", p(&data), "--record", "age=old", "--no-ecg"]);
    assert!(failure(&bad).starts_with("error: invalid: "));
    let other = dir.path().join("other.txt");
    std::fs::write(&other, "<pad>\n<unk>\n<bos>\n<eos>\n<ecg>\nYes\nNo\nword\n").unwrap();
    let mismatch = unipact(&["eval", "--checkpoint", p(&ck2), "--data", p(&data), "--vocab", p(&other), "--out", p(&dir.path().join("e2"))]);
    assert!(failure(&mismatch).starts_with("error: mismatch: "));
}
