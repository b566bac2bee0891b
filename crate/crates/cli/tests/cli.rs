use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fpage_core::eval::{write_predictions, PredictionRecord, TTestResult};

const FIXTURE_T: f64 = 1.7320508075688776;
const FIXTURE_P: f64 = 0.12687036692367074;

const SMALL_CONFIG: &str = r#"
[train]
batch_size = 16
max_epochs = 2
head_width = 4

[train.augment]
horizontal_flip = true
scale = false
rotation = false
translation = false
bbox_jitter = false

[backbone]
low_channels = 4
high_channels = 22
"#;

fn fpage(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpage"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn fpage")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_errors(path: &Path, errors: &[f64]) {
    let records: Vec<_> = errors
        .iter()
        .enumerate()
        .map(|(i, e)| PredictionRecord::new(format!("img{i}.png"), 30, 30.0 + e))
        .collect();
    write_predictions(path, &records).unwrap();
}

#[test]
fn metrics_on_five_record_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("a.jsonl");
    let csv = dir.path().join("cs.csv");
    write_errors(&pred, &[0.0, 3.0, 6.0, 10.0, 2.0]);
    let out = fpage(&["metrics", "--pred", p(&pred), "--out", p(&csv)]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.lines().any(|l| l == "MAE 4.2"), "{text}");
    assert!(text.lines().any(|l| l == "CS_5 60.0"), "{text}");
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("threshold,cs\n"));
    assert!(table.contains("\n5,60\n"));
}

#[test]
fn metrics_compare_prints_t_test_json() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    // Differences a - b equal the reference fixture.
    let d = [0.3, -0.1, 0.4, 0.2, 0.0, 0.5, -0.2, 0.1];
    let base: Vec<f64> = (0..8).map(|i| 2.0 + i as f64).collect();
    write_errors(&b, &base);
    write_errors(&a, &base.iter().zip(d).map(|(x, d)| x + d).collect::<Vec<_>>());
    let out = fpage(&["metrics", "--pred", p(&a), "--compare", p(&b), "--num-comparisons", "8"]);
    assert!(out.status.success());
    let r: TTestResult = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(r.n, 8);
    assert!((r.t - FIXTURE_T).abs() < 1e-6, "t = {}", r.t);
    assert!((r.p - FIXTURE_P).abs() < 1e-6, "p = {}", r.p);
    assert!((r.p_corrected - (8.0 * FIXTURE_P).min(1.0)).abs() < 1e-6);
    assert!(!r.significant);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(fpage(&["metrics", "--bogus"]).status.code(), Some(2));
    assert_eq!(fpage(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(fpage(&["metrics"]).status.code(), Some(2));
    let help = fpage(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("probe-attention"));
}

#[test]
fn domain_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = fpage(&["metrics", "--pred", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));

    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert_eq!(fpage(&["metrics", "--pred", p(&empty)]).status.code(), Some(1));

    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"image_path\":\"x\"}\n").unwrap();
    let out = fpage(&["metrics", "--pred", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[nonsense]\n").unwrap();
    let good = dir.path().join("good.jsonl");
    write_errors(&good, &[1.0]);
    assert_eq!(fpage(&["--config", p(&cfg), "metrics", "--pred", p(&good)]).status.code(), Some(1));
}

#[test]
fn clean_run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let out = fpage(&["--seed", "3", "synth", "embeddings", "--out", p(&store), "--ratios", "0.2,0.85,0,0.5,0.9"]);
    assert!(out.status.success());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for target in [&a, &b] {
        let o = fpage(&["--seed", "7", "clean", "run", "--embeddings", p(&store), "--runs", "20", "--out", p(target)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("subjects 5 ambiguous 2"), "{}", stdout(&o));
    }
    for f in ["consensus.jsonl", "review_queue.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
    let other = dir.path().join("c");
    let o = fpage(&["--seed", "7", "clean", "run", "--embeddings", p(&store), "--eps", "0", "--out", p(&other)]);
    assert_eq!(o.status.code(), Some(1), "eps 0 is rejected");
}

#[test]
fn train_predict_eval_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let c = p(&cfg);
    for (name, seed, count) in [("train", "1", "48"), ("val", "2", "16")] {
        let o = fpage(&["--config", c, "--seed", seed, "synth", "faces", "--out", p(&d.join(name)), "--count", count]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let train_m = d.join("train/manifest.jsonl");
    let val_m = d.join("val/manifest.jsonl");
    let model = d.join("model.json");
    let log = d.join("progress.jsonl");
    let o = fpage(&[
        "--config", c, "--seed", "5", "train", "--train", p(&train_m), "--val", p(&val_m), "--out", p(&model), "--log",
        p(&log),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for key in ["epoch", "lr", "train_loss", "val_mae", "wall_seconds"] {
        assert!(lines[0].get(key).is_some(), "missing {key}");
    }

    let preds = d.join("preds.jsonl");
    let o = fpage(&["predict", "--model", p(&model), "--manifest", p(&val_m), "--out", p(&preds)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 16);

    let o = fpage(&["eval", "--model", p(&model), "--manifest", p(&val_m)]);
    assert!(o.status.success());
    let from_eval = stdout(&o);
    let o = fpage(&["metrics", "--pred", p(&preds)]);
    assert_eq!(stdout(&o), from_eval, "eval and metrics over its predictions agree");

    let o = fpage(&["probe-attention", "--model", p(&model), "--manifest", p(&val_m)]);
    assert!(o.status.success());
    let csv = stdout(&o);
    assert!(csv.starts_with("class,mean,std\nbackground,"));
    assert_eq!(csv.split("\n\n").next().unwrap().lines().count(), 12);

    // Same seed, same checkpoint bytes.
    let again = d.join("again.json");
    let o = fpage(&["--config", c, "--seed", "5", "train", "--train", p(&train_m), "--val", p(&val_m), "--out", p(&again)]);
    assert!(o.status.success());
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());
}
