use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn raqg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raqg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{
  "epochs": 1,
  "model": {"image_size": 16, "patch_size": 4, "hidden_dim": 8, "embed_dim": 8, "ffn_dim": 16,
            "heads": 2, "encoder_layers": 1, "decoder_layers": 1},
  "strategy": {"kind": "raqg", "m": 5, "removal": true, "min_queries": 1, "max_queries": 16}
}"#;

/// Writes a small dataset and the tiny training config into `dir`.
fn setup(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    fs::write(dir.join("spec.json"), format!(r#"{{"n_images": {n}, "object_count_range": [1, 4]}}"#)).unwrap();
    let o = raqg(&["gen-data", "--config", "spec.json", "--out", "data.jsonl"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(dir.join("tiny.json"), TINY).unwrap();
    (dir.join("data.jsonl"), dir.join("tiny.json"))
}

fn train(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--config", "tiny.json", "--dataset", "data.jsonl", "--out", "runs"];
    args.extend_from_slice(extra);
    let o = raqg(&args, dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o).lines().find_map(|l| l.strip_prefix("run directory: ").map(str::to_string)).unwrap();
    dir.join(line)
}

#[test]
fn help_and_unknown_flags() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&raqg(&["--help"], dir.path())), 0);
    assert_eq!(code(&raqg(&["train", "--help"], dir.path())), 0);
    assert_eq!(code(&raqg(&["--no-such-flag"], dir.path())), 2);
    assert_eq!(code(&raqg(&["train", "--dataset", "x", "--out", "y", "--bogus"], dir.path())), 2);
}

#[test]
fn gen_data_is_deterministic_and_summarized() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 12);
    let text = fs::read_to_string(d.join("data.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 12);
    let o = raqg(&["gen-data", "--config", "spec.json", "--out", "again.jsonl"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(d.join("again.jsonl")).unwrap(), text.as_bytes());

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("data.jsonl.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["n_images"], 12);
    let total: u64 = summary["count_histogram"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total, 12);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("data.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert!(manifest["finished_at"].is_u64());

    // A different seed gives a different file.
    raqg(&["gen-data", "--config", "spec.json", "--out", "other.jsonl", "--seed", "9"], d);
    assert_ne!(fs::read(d.join("other.jsonl")).unwrap(), text.as_bytes());
}

#[test]
fn malformed_spec_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for (i, bad) in [r#"{"n_images": 0}"#, r#"{"n_images": "many"}"#, "{not json", r#"{"n_imgs": 3}"#].iter().enumerate() {
        fs::write(d.join("bad.json"), bad).unwrap();
        let out = format!("bad{i}.jsonl");
        let o = raqg(&["gen-data", "--config", "bad.json", "--out", &out], d);
        assert_eq!(code(&o), 2, "{bad}");
        assert!(!d.join(&out).exists());
        assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
    }
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 5);
    let start = std::time::Instant::now();
    let run = train(d, &[]);
    assert!(start.elapsed().as_secs() < 60);
    for f in ["checkpoint.json", "checkpoint.bin", "losses.csv", "eval.json", "config.json", "manifest.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 0);
    assert!(!manifest["outputs"].as_array().unwrap().is_empty());
}

#[test]
fn strategy_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 5);
    let run = train(d, &["--strategy", "two-stage", "--fixed-queries", "7", "--seed", "3", "--ranking-loss", "l1"]);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["strategy"]["kind"], "two_stage");
    assert_eq!(cfg["strategy"]["k"], 7);
    assert_eq!(cfg["seed"], 3);
    assert_eq!(cfg["ranking_loss"], "l1");

    let run = train(d, &["--m", "2", "--removal", "false"]);
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["strategy"]["m"], 2);
    assert_eq!(cfg["strategy"]["removal"], false);

    // More fixed queries than proposals, or mixing flags across strategies, is a usage error.
    let args = ["train", "--config", "tiny.json", "--dataset", "data.jsonl", "--out", "runs"];
    let o = raqg(&[&args[..], &["--strategy", "two-stage", "--fixed-queries", "300"]].concat(), d);
    assert_eq!(code(&o), 2);
    let o = raqg(&[&args[..], &["--strategy", "lp", "--m", "3"]].concat(), d);
    assert_eq!(code(&o), 2);
    let o = raqg(&[&args[..], &["--ranking-loss", "huber"]].concat(), d);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("tiny.json"), TINY).unwrap();
    let o = raqg(&["train", "--config", "tiny.json", "--dataset", "nope.jsonl", "--out", "runs"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_prints_metrics_json() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 6);
    let run = train(d, &[]);
    let run = run.to_str().unwrap();
    let o = raqg(&["eval", "--checkpoint", run, "--dataset", "data.jsonl"], d);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    for k in ["mr", "ap", "recall", "mean_query_count"] {
        assert!(v[k].is_number(), "{k}");
    }
    // An untrained-scale model misses nearly everything.
    assert!(v["mr"].as_f64().unwrap() > 0.9);

    let o = raqg(&["eval", "--checkpoint", run, "--dataset", "data.jsonl", "--strategy", "two-stage", "--fixed-queries", "5"], d);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["mean_query_count"], 5.0);
}

#[test]
fn eval_names_mismatched_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 3);
    let run = train(d, &[]);
    let manifest = run.join("checkpoint.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
    let name = m["tensors"][0]["name"].as_str().unwrap().to_string();
    m["tensors"][0]["shape"] = serde_json::json!([1, 1, 1]);
    fs::write(&manifest, serde_json::to_string(&m).unwrap()).unwrap();
    let o = raqg(&["eval", "--checkpoint", manifest.to_str().unwrap(), "--dataset", "data.jsonl"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains(&name));
}

#[test]
fn compare_emits_table_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 6);
    let a = train(d, &[]);
    let b = train(d, &["--strategy", "two-stage", "--fixed-queries", "6"]);
    let c = train(d, &["--strategy", "lp", "--fixed-queries", "4"]);
    let runs: Vec<&str> = [&a, &b, &c].iter().map(|p| p.to_str().unwrap()).collect();
    let mut args = vec!["compare", "--dataset", "data.jsonl", "--out", "cmp", "--runs"];
    args.extend(runs);
    let o = raqg(&args, d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = stdout(&o);
    assert!(table.starts_with("| strategy | queries | MR | AP | Recall |"));
    assert_eq!(table.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| strategy")).count(), 3);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cmp/compare.json")).unwrap()).unwrap();
    let mut reader = csv::Reader::from_path(d.join("cmp/compare.csv")).unwrap();
    assert_eq!(reader.headers().unwrap(), vec!["label", "queries", "mr", "ap", "recall"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for (row, cell) in rows.iter().zip(report["cells"].as_array().unwrap()) {
        assert_eq!(row[0], *cell["label"].as_str().unwrap());
        let s = &cell["outcome"];
        for (i, k) in [(1, "mean_query_count"), (2, "mr"), (3, "ap"), (4, "recall")] {
            assert_eq!(row[i].parse::<f64>().unwrap(), s[k].as_f64().unwrap(), "{k}");
        }
        // Per-image guideline audits travel with the comparison.
        let images = cell["eval"]["images"].as_array().unwrap();
        assert_eq!(images.len(), 6);
        assert!(images[0]["audit"]["query_count"].is_u64());
    }
    assert_eq!(rows[1][1].parse::<f64>().unwrap(), 6.0);
    assert_eq!(rows[2][1].parse::<f64>().unwrap(), 4.0);

    let o = raqg(&["compare", "--dataset", "data.jsonl", "--out", "cmp1", "--runs", a.to_str().unwrap()], d);
    assert_eq!(code(&o), 2);
}

fn well_formed(svg: &str) {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
}

#[test]
fn plot_queries_draws_anchor_dots() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 4);
    let run = train(d, &[]);
    let run = run.to_str().unwrap();
    let o = raqg(&["plot-queries", "--checkpoint", run, "--dataset", "data.jsonl", "--scene", "2", "--out", "q.svg", "--strategy", "two-stage", "--fixed-queries", "9"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(d.join("q.svg")).unwrap();
    well_formed(&svg);
    assert_eq!(svg.matches("<circle").count(), 9);
    assert!(svg.contains("X = 9 queries"));

    // Empty scene: no boxes, and the count falls to the lower bound.
    fs::write(d.join("empty.jsonl"), "{\"id\":7,\"crowd_level\":0.0,\"boxes\":[]}\n").unwrap();
    let o = raqg(&["plot-queries", "--checkpoint", run, "--dataset", "empty.jsonl", "--scene", "7", "--out", "e.svg"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let svg = fs::read_to_string(d.join("e.svg")).unwrap();
    well_formed(&svg);
    assert!(!svg.contains(r##"stroke="#1a7f37""##));
    let x: usize = svg.split("X = ").nth(1).unwrap().split(' ').next().unwrap().parse().unwrap();
    assert!(x >= 1);

    let o = raqg(&["plot-queries", "--checkpoint", run, "--dataset", "empty.jsonl", "--scene", "8", "--out", "f.svg"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn grad_check_passes_and_catches_a_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = raqg(&["grad-check", "--cases", "5"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for op in ["matmul (left)", "softmax (axis 1)", "layer_norm", "multi-head attention", "giou", "sgl1 backward vs closed form", "whole model"] {
        assert!(out.contains(op), "{op} not reported");
    }
    assert!(out.contains("sgl1 gradient at (y*=2, y=1): 0.1085992"));

    let o = raqg(&["grad-check", "--cases", "5", "--inject-fault"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupted"));
}

#[test]
fn ablate_renders_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, 5);
    let o = raqg(&["ablate", "--config", "tiny.json", "--dataset", "data.jsonl", "--out", "abl", "--axis", "multiplier", "--values", "0,5"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("| metric | 0 | 5 |"));
    assert!(d.join("abl/ablation.md").exists());
    let o = raqg(&["ablate", "--config", "tiny.json", "--dataset", "data.jsonl", "--out", "abl2", "--axis", "loss", "--values", "l1,l2"], d);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("| metric | l1 | l2 |"));
    let o = raqg(&["ablate", "--config", "tiny.json", "--dataset", "data.jsonl", "--out", "abl3", "--axis", "strategy", "--values", "warp:3"], d);
    assert_eq!(code(&o), 2);
}
