use std::path::Path;
use std::process::{Command, Output};

fn inn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = inn(args);
    assert!(
        out.status.success(),
        "inn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"n_neurons": 2, "n_layers": 1, "d_model": 16, "d_state": 4},
  "train": {"batch_size": 2, "seq_len": 16, "steps": 6, "eval_interval": 3, "eval_batches": 2,
            "checkpoint_interval": 3, "max_lr": 0.002}
}"#;

fn setup(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(&["synth-corpus", "--out", p(&dir.join("corpus.txt")), "--bytes", "20000", "--seed", "3"]);
}

#[test]
fn train_eval_generate_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let (cfg, data, run) = (d.join("tiny.json"), d.join("corpus.txt"), d.join("run"));
    let summary = ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    let summary: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(summary["steps"], 6);

    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    for key in ["step", "lr", "train_bpc", "valid_bpc", "grad_norm"] {
        assert!(metrics.lines().next().unwrap().contains(&format!("\"{key}\"")), "{key}");
    }
    assert!(std::fs::read_to_string(run.join("summary.csv")).unwrap().starts_with("steps,"));

    let ckpt = run.join("final.innt");
    let eval = ok(&["eval", "--ckpt", p(&ckpt), "--data", p(&data), "--seq-len", "32"]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let bpc = eval["bpc"].as_f64().unwrap();
    assert!(bpc > 0.0 && bpc < 6.0);
    assert!((eval["perplexity"].as_f64().unwrap() - eval["nll"].as_f64().unwrap().exp()).abs() < 1e-6);

    let args = ["generate", "--ckpt", p(&ckpt), "--seed-text", "the ", "--length", "30", "--seed", "1"];
    let text = ok(&args);
    assert_eq!(text, ok(&args));
    assert!(text.starts_with("the ") && text.trim_end_matches('\n').chars().count() == 34);

    let report = d.join("report");
    ok(&["analyze", "--ckpt", p(&ckpt), "--data", p(&data), "--out", p(&report), "--seq-len", "32"]);
    for f in ["attention_layer0.csv", "neuron_stats.csv", "summary.json"] {
        assert!(report.join(f).exists(), "{f}");
    }
}

#[test]
fn resume_continues_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let (cfg, data) = (d.join("tiny.json"), d.join("corpus.txt"));
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&d.join("a"))]);
    let mid = d.join("a").join("step000003.innt");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&d.join("b")), "--resume", p(&mid)]);
    let full = std::fs::read_to_string(d.join("a").join("metrics.jsonl")).unwrap();
    let tail = std::fs::read_to_string(d.join("b").join("metrics.jsonl")).unwrap();
    let expected: Vec<&str> = full.lines().skip(3).collect();
    assert_eq!(tail.lines().collect::<Vec<_>>(), expected);

    let other = d.join("other.json");
    std::fs::write(&other, TINY.replace("\"d_state\": 4", "\"d_state\": 5")).unwrap();
    let refused = inn(&["train", "--config", p(&other), "--data", p(&data), "--out", p(&d.join("c")), "--resume", p(&mid)]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("config hash"));
}

#[test]
fn ablate_prints_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let out = d.join("abl");
    let table = ok(&[
        "ablate", "--config", p(&d.join("tiny.json")), "--data", p(&d.join("corpus.txt")), "--seeds", "0", "--out", p(&out),
    ]);
    for name in ["INN Standard (Full)", "Static-Communication", "No-Communication", "Mamba Stack (Baseline)"] {
        assert!(table.contains(name), "{name}");
    }
    assert!(out.join("ablation.csv").exists() && out.join("ablation.md").exists());
}

#[test]
fn complexity_and_params() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d);
    let cfg = d.join("tiny.json");
    let csv = ok(&["complexity", "--config", p(&cfg), "--seq-lens", "8,16", "--neurons", "1,2"]);
    assert_eq!(csv.lines().count(), 5);
    let params: usize = ok(&["params", "--config", p(&cfg), "--vocab", "27"]).trim().parse().unwrap();
    assert!(params > 0);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let out = inn(&["eval", "--ckpt", "/nonexistent.innt", "--data", "/nonexistent.txt"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
