use std::path::Path;
use std::process::{Command, Output};

fn spt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spt")).args(args).output().expect("spawn spt")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
strategy = "tri"
segmenter = "heuristic"
epochs = 2
batch_size = 8
seed = 3
max_new = 4

[dataset]
kind = "celebrity"
facts = 4
scaffold_facts = 6
questions_per_scaffold = 1

[model]
d_model = 16
heads = 2
layers = 1
context = 64
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_writes_dataset_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("data");
    let o = spt(&["gen", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let train = std::fs::read_to_string(out.join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 4 + 6 * 2);
    assert_eq!(std::fs::read_to_string(out.join("test.jsonl")).unwrap().lines().count(), 4 * 8);
    assert!(out.join("vocab.json").is_file());

    let seg = tmp.path().join("seg.jsonl");
    let o = spt(&[
        "segment", "--config", &cfg, "--backend", "mock", "--input", out.join("train.jsonl").to_str().unwrap(), "--out", seg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read_to_string(&seg).unwrap();
    assert!(first.lines().next().unwrap().contains("\"chunks\""));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "strategy = \"sideways\"\n[dataset]\nkind = \"qa\"\n").unwrap();
    assert_eq!(code(&spt(&["gen", "--config", bad.to_str().unwrap(), "--out", "x"])), 2);
    let cfg = write_config(tmp.path(), "");
    assert_eq!(code(&spt(&["permute-preview", "--config", &cfg, "--backend", "ngram:0"])), 2);
    assert_eq!(code(&spt(&["train", "--config", "/nonexistent.toml", "--out", "x"])), 2);
}

#[test]
fn preview_prints_tagged_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = spt(&["permute-preview", "--config", &cfg, "-n", "16"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 16);
    assert!(text.contains("<reverse>") || text.contains("<permute>"), "{text}");
}

#[test]
fn train_eval_report_and_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "\n[[thresholds]]\ndirection = \"same\"\nmin = 0.99\n");
    let runs = tmp.path().join("runs");
    let o = spt(&["train", "--config", &cfg, "--out", runs.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let dir = std::fs::read_dir(&runs).unwrap().next().unwrap().unwrap().path();
    for f in ["config.toml", "seed", "train_log.csv", "model.ckpt", "metrics.csv", "metrics.md", "summary.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let o = spt(&["eval", "--run", dir.to_str().unwrap(), "--out", tmp.path().join("ev").to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert_eq!(
        std::fs::read(tmp.path().join("ev/metrics.csv")).unwrap(),
        std::fs::read(dir.join("metrics.csv")).unwrap()
    );
    let o = spt(&["report", runs.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("| Run |"));
}

#[test]
fn policy_grid_runs_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = tmp.path().join("ablate");
    let o = spt(&["ablate", "--config", &cfg, "--grid", "policy", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("(0.25, 0.25, 0.50)"), "{report}");
    assert_eq!(code(&spt(&["ablate", "--config", &cfg, "--grid", "diagonal", "--out", "x"])), 2);
}
