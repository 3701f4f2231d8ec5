use std::path::Path;
use std::process::{Command, Output};

fn pathrank(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pathrank"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
[model]
embed_dim = 4
lstm_hidden = 4
score_dim = 4
dropout_rate = 0.0

[train]
epochs = 2
batch_size = 4
eval_episodes = 4
path_length = 2
candidate_size = 4

[world]
preset = "prereq-chain"
num_concepts = 8

[experiment]
scenarios = [0]
lengths = [2]
methods = ["src", "random", "rule"]
eval_episodes = 5
seeds = [0]
"#;

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = pathrank(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("full objective"));
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("max rel. err") && last.contains("< 1e-4"), "{last}");
}

#[test]
fn oracle_lists_twelve_paths_best_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = pathrank(&["--config", &cfg, "oracle", "--candidates", "4", "--length", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let rows: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit_once("  ").unwrap().1.trim().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 12, "{text}");
    assert!(rows.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn compare_writes_reports_and_rejects_empty_methods() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = pathrank(&["--config", &cfg, "--out", "res", "compare"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "summary.json", "paths.jsonl"] {
        assert!(dir.path().join("res").join(f).exists(), "{f}");
    }

    let empty = dir.path().join("empty.toml");
    std::fs::write(&empty, TINY.replace(r#"methods = ["src", "random", "rule"]"#, "methods = []")).unwrap();
    let o = pathrank(&["--config", empty.to_str().unwrap(), "compare"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("methods is empty"));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = pathrank(&["--config", &cfg, "--seed", "3", "--out", "run", "train"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    assert!(run.join("train_log.csv").exists());
    let o = pathrank(
        &["--config", &cfg, "--seed", "3", "eval", "--checkpoint", run.join("checkpoint.json").to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let metrics: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(metrics["episodes"], 5);
    assert!(metrics["mean_et"].as_f64().unwrap().is_finite());
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(pathrank(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(pathrank(&["compare", "--bogus"], dir.path()).status.code(), Some(1));
    assert_eq!(pathrank(&[], dir.path()).status.code(), Some(1));
    assert_eq!(pathrank(&["--config", "missing.toml", "compare"], dir.path()).status.code(), Some(1));
    assert_eq!(pathrank(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    std::fs::write(dir.path().join("broken.json"), "{ not json").unwrap();
    let o = pathrank(&["--config", &cfg, "eval", "--checkpoint", "broken.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
