use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3
[synth]
n_patients = 150
[synth.class_shares]
noaf = 0.7
withaf = 0.1
futureaf = 0.2
[train]
max_epochs = 1
[eval]
bootstrap_replicates = 50
"#;

fn af_horizon(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_af-horizon"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .output()
        .expect("spawn af-horizon")
}

fn with_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stage(dir: &Path, cfg: &str, name: &str) -> Output {
    af_horizon(dir, &[name, "--config", cfg])
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn missing_config_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = af_horizon(dir.path(), &["generate", "--config", "/nonexistent/run.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_config_key_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), "[synth]\nn_patient = 10\n");
    let out = stage(dir.path(), &cfg, "generate");
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn eval_without_model_names_the_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_config(dir.path(), TINY);
    for s in ["generate", "label", "split"] {
        assert_eq!(code(&stage(dir.path(), &cfg, s)), 0, "{s}");
    }
    let out = stage(dir.path(), &cfg, "eval");
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.afh"));
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = with_config(a.path(), TINY);
    assert_eq!(code(&stage(a.path(), &cfg, "generate")), 0);
    assert_eq!(code(&stage(b.path(), &cfg, "generate")), 0);
    for f in ["manifest.csv", "cohort_summary.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let first = fs::read_to_string(a.path().join("manifest.csv")).unwrap();
    let signal = first.lines().nth(2).unwrap().rsplit(',').next().unwrap().to_string();
    let wave = |d: &Path| fs::read(d.join(&signal)).unwrap();
    assert_eq!(wave(a.path()), wave(b.path()));
}

#[test]
fn stages_are_idempotent_tagged_and_degenerate_cox_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = with_config(d, TINY);
    for s in ["generate", "label", "split", "train", "eval"] {
        let out = stage(d, &cfg, s);
        assert_eq!(code(&out), 0, "{s}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let metrics = fs::read(d.join("metrics.json")).unwrap();
    let scores = fs::read(d.join("scores.csv")).unwrap();
    assert_eq!(code(&stage(d, &cfg, "eval")), 0);
    assert_eq!(fs::read(d.join("metrics.json")).unwrap(), metrics);
    assert_eq!(fs::read(d.join("scores.csv")).unwrap(), scores);

    let summary: serde_json::Value = serde_json::from_slice(&metrics).unwrap();
    let hash = summary["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 16);
    for f in ["manifest.csv", "labeled.csv", "splits.csv", "history.csv", "scores.csv", "roc.csv", "roc.svg", "train_summary.json"] {
        let text = fs::read_to_string(d.join(f)).unwrap();
        assert!(text.contains(&format!("config_hash={hash}")) || text.contains(&format!("\"config_hash\": \"{hash}\"")), "{f}");
    }

    // every exam in the lowest risk group leaves no usable group indicator
    let text = String::from_utf8(scores).unwrap();
    let rewritten: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i < 2 {
                return l.to_string();
            }
            let mut cells: Vec<&str> = l.split(',').collect();
            *cells.last_mut().unwrap() = "0.05";
            cells.join(",")
        })
        .collect();
    fs::write(d.join("scores.csv"), rewritten.join("\n") + "\n").unwrap();
    let out = stage(d, &cfg, "survival");
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("survival_diagnostics.json")).unwrap()).unwrap();
    assert!(!diag["failures"].as_array().unwrap().is_empty());
    let cox: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("cox.json")).unwrap()).unwrap();
    assert!(cox["models"][0]["error"].is_string());
    assert_eq!(code(&stage(d, &cfg, "report")), 0);
    assert!(fs::read_to_string(d.join("report.md")).unwrap().contains("fit failed"));
}
