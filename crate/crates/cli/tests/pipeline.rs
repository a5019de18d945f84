//! End-to-end runs of the `uqd` binary against the bundled synthetic
//! fixture: 20 prompts, input and decoding axes, exact-match judge.
//!
//! The frozen `golden_report.json` pins every metric; an independent
//! pairwise AUROC recomputation guards the golden itself.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use uqd_core::eval::EvalOutcome;
use uqd_core::records::Axis;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn stage(tmp: &Path) {
    for name in ["dataset.jsonl", "model.json", "config.toml"] {
        std::fs::copy(fixture_dir().join(name), tmp.join(name)).unwrap();
    }
}

fn uqd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

fn stdout_json(output: &Output) -> serde_json::Value {
    serde_json::from_slice(&output.stdout).expect("stdout is JSON")
}

/// Reference AUROC: fraction of (failure, success) pairs ranked correctly,
/// ties counted half.
fn pairwise_auroc(scores: &[f64], failures: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &fail) in failures.iter().enumerate() {
        if !fail {
            continue;
        }
        for (j, &other) in failures.iter().enumerate() {
            if other {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn read_outcomes(dir: &Path) -> Vec<EvalOutcome> {
    let body = std::fs::read_to_string(dir.join("out/eval/outcomes.jsonl")).unwrap();
    body.lines()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect()
}

#[test]
fn full_pipeline_matches_golden_report() {
    let tmp = TempDir::new().unwrap();
    stage(tmp.path());

    let validate = uqd(tmp.path(), &["validate", "--config", "config.toml"]);
    assert_eq!(code(&validate), 0, "{validate:?}");

    for cmd in ["paraphrase", "collect", "score", "eval", "grid", "report"] {
        let output = uqd(tmp.path(), &[cmd, "--config", "config.toml"]);
        assert_eq!(
            code(&output),
            0,
            "{cmd} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }

    let golden = std::fs::read(fixture_dir().join("golden_report.json")).unwrap();
    let produced = std::fs::read(tmp.path().join("out/report.json")).unwrap();
    assert_eq!(
        produced, golden,
        "report.json deviates from the frozen reference"
    );

    // The golden itself must satisfy an independent AUROC recomputation.
    let outcomes = read_outcomes(tmp.path());
    assert_eq!(outcomes.len(), 20);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("out/report.json")).unwrap())
            .unwrap();
    for (row_idx, tag) in ["alpha", "beta"].iter().enumerate() {
        let row = &report["report"]["rows"][row_idx];
        assert_eq!(row["dataset_tag"], *tag);
        for axis in [Axis::Input, Axis::Decoding] {
            let subset: Vec<&EvalOutcome> = outcomes
                .iter()
                .filter(|o| o.dataset_tag == *tag)
                .collect();
            let scores: Vec<f64> = subset.iter().map(|o| o.scores[&axis]).collect();
            let failures: Vec<bool> = subset.iter().map(|o| o.failure).collect();
            let axis_key = match axis {
                Axis::Input => "input",
                Axis::Knowledge => "knowledge",
                Axis::Decoding => "decoding",
            };
            let reported = row["metrics"][axis_key]["auroc"].as_f64().unwrap();
            let oracle = pairwise_auroc(&scores, &failures);
            assert!(
                (reported - oracle).abs() < 1e-12,
                "{tag}/{axis_key}: reported {reported}, oracle {oracle}"
            );
        }
    }

    // Grid covers every outcome, and failure concentrates in high input
    // uncertainty: row marginals must not decrease with the input quantile.
    let grid = report["report"]["grid"].as_array().unwrap();
    let mut total = 0u64;
    let mut marginals: BTreeMap<u64, (f64, f64)> = BTreeMap::new();
    for cell in grid {
        let count = cell["count"].as_u64().unwrap();
        total += count;
        let entry = marginals
            .entry(cell["input_quantile"].as_u64().unwrap())
            .or_insert((0.0, 0.0));
        entry.0 += cell["failure_rate"].as_f64().unwrap() * count as f64;
        entry.1 += count as f64;
    }
    assert_eq!(total, 20);
    let rates: Vec<f64> = marginals.values().map(|(sum, n)| sum / n).collect();
    assert!(
        rates.windows(2).all(|w| w[0] <= w[1]),
        "input-quantile failure marginals not monotone: {rates:?}"
    );

    // Collection accounting: both experiments and all answers completed.
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("out/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["experiments"]["input/greedy"]["complete"], 20);
    assert_eq!(
        manifest["experiments"]["decoding/temperature"]["complete"],
        20
    );
    assert_eq!(manifest["answers_complete"], 20);
}

#[test]
fn dry_run_reports_planned_calls_without_generating() {
    let tmp = TempDir::new().unwrap();
    stage(tmp.path());

    let output = uqd(
        tmp.path(),
        &["collect", "--config", "config.toml", "--dry-run"],
    );
    assert_eq!(code(&output), 0);
    let summary = stdout_json(&output);
    // 20 prompts x (1 paraphrase + 5 input + 5 decoding + 1 answer).
    assert_eq!(summary["planned_calls"], 240);
    assert_eq!(summary["prompts"], 20);
    assert!(
        !tmp.path().join("out").exists(),
        "dry run must not create the output directory"
    );
}

#[test]
fn score_reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    stage(tmp.path());
    assert_eq!(code(&uqd(tmp.path(), &["collect", "--config", "config.toml"])), 0);
    assert_eq!(code(&uqd(tmp.path(), &["score", "--config", "config.toml"])), 0);

    let input_path = tmp.path().join("out/scores/input/greedy.jsonl");
    let dec_path = tmp.path().join("out/scores/decoding/temperature.jsonl");
    let input_first = std::fs::read(&input_path).unwrap();
    let dec_first = std::fs::read(&dec_path).unwrap();

    assert_eq!(code(&uqd(tmp.path(), &["score", "--config", "config.toml"])), 0);
    assert_eq!(std::fs::read(&input_path).unwrap(), input_first);
    assert_eq!(std::fs::read(&dec_path).unwrap(), dec_first);

    // Axis restriction touches only the named experiment.
    let restricted = uqd(
        tmp.path(),
        &["score", "--config", "config.toml", "--axis", "input"],
    );
    assert_eq!(code(&restricted), 0);
    let summary = stdout_json(&restricted);
    assert_eq!(summary["experiments"].as_array().unwrap().len(), 1);
}

#[test]
fn eval_without_failures_exits_partial_and_names_auroc() {
    let tmp = TempDir::new().unwrap();
    stage(tmp.path());
    // Every reference now matches the model's answer: one label class.
    let dataset = std::fs::read_to_string(tmp.path().join("dataset.jsonl")).unwrap();
    std::fs::write(
        tmp.path().join("dataset.jsonl"),
        dataset.replace("quartz", "amber"),
    )
    .unwrap();

    assert_eq!(code(&uqd(tmp.path(), &["collect", "--config", "config.toml"])), 0);
    assert_eq!(code(&uqd(tmp.path(), &["score", "--config", "config.toml"])), 0);
    let eval = uqd(tmp.path(), &["eval", "--config", "config.toml"]);
    assert_eq!(code(&eval), 2, "single-class labels must exit 2");
    let stderr = String::from_utf8_lossy(&eval.stderr);
    assert!(
        stderr.contains("AUROC undefined"),
        "diagnostic missing from: {stderr}"
    );
}

#[test]
fn validate_rejects_duplicate_ids() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("bad.jsonl");
    let line = r#"{"id": "dup", "question": "q", "reference_answer": "a", "dataset_tag": "t"}"#;
    std::fs::write(&bad, format!("{line}\n{line}\n")).unwrap();

    let output = uqd(tmp.path(), &["validate", "--dataset", "bad.jsonl"]);
    assert_eq!(code(&output), 1);
    let report = stdout_json(&output);
    assert_eq!(report["invalid"], 1);
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    let tmp = TempDir::new().unwrap();
    stage(tmp.path());

    assert_eq!(code(&uqd(tmp.path(), &["collect", "--bogus-flag"])), 1);
    assert_eq!(code(&uqd(tmp.path(), &["--help"])), 0);
    // Grid before eval: the outcomes file does not exist yet.
    let premature = uqd(tmp.path(), &["grid", "--config", "config.toml"]);
    assert_eq!(code(&premature), 1);
    assert!(String::from_utf8_lossy(&premature.stderr).contains("eval"));
}
