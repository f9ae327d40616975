use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cpgd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpgd"))
        .args(args)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn list_scenarios_names_every_scenario() {
    let o = cpgd(&["list-scenarios"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in [
        "collapse-study",
        "component-ablation",
        "weighting-ablation",
        "reference-ablation",
        "train",
        "verify",
    ] {
        assert!(text.contains(name), "{name} missing from:\n{text}");
    }
}

#[test]
fn unknown_scenario_fails_with_the_registry() {
    let o = cpgd(&["run", "collapse"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("unknown scenario `collapse`"), "{err}");
    assert!(err.contains("collapse-study"), "{err}");
}

#[test]
fn misspelled_key_is_rejected_by_name() {
    let o = cpgd(&["run", "train", "--dry-run", "--set", "loss.epsilom=0.3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("loss.epsilom"), "{}", stderr(&o));
}

#[test]
fn misspelled_key_in_a_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[optimizer]\nlearnig_rate = 0.1\n").unwrap();
    let o = cpgd(&[
        "run",
        "train",
        "--dry-run",
        "--config",
        path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learnig_rate"), "{}", stderr(&o));
}

#[test]
fn dry_run_reports_provenance() {
    let o = cpgd(&[
        "run",
        "collapse-study",
        "--dry-run",
        "--set",
        "learning_rate=0.3",
        "--seeds",
        "4,5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("learning_rate = 0.3"));
    assert!(text.contains("seeds = [4, 5]"));
    assert!(text.contains("# optimizer.learning_rate: override"));
    assert!(text.contains("# task.kind: preset"));
    assert!(text.contains("# batch_size: default"));
}

#[test]
fn collapse_study_writes_one_csv_per_variant_under_out() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("study");
    let o = cpgd(&[
        "run",
        "collapse-study",
        "--seeds",
        "0",
        "--set",
        "steps_per_episode=4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csvs = files_with_ext(&out, "csv");
    assert_eq!(csvs.len(), 10, "{csvs:?}");
    assert!(csvs.contains(&"grpo-noclip.csv".to_string()));
    assert!(out.join("comparison.json").is_file());
    assert!(out.join("config.toml").is_file());
    for line in stdout(&o).lines() {
        assert!(
            Path::new(line).starts_with(&out),
            "artifact outside --out: {line}"
        );
    }
    let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "nothing is written beside --out");

    let cmp: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(cmp["variants"].as_array().map(Vec::len), Some(10), "{cmp}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = cpgd(&[
            "run",
            "weighting-ablation",
            "--seeds",
            "3,7",
            "--set",
            "steps_per_episode=15",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        runs.push(out);
    }
    let names = files_with_ext(&runs[0], "csv");
    assert_eq!(names, files_with_ext(&runs[1], "csv"));
    assert!(!names.is_empty());
    for n in names.iter().chain(["comparison.json".to_string()].iter()) {
        assert_eq!(
            fs::read(runs[0].join(n)).unwrap(),
            fs::read(runs[1].join(n)).unwrap(),
            "{n} differs"
        );
    }
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = cpgd(&[
        "run",
        "train",
        "--set",
        "loss.algorithm=reinforce++",
        "--set",
        "loss.epsilon=inf",
        "--set",
        "steps_per_episode=12",
        "--set",
        "task.kind=copy-sequence",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echoed = fs::read_to_string(first.join("config.toml")).unwrap();
    assert!(echoed.contains("epsilon = inf"), "{echoed}");

    let second = dir.path().join("second");
    let o = cpgd(&[
        "run",
        "train",
        "--config",
        first.join("config.toml").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let without_out = |text: &str| {
        text.lines()
            .filter(|l| !l.starts_with("out = "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let reechoed = fs::read_to_string(second.join("config.toml")).unwrap();
    assert_eq!(without_out(&reechoed), without_out(&echoed));
    assert_eq!(
        fs::read(first.join("reinforce++.csv")).unwrap(),
        fs::read(second.join("reinforce++.csv")).unwrap()
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(second.join("reinforce++.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["loss"]["epsilon"], "inf", "{summary}");
}

#[test]
fn verify_exit_status_matches_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = cpgd(&["verify", "--out", dir.path().to_str().unwrap()]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("verify.json")).unwrap()).unwrap();
    let passed = report["passed"].as_bool().unwrap();
    assert_eq!(o.status.success(), passed);
    if !passed {
        assert_eq!(o.status.code(), Some(1));
    }
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 7);
    assert_eq!(passed, checks.iter().all(|c| c["passed"] == true));
}
