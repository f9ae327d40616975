//! Acceptance criteria 1-9, one pass/fail line each.
//!
//! Runs as a plain binary so every criterion is reported even when an earlier one fails.
//! Exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use cpgd_cli::scenario::{find, run_scenario, run_variants, FlagCounts};
use cpgd_cli::verify::{self, Check};
use cpgd_cli::{parse_config, ExperimentConfig};
use cpgd_core::Algorithm;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

fn resolved(scenario: &str, overrides: &[&str]) -> ExperimentConfig {
    let s = find(scenario).expect("scenario is registered");
    let overrides: Vec<String> = overrides.iter().map(|o| o.to_string()).collect();
    parse_config(&s.preset(), None, &overrides).expect("preset resolves")
}

fn from_check(check: &Check, limit_secs: Option<u64>, extra: bool) -> Verdict {
    let fast = limit_secs.is_none_or(|l| check.seconds < l as f64);
    verdict(
        check.passed && fast && extra,
        format!("{:.2}s {}", check.seconds, check.detail),
    )
}

fn gradients() -> Verdict {
    let check = verify::gradient_checks(20);
    let worst = check.detail["algorithms"]
        .as_array()
        .map(|rows| {
            rows.iter()
                .map(|r| r["max_relative_error"].as_f64().unwrap_or(f64::INFINITY))
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::INFINITY);
    let covered =
        check.detail["algorithms"].as_array().map_or(0, |r| r.len()) == Algorithm::ALL.len();
    verdict(
        check.passed && covered && check.seconds < 60.0,
        format!(
            "{} algorithms x 20 instances, worst relative error {worst:.2e} (< {:e}), {:.2}s",
            Algorithm::ALL.len(),
            verify::GRADIENT_TOLERANCE,
            check.seconds
        ),
    )
}

fn estimators() -> Verdict {
    let check = verify::estimator_checks(10);
    let rows = check.detail["pairs"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    let k1 = rows
        .iter()
        .filter_map(|r| r["k1_error"].as_f64())
        .fold(0.0, f64::max);
    let k3 = rows
        .iter()
        .filter_map(|r| r["k3_error"].as_f64())
        .fold(0.0, f64::max);
    let min_k3 = rows
        .iter()
        .filter_map(|r| r["min_k3_sample"].as_f64())
        .fold(f64::INFINITY, f64::min);
    verdict(
        check.passed && rows.len() >= 10,
        format!(
            "{} pairs, max |E[k1]-KL| {k1:.1e}, max |E[k3]-KL| {k3:.1e}, min k3 {min_k3:.2e}, {:.2}s",
            rows.len(),
            check.seconds
        ),
    )
}

fn drift_cap() -> Verdict {
    from_check(&verify::drift_cap_check(), None, true)
}

fn ratio_ordering() -> Verdict {
    let check = verify::ratio_ordering_check();
    let cases = check.detail["cases"].clone();
    verdict(
        check.passed && check.seconds < 10.0,
        format!("{:.2}s cases {cases}", check.seconds),
    )
}

fn improvement() -> Verdict {
    let check = verify::improvement_check();
    let small = check.detail["vocab_size"].as_u64() == Some(4)
        && check.detail["max_len"].as_u64() <= Some(3);
    from_check(&check, Some(60), small)
}

fn tally(
    counts: &BTreeMap<&str, FlagCounts>,
    names: &[&str],
    f: impl Fn(&FlagCounts) -> bool,
) -> bool {
    names.iter().all(|n| counts.get(n).is_some_and(&f))
}

fn collapse_study() -> Verdict {
    let t = Instant::now();
    let cfg = resolved("collapse-study", &[]);
    let seeds = cfg.seeds();
    let variants = find("collapse-study").unwrap().variants(&cfg.train);
    let results = match run_variants(&variants, &seeds) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let elapsed = t.elapsed();
    let counts: BTreeMap<&str, FlagCounts> = results
        .iter()
        .map(|r| (r.variant.name.as_str(), r.flag_counts()))
        .collect();
    let n = seeds.len();
    let most = (4 * n).div_ceil(5);

    let re_unclipped = tally(
        &counts,
        &["rloo", "reinforce++", "grpo", "grpo-noclip"],
        |c| c.ratio_explosion >= most,
    );
    let re_clipped = tally(&counts, &["cpgd", "cpg", "dual-clip", "grpo-drift"], |c| {
        c.ratio_explosion == 0
    });
    let lc_unclipped = tally(&counts, &["pg", "pgd"], |c| c.length_collapse >= most);
    let lc_clipped = tally(&counts, &["cpg", "cpgd"], |c| c.length_collapse == 0);
    let fast = within(elapsed, 600);

    let table = counts
        .iter()
        .map(|(k, c)| {
            format!(
                "{k} RE {}/{n} LC {}/{n}",
                c.ratio_explosion, c.length_collapse
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        n >= 5 && re_unclipped && re_clipped && lc_unclipped && lc_clipped && fast,
        format!(
            "RE unclipped {} | RE clipped {} | LC pg/pgd {} | LC cpg/cpgd {} | {:.1}s | {table}",
            ok(re_unclipped),
            ok(re_clipped),
            ok(lc_unclipped),
            ok(lc_clipped),
            elapsed.as_secs_f64()
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAIL"
    }
}

fn reductions() -> Verdict {
    from_check(&verify::reduction_checks(20), None, true)
}

fn learns_arithmetic() -> Verdict {
    let t = Instant::now();
    let base = resolved("component-ablation", &[]);
    let mut train = base.train.clone();
    train.loss.algorithm = Algorithm::Cpgd;
    let variants = vec![cpgd_cli::scenario::Variant {
        name: "cpgd".into(),
        config: train.clone(),
    }];
    let seeds = base.seeds();
    let vocab = cpgd_core::Task::new(train.task.clone())
        .map(|t| t.vocab().size())
        .unwrap_or(usize::MAX);
    let results = match run_variants(&variants, &seeds) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    let accs: Vec<f64> = results[0]
        .runs
        .iter()
        .map(|r| r.final_eval_accuracy)
        .collect();
    let elapsed = t.elapsed();
    let passed = seeds.len() >= 3
        && vocab <= 16
        && train.total_steps() <= 300
        && accs.iter().all(|&a| a >= 0.9)
        && within(elapsed, 300);
    verdict(
        passed,
        format!(
            "V={vocab}, {} steps, greedy held-out accuracy {:?} (need >= 0.9 on every seed), {:.1}s",
            train.total_steps(),
            accs.iter().map(|a| format!("{a:.3}")).collect::<Vec<_>>(),
            elapsed.as_secs_f64()
        ),
    )
}

fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .expect("output directory")
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&p).expect("readable csv"))
        })
        .collect()
}

fn rerun_is_identical() -> Verdict {
    let scenario = find("component-ablation").unwrap();
    let mut outputs = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let out = format!("run.out='{}'", dir.path().display());
        let cfg = resolved("component-ablation", &["steps_per_episode=60", &out]);
        if let Err(e) = run_scenario(scenario, &cfg) {
            return verdict(false, format!("run failed: {e}"));
        }
        outputs.push(csv_files(dir.path()));
    }
    let same = !outputs[0].is_empty() && outputs[0] == outputs[1];
    let bytes: usize = outputs[0].values().map(|v| v.len()).sum();
    verdict(
        same,
        format!(
            "{} CSV files, {bytes} bytes, identical: {same}",
            outputs[0].len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient checks", gradients),
        ("KL estimators", estimators),
        ("drift cap", drift_cap),
        ("ratio ordering", ratio_ordering),
        ("improvement bound", improvement),
        ("collapse study", collapse_study),
        ("reduction identities", reductions),
        ("arithmetic-sum learning", learns_arithmetic),
        ("deterministic rerun", rerun_is_identical),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        let n = i + 1;
        println!(
            "criterion {n} ({name}): {} {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.passed {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("all 9 criteria pass");
    } else {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
