//! Named scenario presets and their artifacts.
//!
//! A training scenario is a preset (config layer) plus a list of variants derived from
//! the resolved config. Every variant runs on every seed; runs execute in parallel but
//! artifacts are written in a fixed order, so output bytes depend only on the config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cpgd_core::trainer::CSV_COLUMNS;
use cpgd_core::{
    train, Algorithm, CollapseFlags, MetricsRecord, RunRecord, TrainConfig, Weighting,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;
use toml::Value;

use crate::config::{toml_to_json, ExperimentConfig};
use crate::verify;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{name}`; available: {available}")]
    Unknown { name: String, available: String },
    #[error("run {variant} (seed {seed}) failed: {source}")]
    Run {
        variant: String,
        seed: u64,
        #[source]
        source: cpgd_core::LabError,
    },
    #[error("cannot write `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write metrics: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ScenarioError>;

/// One named training configuration within a scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

impl Variant {
    fn of(
        base: &TrainConfig,
        name: &str,
        algorithm: Algorithm,
        edit: impl FnOnce(&mut TrainConfig),
    ) -> Self {
        let mut config = base.clone();
        config.loss.algorithm = algorithm;
        edit(&mut config);
        Variant {
            name: name.to_string(),
            config,
        }
    }
}

type Preset = fn() -> Vec<(&'static str, Value)>;
type Variants = fn(&TrainConfig) -> Vec<Variant>;

pub enum Kind {
    Training { preset: Preset, variants: Variants },
    Verify,
}

pub struct Scenario {
    pub name: &'static str,
    pub summary: &'static str,
    pub kind: Kind,
}

impl Scenario {
    pub fn preset(&self) -> Vec<(&'static str, Value)> {
        match &self.kind {
            Kind::Training { preset, .. } => preset(),
            Kind::Verify => Vec::new(),
        }
    }

    pub fn variants(&self, base: &TrainConfig) -> Vec<Variant> {
        match &self.kind {
            Kind::Training { variants, .. } => variants(base),
            Kind::Verify => Vec::new(),
        }
    }
}

fn seeds(n: i64) -> Value {
    Value::Array((0..n).map(Value::Integer).collect())
}

/// Arithmetic sums with the adaptive optimiser; the shared base of the ablations.
pub fn default_preset() -> Vec<(&'static str, Value)> {
    vec![
        ("task.kind", Value::String("arithmetic-sum".into())),
        ("optimizer.kind", Value::String("adam".into())),
        ("optimizer.learning_rate", Value::Float(0.05)),
        ("run.seeds", seeds(3)),
    ]
}

/// Elevated learning rate and many off-policy updates per batch on a two-symbol copy task,
/// where the format bonus alone is an easy target.
pub fn adversarial_preset() -> Vec<(&'static str, Value)> {
    vec![
        ("task.kind", Value::String("copy-sequence".into())),
        ("task.alphabet", Value::Integer(2)),
        ("task.f_bonus", Value::Float(0.2)),
        ("optimizer.kind", Value::String("sgd".into())),
        ("optimizer.learning_rate", Value::Float(1.0)),
        ("loss.ppo_epochs", Value::Integer(8)),
        ("minibatches", Value::Integer(8)),
        ("run.seeds", seeds(5)),
    ]
}

fn no_preset() -> Vec<(&'static str, Value)> {
    Vec::new()
}

fn collapse_variants(base: &TrainConfig) -> Vec<Variant> {
    use Algorithm::*;
    vec![
        Variant::of(base, "rloo", Rloo, |_| {}),
        Variant::of(base, "reinforce++", ReinforcePp, |_| {}),
        Variant::of(base, "grpo", Grpo, |_| {}),
        Variant::of(base, "grpo-noclip", Grpo, |c| {
            c.loss.epsilon = f64::INFINITY
        }),
        Variant::of(base, "dual-clip", DualClip, |_| {}),
        Variant::of(base, "grpo-drift", GrpoDrift, |_| {}),
        Variant::of(base, "pg", Pg, |_| {}),
        Variant::of(base, "cpg", Cpg, |_| {}),
        Variant::of(base, "pgd", Pgd, |_| {}),
        Variant::of(base, "cpgd", Cpgd, |_| {}),
    ]
}

fn component_variants(base: &TrainConfig) -> Vec<Variant> {
    [
        Algorithm::Pg,
        Algorithm::Pgd,
        Algorithm::Cpg,
        Algorithm::Cpgd,
    ]
    .into_iter()
    .map(|a| Variant::of(base, a.name(), a, |_| {}))
    .collect()
}

fn weighting_variants(base: &TrainConfig) -> Vec<Variant> {
    Weighting::ALL
        .into_iter()
        .map(|w| Variant::of(base, w.name(), Algorithm::Cpgd, |c| c.loss.weighting = w))
        .collect()
}

/// β from the config when it is positive, else 0.1.
fn reference_variants(base: &TrainConfig) -> Vec<Variant> {
    let beta = if base.loss.beta > 0.0 {
        base.loss.beta
    } else {
        0.1
    };
    let mut out = Vec::new();
    for a in [Algorithm::Cpgd, Algorithm::Grpo] {
        out.push(Variant::of(base, &format!("{a}-beta-off"), a, |c| {
            c.loss.beta = 0.0
        }));
        out.push(Variant::of(base, &format!("{a}-beta-on"), a, |c| {
            c.loss.beta = beta
        }));
    }
    out
}

fn single_variant(base: &TrainConfig) -> Vec<Variant> {
    vec![Variant {
        name: base.loss.algorithm.name().to_string(),
        config: base.clone(),
    }]
}

pub const SCENARIOS: &[Scenario] = &[
    Scenario {
        name: "collapse-study",
        summary: "ten algorithm variants under the adversarial preset",
        kind: Kind::Training {
            preset: adversarial_preset,
            variants: collapse_variants,
        },
    },
    Scenario {
        name: "component-ablation",
        summary: "pg, pgd, cpg and cpgd under the default preset",
        kind: Kind::Training {
            preset: default_preset,
            variants: component_variants,
        },
    },
    Scenario {
        name: "weighting-ablation",
        summary: "cpgd with unprocessed, equal, std and clip-filter advantages",
        kind: Kind::Training {
            preset: default_preset,
            variants: weighting_variants,
        },
    },
    Scenario {
        name: "reference-ablation",
        summary: "cpgd and grpo with the reference penalty off and on",
        kind: Kind::Training {
            preset: default_preset,
            variants: reference_variants,
        },
    },
    Scenario {
        name: "train",
        summary: "one run of the configuration exactly as given",
        kind: Kind::Training {
            preset: no_preset,
            variants: single_variant,
        },
    },
    Scenario {
        name: "verify",
        summary: "oracle suite: gradient checks, ratio ordering, improvement bound, estimators",
        kind: Kind::Verify,
    },
];

pub fn find(name: &str) -> Result<&'static Scenario> {
    SCENARIOS
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| ScenarioError::Unknown {
            name: name.to_string(),
            available: SCENARIOS
                .iter()
                .map(|s| s.name)
                .collect::<Vec<_>>()
                .join(", "),
        })
}

/// All runs of one variant, in seed order.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
}

impl VariantResult {
    /// Seeds on which each flag was raised.
    pub fn flag_counts(&self) -> FlagCounts {
        let count =
            |f: fn(&CollapseFlags) -> bool| self.runs.iter().filter(|r| f(&r.flags)).count();
        FlagCounts {
            ratio_explosion: count(|f| f.ratio_explosion.is_some()),
            length_collapse: count(|f| f.length_collapse.is_some()),
            accuracy_crash: count(|f| f.accuracy_crash.is_some()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FlagCounts {
    pub ratio_explosion: usize,
    pub length_collapse: usize,
    pub accuracy_crash: usize,
}

/// Trains every variant on every seed.
pub fn run_variants(variants: &[Variant], seeds: &[u64]) -> Result<Vec<VariantResult>> {
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let mut records = jobs
        .par_iter()
        .map(|&(v, seed)| {
            let cfg = TrainConfig {
                seed,
                ..variants[v].config.clone()
            };
            train(cfg).map_err(|source| ScenarioError::Run {
                variant: variants[v].name.clone(),
                seed,
                source,
            })
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    Ok(variants
        .iter()
        .map(|v| VariantResult {
            variant: v.clone(),
            seeds: seeds.to_vec(),
            runs: records.by_ref().take(seeds.len()).collect(),
        })
        .collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(io_err(path))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("JSON values serialise");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Metrics of all seeds, one row per (seed, step): `seed` followed by the fixed columns.
pub fn variant_csv(result: &VariantResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("seed").chain(CSV_COLUMNS))?;
    for (seed, run) in result.seeds.iter().zip(&result.runs) {
        for m in &run.history {
            let row = m.csv_row();
            w.write_record(std::iter::once(seed.to_string()).chain(row))?;
        }
    }
    w.into_inner()
        .map_err(|e| ScenarioError::Csv(e.into_error().into()))
}

fn finite(x: f64) -> serde_json::Value {
    if x.is_finite() {
        json!(x)
    } else {
        json!(x.to_string())
    }
}

fn metrics_json(m: &MetricsRecord) -> serde_json::Value {
    json!({
        "step": m.step,
        "accuracy": finite(m.accuracy),
        "clip_fraction": finite(m.clip_fraction),
        "mean_ratio": finite(m.mean_ratio),
        "max_ratio": finite(m.max_ratio),
        "mean_length": finite(m.mean_length),
        "loss": finite(m.loss),
        "drift_value": finite(m.drift_value),
        "grad_norm": finite(m.grad_norm),
        "format_rate": finite(m.format_rate),
        "mean_reward": finite(m.mean_reward),
    })
}

fn run_json(seed: u64, run: &RunRecord) -> serde_json::Value {
    let peak = run.history.iter().map(|m| m.max_ratio).fold(0.0, f64::max);
    json!({
        "seed": seed,
        "flags": run.flags,
        "final_eval_accuracy": finite(run.final_eval_accuracy),
        "peak_max_ratio": finite(peak),
        "steps": run.history.len(),
        "final_metrics": run.history.last().map(metrics_json),
        "aborted": run.aborted.as_ref().map(|a| json!({
            "step": a.step,
            "max_ratio": finite(a.max_ratio),
            "message": a.message,
        })),
    })
}

fn config_json(cfg: &TrainConfig) -> serde_json::Value {
    toml_to_json(&Value::try_from(cfg).expect("config serialises"))
}

/// Summary of one variant: resolved config echo plus per-seed outcomes.
pub fn variant_summary(scenario: &str, result: &VariantResult) -> serde_json::Value {
    json!({
        "scenario": scenario,
        "variant": result.variant.name,
        "config": config_json(&result.variant.config),
        "runs": result
            .seeds
            .iter()
            .zip(&result.runs)
            .map(|(&s, r)| run_json(s, r))
            .collect::<Vec<_>>(),
    })
}

pub fn comparison(scenario: &str, seeds: &[u64], results: &[VariantResult]) -> serde_json::Value {
    let variants: Vec<_> = results
        .iter()
        .map(|r| {
            let evals: Vec<f64> = r.runs.iter().map(|x| x.final_eval_accuracy).collect();
            let mean = evals.iter().sum::<f64>() / evals.len().max(1) as f64;
            json!({
                "name": r.variant.name,
                "algorithm": r.variant.config.loss.algorithm,
                "flag_counts": r.flag_counts(),
                "flags": r.runs.iter().map(|x| x.flags).collect::<Vec<_>>(),
                "final_eval_accuracy": evals.iter().map(|&a| finite(a)).collect::<Vec<_>>(),
                "mean_final_eval_accuracy": finite(mean),
            })
        })
        .collect();
    json!({ "scenario": scenario, "seeds": seeds, "variants": variants })
}

/// Result of running a scenario.
#[derive(Debug)]
pub struct Outcome {
    pub artifacts: Vec<PathBuf>,
    pub passed: bool,
    pub report: serde_json::Value,
}

/// Runs a scenario under a resolved config and writes its artifacts into `run.out`.
pub fn run_scenario(scenario: &Scenario, cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cfg.run.out;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut artifacts = Vec::new();
    match &scenario.kind {
        Kind::Verify => {
            let report = verify::run_all();
            let path = out.join("verify.json");
            let value = serde_json::to_value(&report).expect("report serialises");
            write_json(&path, &value)?;
            artifacts.push(path);
            Ok(Outcome {
                artifacts,
                passed: report.passed,
                report: value,
            })
        }
        Kind::Training { .. } => {
            let seeds = cfg.seeds();
            let variants = scenario.variants(&cfg.train);
            let config_path = out.join("config.toml");
            write_file(&config_path, cfg.to_toml().as_bytes())?;
            artifacts.push(config_path);
            let results = run_variants(&variants, &seeds)?;
            for r in &results {
                let csv_path = out.join(format!("{}.csv", r.variant.name));
                write_file(&csv_path, &variant_csv(r)?)?;
                let json_path = out.join(format!("{}.json", r.variant.name));
                write_json(&json_path, &variant_summary(scenario.name, r))?;
                if cfg.run.verbose {
                    for (s, run) in seeds.iter().zip(&r.runs) {
                        eprintln!(
                            "{} seed {s}: eval {:.3} flags {:?}",
                            r.variant.name, run.final_eval_accuracy, run.flags
                        );
                    }
                }
                artifacts.extend([csv_path, json_path]);
            }
            let report = comparison(scenario.name, &seeds, &results);
            let cmp_path = out.join("comparison.json");
            write_json(&cmp_path, &report)?;
            artifacts.push(cmp_path);
            Ok(Outcome {
                artifacts,
                passed: true,
                report,
            })
        }
    }
}
