//! The `verify` oracle suite.
//!
//! Each check runs one brute-force verifier from `cpgd_core::oracle` (or a bit-exact
//! identity) and reports pass/fail with its evidence. Errors count as failures.

use std::time::Instant;

use cpgd_core::advantage::{cpgd_weighted_advantage, group_norm, BatchStats};
use cpgd_core::divergence::{drift_term, RatioSample};
use cpgd_core::losses::is_correction_weight;
use cpgd_core::oracle::{
    exact_cpgd_run, kl_gradient_gap, log_grid, loss_gradient_check, mc_estimator_error,
    verify_monotone_improvement, verify_ratio_ordering, ExactProblem, ExactRunConfig, LossInstance,
};
use cpgd_core::rng::{domain, stream};
use cpgd_core::tasks::END;
use cpgd_core::{
    Algorithm, FeatureSpec, LossConfig, PolicyParams, Task, TaskConfig, TaskKind, Weighting,
};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub seconds: f64,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<Check>,
}

fn timed(
    name: &'static str,
    f: impl FnOnce() -> cpgd_core::Result<(bool, serde_json::Value)>,
) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, json!({ "error": e.to_string() })));
    Check {
        name,
        passed,
        seconds: t.elapsed().as_secs_f64(),
        detail,
    }
}

pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-6;

/// Analytic against central-difference gradients for every algorithm.
pub fn gradient_checks(instances: u64) -> Check {
    timed("gradient-checks", || {
        let mut rows = Vec::new();
        let mut passed = true;
        for a in Algorithm::ALL {
            let mut worst = 0.0f64;
            let mut clipped = 0;
            for i in 0..instances {
                let g = loss_gradient_check(a, i, FD_STEP)?;
                worst = worst.max(g.relative_error);
                clipped += g.clipped_tokens;
            }
            passed &= worst < GRADIENT_TOLERANCE;
            rows.push(json!({
                "algorithm": a,
                "instances": instances,
                "max_relative_error": worst,
                "clipped_tokens": clipped,
            }));
        }
        Ok((
            passed,
            json!({ "tolerance": GRADIENT_TOLERANCE, "algorithms": rows }),
        ))
    })
}

fn random_pair(seed: u64) -> cpgd_core::Result<(PolicyParams, PolicyParams)> {
    let spec = FeatureSpec::new(4, 2, 3)?;
    let old = PolicyParams::random(spec, 0.5, 0, &mut stream(seed, &[domain::ORACLE, 2, 0]))?;
    let delta = PolicyParams::random(spec, 0.15, 0, &mut stream(seed, &[domain::ORACLE, 2, 1]))?;
    let mut new = old.clone();
    new.weights_mut().axpy(1.0, delta.weights())?;
    Ok((old, new))
}

/// Enumerated k1/k3 means equal the exact KL; k3 is non-negative and has the smaller variance.
pub fn estimator_checks(pairs: u64) -> Check {
    timed("kl-estimators", || {
        let mut rows = Vec::new();
        let mut passed = true;
        for seed in 0..pairs {
            let (old, new) = random_pair(seed)?;
            let mut rng = stream(seed, &[domain::ORACLE, 2, 2]);
            let r =
                mc_estimator_error(&old, &new, &[2, 3], END, 3, &[10, 100, 1000], 50, &mut rng)?;
            let ok = r.unbiased && r.min_k3_sample >= 0.0 && r.variance_ordered;
            passed &= ok;
            rows.push(json!({
                "seed": seed,
                "exact_kl": r.exact_kl,
                "k1_error": (r.k1_enumerated - r.exact_kl).abs(),
                "k3_error": (r.k3_enumerated - r.exact_kl).abs(),
                "k1_variance": r.k1_variance,
                "k3_variance": r.k3_variance,
                "min_k3_sample": r.min_k3_sample,
                "monte_carlo_converges": r.converges,
                "passed": ok,
            }));
        }
        Ok((passed, json!({ "tolerance": 1e-10, "pairs": rows })))
    })
}

/// Above the cap the drift coefficient is exactly `c`, over ratios spanning [0.1, 100].
pub fn drift_cap_check() -> Check {
    timed("drift-cap", || {
        let mut passed = true;
        let mut capped = 0;
        for c in [0.5, 1.0, 2.0, 5.0] {
            for r in log_grid(0.1, 100.0, 400) {
                let d = drift_term(&RatioSample::new(0.0, r.ln())?, c)?;
                let ok = if r - 1.0 > c {
                    capped += 1;
                    d.grad_coefficient == c
                } else {
                    (d.grad_coefficient - (r - 1.0)).abs() <= 1e-12 && d.grad_coefficient <= c
                };
                passed &= ok;
            }
        }
        Ok((
            passed,
            json!({ "ratios": 400, "caps": [0.5, 1.0, 2.0, 5.0], "capped_points": capped }),
        ))
    })
}

/// One-step ratio ordering on the two-action bandit, all four boundary/sign cases.
pub fn ratio_ordering_check() -> Check {
    timed("ratio-ordering", || {
        let p_olds: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        let report = verify_ratio_ordering(0.2, &log_grid(1e-4, 1e3, 300), &p_olds)?;
        Ok((
            report.passed,
            serde_json::to_value(&report).expect("report serialises"),
        ))
    })
}

/// Exact-update CPGD on an enumerable task obeys the improvement bound at every step.
pub fn improvement_check() -> Check {
    timed("monotone-improvement", || {
        let task = Task::new(TaskConfig {
            kind: TaskKind::Parity,
            ..TaskConfig::default()
        })?;
        let max_len = 3;
        let problem = ExactProblem::new(&task, max_len)?;
        let spec = FeatureSpec::new(task.vocab().size(), 2, 3)?;
        let init = PolicyParams::random(spec, 0.3, 0, &mut stream(1, &[domain::INIT]))?;
        let cfg = ExactRunConfig::default();
        let (policies, gains) = exact_cpgd_run(&problem, &init, &cfg)?;
        let r = verify_monotone_improvement(&problem, &policies, &gains, cfg.alpha, 1e-9)?;
        let passed = r.passed && r.non_decreasing && r.skipped.is_empty() && r.accepted_steps >= 50;
        Ok((
            passed,
            json!({
                "vocab_size": task.vocab().size(),
                "max_len": max_len,
                "alpha": r.alpha,
                "accepted_steps": r.accepted_steps,
                "min_slack": r.min_slack,
                "non_decreasing": r.non_decreasing,
                "skipped": r.skipped,
                "eta_first": r.etas.first(),
                "eta_last": r.etas.last(),
            }),
        ))
    })
}

/// The forward/reverse KL gradient gap shrinks at second order in the ratio deviation.
pub fn kl_gap_check() -> Check {
    timed("kl-gradient-gap", || {
        let (old, _) = random_pair(5)?;
        let dir = PolicyParams::random(old.spec(), 1.0, 0, &mut stream(5, &[domain::ORACLE, 3]))?;
        let r = kl_gradient_gap(
            &old,
            dir.weights(),
            &[2, 3],
            END,
            3,
            &[0.2, 0.1, 0.05, 0.025, 0.0125],
        )?;
        Ok((
            r.passed,
            serde_json::to_value(&r).expect("report serialises"),
        ))
    })
}

fn bit_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// STD weighting ≡ GroupNorm, the cpgd/cpg/pgd/pg lattice, and unit correction weights at M = 1.
pub fn reduction_checks(instances: u64) -> Check {
    timed("reduction-identities", || {
        let mut rng = stream(0, &[domain::ORACLE, 4]);
        let mut std_ok = true;
        for _ in 0..instances {
            let k = rng.random_range(2..=8);
            let rewards: Vec<f64> = (0..k)
                .map(|_| rng.random_range(0..3) as f64 * 0.6)
                .collect();
            let stats = BatchStats::new(4, 2, 4.0)?;
            let w = cpgd_weighted_advantage(&rewards, Weighting::Std, &stats)?;
            std_ok &= bit_equal(&w.values, &group_norm(&rewards)?);
        }

        let mut lattice_ok = true;
        let mut m1_ok = true;
        for i in 0..instances {
            let inst = LossInstance::random(&mut stream(i, &[domain::ORACLE, 5]))?;
            let with = |a: Algorithm, alpha: f64, eps: f64| {
                let mut c = LossConfig::for_algorithm(a);
                c.alpha = alpha;
                c.epsilon = eps;
                inst.loss(&inst.theta, &c)
            };
            let same = |x: &cpgd_core::LossReport, y: &cpgd_core::LossReport| {
                x.loss.to_bits() == y.loss.to_bits()
                    && bit_equal(x.gradient.as_slice(), y.gradient.as_slice())
            };
            let inf = f64::INFINITY;
            let pairs = [
                (
                    with(Algorithm::Cpgd, 0.0, inf)?,
                    with(Algorithm::Pg, 0.0, inf)?,
                ),
                (
                    with(Algorithm::Cpgd, 0.0, 0.2)?,
                    with(Algorithm::Cpg, 0.0, 0.2)?,
                ),
                (
                    with(Algorithm::Cpg, 0.1, inf)?,
                    with(Algorithm::Pg, 0.1, inf)?,
                ),
                (
                    with(Algorithm::Cpgd, 0.1, inf)?,
                    with(Algorithm::Pgd, 0.1, inf)?,
                ),
                (
                    with(Algorithm::Pgd, 0.0, inf)?,
                    with(Algorithm::Pg, 0.0, inf)?,
                ),
            ];
            lattice_ok &= pairs.iter().all(|(x, y)| same(x, y));

            let prev: f64 = rng.random_range(-3.0..0.0);
            let old: f64 = rng.random_range(-3.0..0.0);
            m1_ok &= is_correction_weight(1, prev, old, 0.2) == 1.0;
            let mut single = inst.clone();
            single.epoch = 1;
            for a in [Algorithm::Pg, Algorithm::Cpgd] {
                let r = single.loss(&single.theta, &LossConfig::for_algorithm(a))?;
                m1_ok &= r.mean_is_weight == 1.0;
            }
        }
        Ok((
            std_ok && lattice_ok && m1_ok,
            json!({
                "instances": instances,
                "std_weighting_is_group_norm": std_ok,
                "cpgd_lattice": lattice_ok,
                "single_epoch_unit_weights": m1_ok,
            }),
        ))
    })
}

pub fn run_all() -> VerifyReport {
    let checks = vec![
        gradient_checks(20),
        estimator_checks(10),
        drift_cap_check(),
        ratio_ordering_check(),
        improvement_check(),
        kl_gap_check(),
        reduction_checks(20),
    ];
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}
