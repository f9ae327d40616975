//! The sampler against the exact response distribution.

use cpgd_core::oracle::{enumerate_expected_return, monte_carlo_return, EnumeratedPolicy};
use cpgd_core::policy::sample_response;
use cpgd_core::rng::stream;
use cpgd_core::{FeatureSpec, PolicyParams, Task, TaskConfig, TaskKind};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn sampled_responses_follow_the_enumerated_distribution() {
    let spec = FeatureSpec::new(4, 2, 3).unwrap();
    let params = PolicyParams::random(spec, 0.8, 0, &mut stream(11, &[1])).unwrap();
    let prompt = [1, 3];
    let end = 0;
    let exact = EnumeratedPolicy::new(&params, &prompt, end, 3).unwrap();
    let total: f64 = exact.probs.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);

    let n = 40_000;
    let mut counts = vec![0usize; exact.responses.len()];
    let mut rng = stream(12, &[2]);
    for _ in 0..n {
        let y = sample_response(&params, &prompt, end, 3, 1.0, &mut rng).unwrap();
        let i = exact
            .responses
            .binary_search(&y)
            .expect("sampled response is enumerable");
        counts[i] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&exact.probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let df = (counts.len() - 1) as f64;
    let p_value = 1.0 - ChiSquared::new(df).unwrap().cdf(chi2);
    assert!(
        p_value > 1e-3,
        "chi2 {chi2:.1} on {df} dof, p = {p_value:e}"
    );
}

#[test]
fn monte_carlo_return_agrees_with_enumeration() {
    let task = Task::new(TaskConfig {
        kind: TaskKind::Parity,
        ..TaskConfig::default()
    })
    .unwrap();
    let spec = FeatureSpec::new(task.vocab().size(), 2, 3).unwrap();
    let params = PolicyParams::random(spec, 1.0, 0, &mut stream(5, &[3])).unwrap();
    let mut rng = stream(5, &[4]);
    for prompt in task.generate_prompts(4, &mut rng).unwrap() {
        let exact = enumerate_expected_return(&params, &task, &prompt, 3).unwrap();
        let (mean, se) = monte_carlo_return(&params, &task, &prompt, 3, 20_000, &mut rng).unwrap();
        assert!(
            (mean - exact).abs() <= 5.0 * se.max(1e-3),
            "{mean} vs {exact} (se {se})"
        );
    }
}
