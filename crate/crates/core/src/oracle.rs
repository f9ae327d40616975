//! Brute-force verifiers.
//!
//! Nothing here shares code paths with the losses beyond the policy's
//! log-probabilities: gradients are checked by central differences, and
//! expectations are computed by enumerating every response the sampler can
//! produce (END-terminated, or truncated at the length limit).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::divergence::{exact_kl, k1_estimate, k3_estimate, RatioSample};
use crate::error::{LabError, Result};
use crate::losses::{
    batch_loss, compute_advantages, Algorithm, LossConfig, LossOptions, LossReport, RolloutGroup,
};
use crate::matrix::Matrix;
use crate::policy::{sample_response, token_logprobs, Context, FeatureSpec, PolicyParams, TokenId};
use crate::rng::{domain, stream, LabRng};
use crate::tasks::{RewardBreakdown, Task};

pub const FD_PARAM_BUDGET: usize = 2000;
pub const ENUMERATION_BUDGET: f64 = 1e6;

/// Central differences of `f` at `x`.
pub fn finite_diff<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(LabError::InvalidInput(format!(
            "step h must be > 0, got {h}"
        )));
    }
    if x.len() > FD_PARAM_BUDGET {
        return Err(LabError::BudgetExceeded {
            required: x.len() as f64,
            budget: FD_PARAM_BUDGET as f64,
        });
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        probe[j] = x[j] + h;
        let up = f(&probe)?;
        probe[j] = x[j] - h;
        let down = f(&probe)?;
        probe[j] = x[j];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Central-difference gradient of a scalar function of the policy weights.
pub fn finite_diff_grad<F>(f: F, params: &PolicyParams, h: f64) -> Result<Matrix>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let w = params.weights();
    let g = finite_diff(
        |x| {
            let m = Matrix::from_vec(w.rows(), w.cols(), x.to_vec())?;
            f(&PolicyParams::from_weights(
                params.spec(),
                params.seed(),
                m,
            )?)
        },
        w.as_slice(),
        h,
    )?;
    Matrix::from_vec(w.rows(), w.cols(), g)
}

/// `max |a − b| / max(‖a‖∞, ‖b‖∞)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Every response the sampler can emit: END-terminated of length ≤ L, or exactly L tokens without END.
pub fn enumerate_responses(
    vocab_size: usize,
    end: TokenId,
    max_len: usize,
    budget: f64,
) -> Result<Vec<Vec<TokenId>>> {
    let required = (vocab_size as f64).powi(max_len as i32);
    if required > budget {
        return Err(LabError::BudgetExceeded { required, budget });
    }
    if max_len == 0 || end >= vocab_size {
        return Err(LabError::InvalidInput(format!(
            "enumeration needs max_len >= 1 and END < V (got {max_len}, {end})"
        )));
    }
    let mut out = Vec::new();
    let mut stack: Vec<Vec<TokenId>> = vec![Vec::new()];
    while let Some(prefix) = stack.pop() {
        for t in (0..vocab_size).rev() {
            let mut y = prefix.clone();
            y.push(t);
            if t == end || y.len() == max_len {
                out.push(y);
            } else {
                stack.push(y);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Exact response distribution of a policy for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumeratedPolicy {
    pub prompt: Vec<TokenId>,
    pub max_len: usize,
    pub responses: Vec<Vec<TokenId>>,
    pub logprobs: Vec<f64>,
    pub probs: Vec<f64>,
}

impl EnumeratedPolicy {
    pub fn new(
        params: &PolicyParams,
        prompt: &[TokenId],
        end: TokenId,
        max_len: usize,
    ) -> Result<Self> {
        let responses = enumerate_responses(params.vocab_size(), end, max_len, ENUMERATION_BUDGET)?;
        Self::over(params, prompt, max_len, responses)
    }

    /// Distribution over a fixed response set (shared between policies being compared).
    pub fn over(
        params: &PolicyParams,
        prompt: &[TokenId],
        max_len: usize,
        responses: Vec<Vec<TokenId>>,
    ) -> Result<Self> {
        let mut logprobs = Vec::with_capacity(responses.len());
        for y in &responses {
            let mut lp = 0.0;
            for i in 0..y.len() {
                lp += params.evaluate(&Context::new(prompt, &y[..i]))?.logprobs[y[i]];
            }
            logprobs.push(lp);
        }
        let probs = logprobs.iter().map(|l| l.exp()).collect();
        Ok(Self {
            prompt: prompt.to_vec(),
            max_len,
            responses,
            logprobs,
            probs,
        })
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn expectation<F: Fn(&[TokenId]) -> f64>(&self, f: F) -> f64 {
        self.responses
            .iter()
            .zip(&self.probs)
            .map(|(y, p)| p * f(y))
            .sum()
    }

    /// Gradient of `E_{y∼π}[f(y)]` with respect to the weights, by the score identity.
    pub fn expectation_grad<F: Fn(&[TokenId]) -> f64>(
        &self,
        params: &PolicyParams,
        f: F,
    ) -> Result<Matrix> {
        let mut g = params.zeros_like();
        for (y, p) in self.responses.iter().zip(&self.probs) {
            let v = p * f(y);
            if v != 0.0 {
                crate::policy::grad_logprob_sequence(params, &self.prompt, y, v, &mut g)?;
            }
        }
        Ok(g)
    }
}

/// `η = Σ_y π(y|x) ℛ_o(x, y)` over all responses up to length `max_len`.
pub fn enumerate_expected_return(
    params: &PolicyParams,
    task: &Task,
    prompt: &[TokenId],
    max_len: usize,
) -> Result<f64> {
    let e = EnumeratedPolicy::new(params, prompt, task.vocab().end(), max_len)?;
    Ok(e.expectation(|y| task.outcome_reward(prompt, y)))
}

/// Monte Carlo estimate of the expected outcome reward and its standard error.
pub fn monte_carlo_return(
    params: &PolicyParams,
    task: &Task,
    prompt: &[TokenId],
    max_len: usize,
    samples: usize,
    rng: &mut LabRng,
) -> Result<(f64, f64)> {
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..samples {
        let y = sample_response(params, prompt, task.vocab().end(), max_len, 1.0, rng)?;
        let r = task.outcome_reward(prompt, &y);
        sum += r;
        sq += r * r;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

// ---------------------------------------------------------------------------
// Ratio ordering on a two-action softmax bandit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundarySide {
    Upper,
    Lower,
}

/// Which objective generates the one-step update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BanditForm {
    /// Gradient of the single tracked action's term alone.
    PerSample,
    /// Gradient of the expectation over both actions under π_old, clip applied per action.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioOrderingCase {
    pub side: BoundarySide,
    pub advantage_positive: bool,
    pub form: BanditForm,
    /// π_old of the tracked action for which the widest range was found.
    pub best_p_old: Option<f64>,
    /// Smallest and largest grid η at which the ordering held.
    pub eta_min: Option<f64>,
    pub eta_max: Option<f64>,
    /// Grid points (over η and π_old) at which the ordering held.
    pub holding_points: usize,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioOrderingReport {
    pub epsilon: f64,
    pub cases: Vec<RatioOrderingCase>,
    /// At η = 0 both ratios stay on the boundary.
    pub zero_step_is_degenerate: bool,
    /// Every case holds for the expected-objective form.
    pub passed: bool,
}

/// Ratios `(r_PPO, r_CPG)` of the tracked action 0 after one ascent step of size `eta`.
pub fn ratio_ordering_step(
    p_old: f64,
    r0: f64,
    advantage_positive: bool,
    eps: f64,
    eta: f64,
    form: BanditForm,
) -> (f64, f64) {
    let old = [p_old, 1.0 - p_old];
    let p0 = r0 * p_old;
    let pi = [p0, 1.0 - p0];
    let reward = if advantage_positive {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let baseline = old[0] * reward[0] + old[1] * reward[1];
    let adv = [reward[0] - baseline, reward[1] - baseline];
    let ratio = [pi[0] / old[0], pi[1] / old[1]];
    // ∇_z ln π(a) = e_a − π
    let score = |a: usize| -> [f64; 2] {
        let mut s = [-pi[0], -pi[1]];
        s[a] += 1.0;
        s
    };
    let actions: &[usize] = match form {
        BanditForm::PerSample => &[0],
        BanditForm::Expected => &[0, 1],
    };
    let weight = |a: usize| match form {
        BanditForm::PerSample => 1.0,
        BanditForm::Expected => old[a],
    };
    let mut g_ppo = [0.0; 2];
    let mut g_cpg = [0.0; 2];
    for &a in actions {
        let s = score(a);
        let (lo, hi) = (1.0 - eps, 1.0 + eps);
        // the tracked action sits exactly on the boundary, where the unclipped branch is taken
        let boundary = a == 0;
        let ppo_clipped =
            !boundary && ((adv[a] > 0.0 && ratio[a] > hi) || (adv[a] < 0.0 && ratio[a] < lo));
        let cpg_clipped = !boundary
            && ((adv[a] > 0.0 && ratio[a].ln() > hi.ln())
                || (adv[a] < 0.0 && ratio[a].ln() < lo.ln()));
        for c in 0..2 {
            if !ppo_clipped {
                g_ppo[c] += weight(a) * adv[a] * ratio[a] * s[c];
            }
            if !cpg_clipped {
                g_cpg[c] += weight(a) * adv[a] * s[c];
            }
        }
    }
    let z0 = [p0.ln(), (1.0 - p0).ln()];
    let after = |g: [f64; 2]| {
        let z = [z0[0] + eta * g[0], z0[1] + eta * g[1]];
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        e[0] / (e[0] + e[1]) / p_old
    };
    (after(g_ppo), after(g_cpg))
}

/// Scans learning rates (and π_old of the tracked action) for the four boundary/sign cases.
pub fn verify_ratio_ordering(
    eps: f64,
    etas: &[f64],
    p_olds: &[f64],
) -> Result<RatioOrderingReport> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(LabError::InvalidInput(format!(
            "epsilon must lie in (0, 1), got {eps}"
        )));
    }
    let mut cases = Vec::new();
    for form in [BanditForm::Expected, BanditForm::PerSample] {
        for side in [BoundarySide::Upper, BoundarySide::Lower] {
            for advantage_positive in [true, false] {
                let r0 = match side {
                    BoundarySide::Upper => 1.0 + eps,
                    BoundarySide::Lower => 1.0 - eps,
                };
                let mut best: Option<(f64, f64, f64, usize)> = None;
                let mut total = 0;
                for &p in p_olds {
                    if !(p > 0.0 && r0 * p < 1.0) {
                        continue;
                    }
                    let hits: Vec<f64> = etas
                        .iter()
                        .copied()
                        .filter(|&eta| {
                            let (ppo, cpg) =
                                ratio_ordering_step(p, r0, advantage_positive, eps, eta, form);
                            (ppo - 1.0).abs() > (cpg - 1.0).abs() && (cpg - 1.0).abs() > eps
                        })
                        .collect();
                    total += hits.len();
                    if let (Some(&lo), Some(&hi)) = (hits.first(), hits.last()) {
                        if best.is_none_or(|b| hits.len() > b.3) {
                            best = Some((p, lo, hi, hits.len()));
                        }
                    }
                }
                cases.push(RatioOrderingCase {
                    side,
                    advantage_positive,
                    form,
                    best_p_old: best.map(|b| b.0),
                    eta_min: best.map(|b| b.1),
                    eta_max: best.map(|b| b.2),
                    holding_points: total,
                    holds: best.is_some(),
                });
            }
        }
    }
    let zero_step_is_degenerate = [1.0 + eps, 1.0 - eps].iter().all(|&r0| {
        let (a, b) = ratio_ordering_step(0.4, r0, true, eps, 0.0, BanditForm::Expected);
        (a - r0).abs() < 1e-12 && (b - r0).abs() < 1e-12
    });
    let passed = cases
        .iter()
        .filter(|c| c.form == BanditForm::Expected)
        .all(|c| c.holds);
    Ok(RatioOrderingReport {
        epsilon: eps,
        cases,
        zero_step_is_degenerate,
        passed,
    })
}

/// Log-spaced grid `[lo, hi]` with `n` points.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

// ---------------------------------------------------------------------------
// Exact-update monotone improvement

/// A task with every prompt enumerated, weighted uniformly.
pub struct ExactProblem<'a> {
    pub task: &'a Task,
    pub prompts: Vec<Vec<TokenId>>,
    pub max_len: usize,
    responses: Vec<Vec<TokenId>>,
    rewards: Vec<Vec<f64>>,
}

impl<'a> ExactProblem<'a> {
    pub fn new(task: &'a Task, max_len: usize) -> Result<Self> {
        let prompts = task.all_prompts();
        let responses = enumerate_responses(
            task.vocab().size(),
            task.vocab().end(),
            max_len,
            ENUMERATION_BUDGET,
        )?;
        let rewards = prompts
            .iter()
            .map(|x| {
                responses
                    .iter()
                    .map(|y| task.outcome_reward(x, y))
                    .collect()
            })
            .collect();
        Ok(Self {
            task,
            prompts,
            max_len,
            responses,
            rewards,
        })
    }

    pub fn distributions(&self, params: &PolicyParams) -> Result<Vec<EnumeratedPolicy>> {
        self.prompts
            .iter()
            .map(|x| EnumeratedPolicy::over(params, x, self.max_len, self.responses.clone()))
            .collect()
    }

    /// Exact expected outcome reward over the uniform prompt distribution.
    pub fn expected_return(&self, dists: &[EnumeratedPolicy]) -> f64 {
        let n = self.prompts.len() as f64;
        dists
            .iter()
            .zip(&self.rewards)
            .map(|(d, r)| d.probs.iter().zip(r).map(|(p, r)| p * r).sum::<f64>())
            .sum::<f64>()
            / n
    }

    /// `E_x ‖π(·|x) − π'(·|x)‖₁²`.
    pub fn mean_sq_l1(&self, a: &[EnumeratedPolicy], b: &[EnumeratedPolicy]) -> f64 {
        let n = self.prompts.len() as f64;
        a.iter()
            .zip(b)
            .map(|(p, q)| {
                let l1: f64 = p
                    .probs
                    .iter()
                    .zip(&q.probs)
                    .map(|(x, y)| (x - y).abs())
                    .sum();
                l1 * l1
            })
            .sum::<f64>()
            / n
    }

    /// `E_x KL(π(·|x) ‖ π'(·|x))`.
    pub fn mean_kl(&self, a: &[EnumeratedPolicy], b: &[EnumeratedPolicy]) -> Result<f64> {
        let n = self.prompts.len() as f64;
        let mut s = 0.0;
        for (p, q) in a.iter().zip(b) {
            s += exact_kl(&p.probs, &q.probs)?;
        }
        Ok(s / n)
    }

    /// Baseline-free clipped surrogate `E_x E_{y∼π_k}[min(d·R, clip(d)·R)] − α E_x KL(π_k ‖ π_θ)`
    /// with `d = ln π_θ(y|x) − ln π_k(y|x)`, and its gradient.
    pub fn surrogate(
        &self,
        params: &PolicyParams,
        anchor: &[EnumeratedPolicy],
        alpha: f64,
        eps: f64,
    ) -> Result<(f64, Matrix)> {
        let (lo, hi) = crate::losses::log_clip_bounds(eps);
        let n = self.prompts.len() as f64;
        let mut value = 0.0;
        let mut grad = params.zeros_like();
        for ((x, k), r) in self.prompts.iter().zip(anchor).zip(&self.rewards) {
            for (j, y) in self.responses.iter().enumerate() {
                let pk = k.probs[j];
                if pk == 0.0 {
                    continue;
                }
                let mut lp = 0.0;
                for i in 0..y.len() {
                    lp += params.evaluate(&Context::new(x, &y[..i]))?.logprobs[y[i]];
                }
                let d = lp - k.logprobs[j];
                let rj = r[j];
                let phi = (d * rj).min(d.clamp(lo, hi) * rj);
                // −α KL(π_k ‖ π_θ) = α E_k[d]
                value += pk * (phi + alpha * d) / n;
                let clipped = (rj > 0.0 && d > hi) || (rj < 0.0 && d < lo);
                let coef = pk * (if clipped { 0.0 } else { rj } + alpha) / n;
                if coef != 0.0 {
                    crate::policy::grad_logprob_sequence(params, x, y, coef, &mut grad)?;
                }
            }
        }
        Ok((value, grad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementStep {
    pub k: usize,
    pub eta_before: f64,
    pub eta_after: f64,
    pub sq_l1: f64,
    pub kl: f64,
    pub bound: f64,
    pub surrogate_gain: f64,
    pub precondition_met: bool,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneReport {
    pub alpha: f64,
    pub accepted_steps: usize,
    pub steps: Vec<ImprovementStep>,
    pub etas: Vec<f64>,
    pub non_decreasing: bool,
    /// Steps whose surrogate-improvement precondition failed (assertion skipped).
    pub skipped: Vec<usize>,
    pub min_slack: f64,
    pub passed: bool,
}

/// Checks `η_{k+1} − η_k ≥ (α/2)·E_x‖π_{k+1} − π_k‖₁²` along a policy sequence.
///
/// `surrogate_gains[k]` is `𝓛(θ_{k+1}; θ_k) − 𝓛(θ_k; θ_k)`.
pub fn verify_monotone_improvement(
    problem: &ExactProblem<'_>,
    policies: &[PolicyParams],
    surrogate_gains: &[f64],
    alpha: f64,
    tol: f64,
) -> Result<MonotoneReport> {
    if policies.len() != surrogate_gains.len() + 1 {
        return Err(LabError::Shape(format!(
            "{} policies need {} surrogate gains, got {}",
            policies.len(),
            policies.len().saturating_sub(1),
            surrogate_gains.len()
        )));
    }
    let dists = policies
        .iter()
        .map(|p| problem.distributions(p))
        .collect::<Result<Vec<_>>>()?;
    let etas: Vec<f64> = dists.iter().map(|d| problem.expected_return(d)).collect();
    let mut steps = Vec::new();
    let mut skipped = Vec::new();
    let mut min_slack = f64::INFINITY;
    for k in 0..surrogate_gains.len() {
        let sq_l1 = problem.mean_sq_l1(&dists[k + 1], &dists[k]);
        let kl = problem.mean_kl(&dists[k], &dists[k + 1])?;
        let bound = 0.5 * alpha * sq_l1;
        let gain = etas[k + 1] - etas[k];
        let precondition_met = surrogate_gains[k] >= 0.0;
        let holds = gain >= bound - tol;
        if precondition_met {
            min_slack = min_slack.min(gain - bound);
        } else {
            skipped.push(k);
        }
        steps.push(ImprovementStep {
            k,
            eta_before: etas[k],
            eta_after: etas[k + 1],
            sq_l1,
            kl,
            bound,
            surrogate_gain: surrogate_gains[k],
            precondition_met,
            holds,
        });
    }
    let non_decreasing = steps
        .iter()
        .filter(|s| s.precondition_met)
        .all(|s| s.eta_after >= s.eta_before - tol);
    let passed = non_decreasing && steps.iter().filter(|s| s.precondition_met).all(|s| s.holds);
    Ok(MonotoneReport {
        alpha,
        accepted_steps: steps.iter().filter(|s| s.precondition_met).count(),
        steps,
        etas,
        non_decreasing,
        skipped,
        min_slack: if min_slack.is_finite() {
            min_slack
        } else {
            0.0
        },
        passed,
    })
}

/// Settings of an exact-update CPGD run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactRunConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    /// Gradient-ascent steps on the surrogate per outer iteration.
    pub inner_steps: usize,
    pub accepted_steps: usize,
    pub max_iterations: usize,
}

impl Default for ExactRunConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            epsilon: 0.2,
            learning_rate: 2.0,
            inner_steps: 4,
            accepted_steps: 50,
            max_iterations: 200,
        }
    }
}

/// Runs CPGD with exact expectations: each outer step ascends the surrogate anchored at
/// the current policy with backtracking, and is accepted only if the surrogate improved.
pub fn exact_cpgd_run(
    problem: &ExactProblem<'_>,
    init: &PolicyParams,
    cfg: &ExactRunConfig,
) -> Result<(Vec<PolicyParams>, Vec<f64>)> {
    let mut policies = vec![init.clone()];
    let mut gains = Vec::new();
    let mut current = init.clone();
    for _ in 0..cfg.max_iterations {
        if gains.len() >= cfg.accepted_steps {
            break;
        }
        let anchor = problem.distributions(&current)?;
        let (base, _) = problem.surrogate(&current, &anchor, cfg.alpha, cfg.epsilon)?;
        let mut theta = current.clone();
        let mut value = base;
        for _ in 0..cfg.inner_steps {
            let (_, grad) = problem.surrogate(&theta, &anchor, cfg.alpha, cfg.epsilon)?;
            let mut lr = cfg.learning_rate;
            let mut improved = None;
            for _ in 0..40 {
                let mut cand = theta.clone();
                cand.weights_mut().axpy(lr, &grad)?;
                let (v, _) = problem.surrogate(&cand, &anchor, cfg.alpha, cfg.epsilon)?;
                if v > value {
                    improved = Some((cand, v));
                    break;
                }
                lr *= 0.5;
            }
            match improved {
                Some((cand, v)) => {
                    theta = cand;
                    value = v;
                }
                None => break,
            }
        }
        if value > base {
            gains.push(value - base);
            policies.push(theta.clone());
            current = theta;
        } else {
            break;
        }
    }
    Ok((policies, gains))
}

// ---------------------------------------------------------------------------
// KL estimators

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub samples: usize,
    pub k1_mean: f64,
    pub k1_std: f64,
    pub k3_mean: f64,
    pub k3_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub exact_kl: f64,
    pub k1_enumerated: f64,
    pub k3_enumerated: f64,
    pub k1_variance: f64,
    pub k3_variance: f64,
    pub min_k3_sample: f64,
    pub rows: Vec<EstimatorRow>,
    pub unbiased: bool,
    pub variance_ordered: bool,
    pub converges: bool,
}

/// Sequence-level k1/k3 estimators of KL(π_old ‖ π_new) against the exact value.
#[allow(clippy::too_many_arguments)]
pub fn mc_estimator_error(
    old: &PolicyParams,
    new: &PolicyParams,
    prompt: &[TokenId],
    end: TokenId,
    max_len: usize,
    sample_counts: &[usize],
    repeats: usize,
    rng: &mut LabRng,
) -> Result<EstimatorReport> {
    let eo = EnumeratedPolicy::new(old, prompt, end, max_len)?;
    let en = EnumeratedPolicy::over(new, prompt, max_len, eo.responses.clone())?;
    let kl = exact_kl(&eo.probs, &en.probs)?;
    let samples: Vec<RatioSample> = eo
        .logprobs
        .iter()
        .zip(&en.logprobs)
        .map(|(&o, &n)| RatioSample::new(o, n))
        .collect::<Result<_>>()?;
    let moments = |f: &dyn Fn(&RatioSample) -> f64| {
        let m: f64 = samples.iter().zip(&eo.probs).map(|(s, p)| p * f(s)).sum();
        let m2: f64 = samples
            .iter()
            .zip(&eo.probs)
            .map(|(s, p)| p * f(s) * f(s))
            .sum();
        (m, m2 - m * m)
    };
    let (k1m, k1v) = moments(&k1_estimate);
    let (k3m, k3v) = moments(&k3_estimate);
    let min_k3 = samples
        .iter()
        .map(k3_estimate)
        .fold(f64::INFINITY, f64::min);

    let mut rows = Vec::new();
    let mut cdf = Vec::with_capacity(eo.probs.len());
    let mut acc = 0.0;
    for p in &eo.probs {
        acc += p;
        cdf.push(acc);
    }
    for &n in sample_counts {
        let mut k1s = Vec::with_capacity(repeats);
        let mut k3s = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let (mut a, mut b) = (0.0, 0.0);
            for _ in 0..n {
                let u: f64 = rng.random::<f64>() * acc;
                let j = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                a += k1_estimate(&samples[j]);
                b += k3_estimate(&samples[j]);
            }
            k1s.push(a / n as f64);
            k3s.push(b / n as f64);
        }
        let (m1, s1) = crate::advantage::mean_std(&k1s);
        let (m3, s3) = crate::advantage::mean_std(&k3s);
        rows.push(EstimatorRow {
            samples: n,
            k1_mean: m1,
            k1_std: s1,
            k3_mean: m3,
            k3_std: s3,
        });
    }
    // the mean over repeats of the largest sample count sits within 4 standard errors of the truth
    let converges = rows.last().is_none_or(|r| {
        let se = |s: f64| s / (repeats as f64).sqrt() + 1e-12;
        (r.k1_mean - kl).abs() <= 4.0 * se(r.k1_std) && (r.k3_mean - kl).abs() <= 4.0 * se(r.k3_std)
    });
    Ok(EstimatorReport {
        exact_kl: kl,
        k1_enumerated: k1m,
        k3_enumerated: k3m,
        k1_variance: k1v,
        k3_variance: k3v,
        min_k3_sample: min_k3,
        unbiased: (k1m - kl).abs() <= 1e-10 && (k3m - kl).abs() <= 1e-10,
        variance_ordered: k3v <= k1v,
        converges,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Forward/reverse KL gradient gap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapPoint {
    pub scale: f64,
    pub max_ratio_dev: f64,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlGapReport {
    pub points: Vec<GapPoint>,
    /// Least-squares slope of ln residual against ln max|r − 1|.
    pub order: f64,
    pub passed: bool,
}

/// `‖∇KL(π_θ‖π_old) − ∇KL(π_old‖π_θ) − E_old[½(r − 1)² ∇ln π_θ]‖` at θ = θ_old + s·direction.
pub fn kl_gradient_gap(
    old: &PolicyParams,
    direction: &Matrix,
    prompt: &[TokenId],
    end: TokenId,
    max_len: usize,
    scales: &[f64],
) -> Result<KlGapReport> {
    let eo = EnumeratedPolicy::new(old, prompt, end, max_len)?;
    let mut points = Vec::new();
    for &s in scales {
        let mut theta = old.clone();
        theta.weights_mut().axpy(s, direction)?;
        let en = EnumeratedPolicy::over(&theta, prompt, max_len, eo.responses.clone())?;
        // every term is E_old[c(y) ∇ln π_θ(y)] for some c(y)
        // reverse KL: E_old[r ln r ∇ln π_θ] (the E_old[r ∇ln π_θ] part vanishes)
        // forward KL: −E_old[∇ln π_θ]
        let mut resid = theta.zeros_like();
        let mut max_dev = 0.0f64;
        for (j, y) in eo.responses.iter().enumerate() {
            let lr = en.logprobs[j] - eo.logprobs[j];
            let r = lr.exp();
            let u = lr.exp_m1();
            max_dev = max_dev.max(u.abs());
            let c = eo.probs[j] * (r * lr + 1.0 - 0.5 * u * u);
            crate::policy::grad_logprob_sequence(&theta, prompt, y, c, &mut resid)?;
        }
        points.push(GapPoint {
            scale: s,
            max_ratio_dev: max_dev,
            residual: resid.norm(),
        });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.max_ratio_dev.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.residual.max(1e-300).ln()).collect();
    let (mx, _) = crate::advantage::mean_std(&xs);
    let (my, _) = crate::advantage::mean_std(&ys);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let order = if sxx > 0.0 { sxy / sxx } else { f64::NAN };
    Ok(KlGapReport {
        passed: order > 2.5,
        order,
        points,
    })
}

// ---------------------------------------------------------------------------
// Loss gradients against central differences

/// A random two-group batch with θ_old, θ^(m−1), the current θ and reference log-probs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossInstance {
    pub theta: PolicyParams,
    pub groups: Vec<RolloutGroup>,
    /// Per-token log-probs under θ^(m−1), laid out like `logp_old`.
    pub logp_prev: Vec<Vec<Vec<f64>>>,
    pub epoch: usize,
}

impl LossInstance {
    /// V in 4..=8, four responses of 1 to 4 tokens per group, rewards with and without the
    /// format bonus. θ = θ_old + δ and θ^(m−1) = θ_old + δ/2 for a random δ.
    pub fn random(rng: &mut LabRng) -> Result<Self> {
        let v = rng.random_range(4..=8);
        let spec = FeatureSpec::new(v, rng.random_range(1..=3), rng.random_range(1..=3))?;
        let old = PolicyParams::random(spec, 0.5, 0, rng)?;
        let direction = PolicyParams::random(spec, 0.15, 0, rng)?;
        let reference = PolicyParams::random(spec, 0.5, 0, rng)?;
        let mut theta = old.clone();
        theta.weights_mut().axpy(1.0, direction.weights())?;
        let mut prev = old.clone();
        prev.weights_mut().axpy(0.5, direction.weights())?;

        let mut groups = Vec::new();
        let mut logp_prev = Vec::new();
        for _ in 0..2 {
            let prompt: Vec<TokenId> = (0..rng.random_range(1..=3))
                .map(|_| rng.random_range(0..v))
                .collect();
            let responses: Vec<Vec<TokenId>> = (0..4)
                .map(|_| {
                    (0..rng.random_range(1..=4))
                        .map(|_| rng.random_range(0..v))
                        .collect()
                })
                .collect();
            let logprobs = |p: &PolicyParams| -> Result<Vec<Vec<f64>>> {
                responses
                    .iter()
                    .map(|y| token_logprobs(p, &prompt, y))
                    .collect()
            };
            let rewards = (0..4)
                .map(|_| {
                    let outcome = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
                    let format = if rng.random_bool(0.5) { 0.2 } else { 0.0 };
                    RewardBreakdown {
                        outcome,
                        format,
                        total: outcome + format,
                    }
                })
                .collect();
            logp_prev.push(logprobs(&prev)?);
            groups.push(RolloutGroup {
                logp_old: logprobs(&old)?,
                logp_ref: Some(logprobs(&reference)?),
                prompt,
                responses,
                rewards,
            });
        }
        Ok(Self {
            theta,
            groups,
            logp_prev,
            epoch: rng.random_range(1..=3),
        })
    }

    /// Batch loss at `params`, with stop-gradient quantities read at `self.theta`.
    pub fn loss(&self, params: &PolicyParams, cfg: &LossConfig) -> Result<LossReport> {
        let advs = compute_advantages(&self.groups, cfg)?;
        let opts = LossOptions {
            sg_params: Some(&self.theta),
            epoch: self.epoch,
            ..LossOptions::default()
        };
        batch_loss(
            &self.groups,
            &advs,
            params,
            cfg,
            &opts,
            Some(&self.logp_prev),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub algorithm: Algorithm,
    pub instance: u64,
    pub vocab_size: usize,
    pub n_params: usize,
    pub epoch: usize,
    pub clipped_tokens: usize,
    pub n_tokens: usize,
    pub relative_error: f64,
}

/// Compares the analytic batch-loss gradient on a random [`LossInstance`] (drift and
/// reference terms switched on) with central differences at step `h`.
pub fn loss_gradient_check(algorithm: Algorithm, instance: u64, h: f64) -> Result<GradCheck> {
    let alg_index = Algorithm::ALL
        .iter()
        .position(|&a| a == algorithm)
        .unwrap_or(0) as u64;
    let mut rng = stream(instance, &[domain::ORACLE, 1, alg_index]);
    let inst = LossInstance::random(&mut rng)?;
    let mut cfg = LossConfig::for_algorithm(algorithm);
    cfg.beta = 0.05;
    cfg.lambda = if rng.random_bool(0.5) { 1.0 } else { 0.5 };
    let report = inst.loss(&inst.theta, &cfg)?;
    let numeric = finite_diff_grad(|p| Ok(inst.loss(p, &cfg)?.loss), &inst.theta, h)?;
    Ok(GradCheck {
        algorithm,
        instance,
        vocab_size: inst.theta.vocab_size(),
        n_params: inst.theta.weights().as_slice().len(),
        epoch: inst.epoch,
        clipped_tokens: report.clipped_tokens,
        n_tokens: report.n_tokens,
        relative_error: relative_error(report.gradient.as_slice(), numeric.as_slice()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::FeatureSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_gradient() {
        let x = [0.3, -1.2, 2.5];
        let g = finite_diff(|v| Ok(0.5 * v.iter().map(|a| a * a).sum::<f64>()), &x, 1e-4).unwrap();
        for (a, b) in g.iter().zip(&x) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-8);
        }
    }

    #[test]
    fn fd_budget_and_step() {
        let x = vec![0.0; FD_PARAM_BUDGET + 1];
        assert!(matches!(
            finite_diff(|_| Ok(0.0), &x, 1e-5),
            Err(LabError::BudgetExceeded { .. })
        ));
        assert!(finite_diff(|_| Ok(0.0), &[1.0], 0.0).is_err());
    }

    #[test]
    fn enumeration_counts_and_budget() {
        // V=3, END=0, L=2: [0], [1,0], [1,1], [1,2], [2,0], [2,1], [2,2]
        let r = enumerate_responses(3, 0, 2, 1e6).unwrap();
        assert_eq!(r.len(), 7);
        assert!(enumerate_responses(16, 0, 6, 1e6).is_err());
    }

    #[test]
    fn enumerated_mass_is_one() {
        let spec = FeatureSpec::new(4, 2, 3).unwrap();
        let p = PolicyParams::random(spec, 0.7, 0, &mut crate::rng::stream(2, &[1])).unwrap();
        let e = EnumeratedPolicy::new(&p, &[2, 3], 0, 3).unwrap();
        assert_abs_diff_eq!(e.total_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_step_ratio_ordering() {
        let (a, b) = ratio_ordering_step(0.3, 1.2, true, 0.2, 0.0, BanditForm::PerSample);
        assert_abs_diff_eq!(a, 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(b, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn per_sample_ppo_step_is_a_rescaled_cpg_step() {
        for (r0, pos) in [(1.2, true), (0.8, false), (1.2, false), (0.8, true)] {
            for eta in [0.01, 0.3, 2.0] {
                let (ppo, _) = ratio_ordering_step(0.4, r0, pos, 0.2, eta, BanditForm::PerSample);
                let (_, cpg) =
                    ratio_ordering_step(0.4, r0, pos, 0.2, eta * r0, BanditForm::PerSample);
                assert_abs_diff_eq!(ppo, cpg, epsilon = 1e-12);
            }
        }
    }
}
