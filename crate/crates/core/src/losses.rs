//! Training objectives with analytic gradients.
//!
//! Every loss is a minimisation objective (the negated surrogate). The
//! gradient of each token term is a scalar coefficient times
//! `∇ ln π_θ(y_i | x, y_<i)`, so a loss is fully described by its per-token
//! coefficients. Quantities under stop-gradient (drift ratio, importance
//! weights) are read from a separate parameter set so that finite
//! differences can hold them fixed.
//!
//! Two families share the plumbing:
//!
//! * `pg`, `pgd`, `cpg`, `cpgd` clip the log-ratio, sum over all tokens of the
//!   group and divide by the group's token count;
//! * `ppo-clip`, `grpo`, `dual-clip`, `grpo-drift`, `rloo`, `reinforce++` clip
//!   the ratio, average tokens within each response and then responses.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    cpgd_weighted_advantage, global_norm, group_norm, log_ratios_to_ref, reinforcepp_returns,
    rloo_advantage, BatchStats, Weighting, DEFAULT_C_OMEGA,
};
use crate::divergence::{drift_term, k3_estimate, RatioSample, DEFAULT_DRIFT_CAP};
use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::policy::{Context, PolicyParams, TokenId};
use crate::tasks::RewardBreakdown;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "cpgd")]
    Cpgd,
    #[serde(rename = "cpg")]
    Cpg,
    #[serde(rename = "pgd")]
    Pgd,
    #[serde(rename = "pg")]
    Pg,
    #[serde(rename = "ppo-clip")]
    PpoClip,
    #[serde(rename = "dual-clip")]
    DualClip,
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "grpo-drift")]
    GrpoDrift,
    #[serde(rename = "rloo")]
    Rloo,
    #[serde(rename = "reinforce++")]
    ReinforcePp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 10] = [
        Algorithm::Pg,
        Algorithm::Pgd,
        Algorithm::Cpg,
        Algorithm::Cpgd,
        Algorithm::PpoClip,
        Algorithm::DualClip,
        Algorithm::Grpo,
        Algorithm::GrpoDrift,
        Algorithm::Rloo,
        Algorithm::ReinforcePp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cpgd => "cpgd",
            Algorithm::Cpg => "cpg",
            Algorithm::Pgd => "pgd",
            Algorithm::Pg => "pg",
            Algorithm::PpoClip => "ppo-clip",
            Algorithm::DualClip => "dual-clip",
            Algorithm::Grpo => "grpo",
            Algorithm::GrpoDrift => "grpo-drift",
            Algorithm::Rloo => "rloo",
            Algorithm::ReinforcePp => "reinforce++",
        }
    }

    /// Log-ratio clipped, group-token normalised objectives.
    pub fn is_pg_family(self) -> bool {
        matches!(
            self,
            Algorithm::Pg | Algorithm::Pgd | Algorithm::Cpg | Algorithm::Cpgd
        )
    }

    pub fn uses_drift(self) -> bool {
        matches!(
            self,
            Algorithm::Pgd | Algorithm::Cpgd | Algorithm::GrpoDrift
        )
    }

    pub fn uses_clip(self) -> bool {
        !matches!(self, Algorithm::Pg | Algorithm::Pgd)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| LabError::InvalidInput(format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub algorithm: Algorithm,
    /// Clip radius; `inf` disables clipping.
    pub epsilon: f64,
    /// Tight-to-loose schedule weight; 1 keeps ε constant.
    pub lambda: f64,
    /// Drift weight.
    pub alpha: f64,
    /// Reference-constraint weight.
    pub beta: f64,
    /// Drift ratio cap `c`; the ratio seen by the drift gradient never exceeds `1 + c`.
    pub drift_cap: f64,
    pub dual_clip: f64,
    pub weighting: Weighting,
    pub c_omega: f64,
    pub ppo_epochs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Cpgd,
            epsilon: 0.2,
            lambda: 1.0,
            alpha: 0.1,
            beta: 0.0,
            drift_cap: DEFAULT_DRIFT_CAP,
            dual_clip: 3.0,
            weighting: Weighting::Std,
            c_omega: DEFAULT_C_OMEGA,
            ppo_epochs: 1,
        }
    }
}

impl LossConfig {
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        Self {
            algorithm,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::InvalidInput(m));
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        if !(self.drift_cap > 0.0) {
            return bad(format!("drift cap must be > 0, got {}", self.drift_cap));
        }
        if self.algorithm == Algorithm::DualClip && !(self.dual_clip > 1.0 + self.epsilon) {
            return bad(format!(
                "dual-clip constant {} must exceed 1 + epsilon",
                self.dual_clip
            ));
        }
        if !(self.c_omega > 0.0) {
            return bad(format!("c_omega must be > 0, got {}", self.c_omega));
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs must be >= 1".into());
        }
        Ok(())
    }

    fn effective_alpha(&self) -> f64 {
        if self.algorithm.uses_drift() {
            self.alpha
        } else {
            0.0
        }
    }

    fn effective_beta(&self) -> f64 {
        match self.algorithm {
            // β enters the REINFORCE++ returns, not the loss
            Algorithm::ReinforcePp | Algorithm::PpoClip => 0.0,
            _ => self.beta,
        }
    }
}

/// `ε_i = λε + (1 − λ)ε·i/len` for 1-based token index `i`.
pub fn epsilon_schedule(i: usize, len: usize, eps: f64, lambda: f64) -> f64 {
    if lambda == 1.0 || eps.is_infinite() {
        return eps;
    }
    lambda * eps + (1.0 - lambda) * eps * i as f64 / len as f64
}

/// Log-ratio clip interval `[ln(1 − ε), ln(1 + ε)]`, unbounded below once ε ≥ 1.
pub fn log_clip_bounds(eps: f64) -> (f64, f64) {
    let lo = if eps >= 1.0 {
        f64::NEG_INFINITY
    } else {
        (-eps).ln_1p()
    };
    (lo, eps.ln_1p())
}

/// `clip(π_{θ^(m−1)} / π_old, 1 − ε, 1 + ε)` for epoch `m` (1-based); 1 on the first epoch.
pub fn is_correction_weight(epoch: usize, logp_prev: f64, logp_old: f64, eps: f64) -> f64 {
    if epoch <= 1 {
        return 1.0;
    }
    (logp_prev - logp_old).exp().clamp(1.0 - eps, 1.0 + eps)
}

/// One prompt with K sampled responses and the sampling-time log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub prompt: Vec<TokenId>,
    pub responses: Vec<Vec<TokenId>>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Option<Vec<Vec<f64>>>,
    pub rewards: Vec<RewardBreakdown>,
}

impl RolloutGroup {
    pub fn validate(&self) -> Result<()> {
        let k = self.responses.len();
        if k == 0 || self.logp_old.len() != k || self.rewards.len() != k {
            return Err(LabError::Shape(format!(
                "group has {k} responses, {} log-prob rows, {} rewards",
                self.logp_old.len(),
                self.rewards.len()
            )));
        }
        for (j, (y, lp)) in self.responses.iter().zip(&self.logp_old).enumerate() {
            if y.is_empty() || y.len() != lp.len() {
                return Err(LabError::Shape(format!(
                    "response {j}: {} tokens, {} old log-probs",
                    y.len(),
                    lp.len()
                )));
            }
        }
        if let Some(r) = &self.logp_ref {
            if r.len() != k
                || r.iter()
                    .zip(&self.responses)
                    .any(|(a, y)| a.len() != y.len())
            {
                return Err(LabError::Shape("reference log-probs misaligned".into()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.responses.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.responses.iter().map(Vec::len).sum()
    }

    pub fn total_rewards(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.total).collect()
    }
}

/// Per-token advantages of one group and the weight ω applied to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub per_token: Vec<Vec<f64>>,
    pub omega: f64,
}

fn broadcast(values: &[f64], group: &RolloutGroup) -> Vec<Vec<f64>> {
    values
        .iter()
        .zip(&group.responses)
        .map(|(&a, y)| vec![a; y.len()])
        .collect()
}

/// Advantages for a whole batch; batch-level statistics are taken here.
pub fn compute_advantages(
    groups: &[RolloutGroup],
    cfg: &LossConfig,
) -> Result<Vec<GroupAdvantage>> {
    for g in groups {
        g.validate()?;
    }
    let rewards: Vec<Vec<f64>> = groups.iter().map(RolloutGroup::total_rewards).collect();
    match cfg.algorithm {
        a if a.is_pg_family() => {
            let stats = BatchStats::from_groups(&rewards, cfg.c_omega)?;
            groups
                .iter()
                .zip(&rewards)
                .map(|(g, r)| {
                    let adv = cpgd_weighted_advantage(r, cfg.weighting, &stats)?;
                    Ok(GroupAdvantage {
                        per_token: broadcast(&adv.values, g),
                        omega: adv.omega,
                    })
                })
                .collect()
        }
        Algorithm::PpoClip | Algorithm::Grpo | Algorithm::DualClip | Algorithm::GrpoDrift => groups
            .iter()
            .zip(&rewards)
            .map(|(g, r)| {
                Ok(GroupAdvantage {
                    per_token: broadcast(&group_norm(r)?, g),
                    omega: 1.0,
                })
            })
            .collect(),
        Algorithm::Rloo => {
            let raw = groups
                .iter()
                .zip(&rewards)
                .map(|(g, r)| Ok(broadcast(&rloo_advantage(r)?, g)))
                .collect::<Result<Vec<_>>>()?;
            normalise_tokens(raw)
        }
        Algorithm::ReinforcePp => {
            let raw = groups
                .iter()
                .map(|g| {
                    g.responses
                        .iter()
                        .enumerate()
                        .map(|(j, y)| {
                            let lr = match (&g.logp_ref, cfg.beta > 0.0) {
                                (Some(r), true) => log_ratios_to_ref(&g.logp_old[j], &r[j])?,
                                (None, true) => {
                                    return Err(LabError::InvalidInput(
                                        "reinforce++ with beta > 0 needs reference log-probs"
                                            .into(),
                                    ))
                                }
                                _ => vec![0.0; y.len()],
                            };
                            reinforcepp_returns(g.rewards[j].total, &lr, cfg.beta)
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            normalise_tokens(raw)
        }
        _ => unreachable!(),
    }
}

/// GlobalNorm over every token of the batch.
fn normalise_tokens(raw: Vec<Vec<Vec<f64>>>) -> Result<Vec<GroupAdvantage>> {
    let flat: Vec<f64> = raw.iter().flatten().flatten().copied().collect();
    let normed = global_norm(&flat)?;
    let mut it = normed.into_iter();
    Ok(raw
        .into_iter()
        .map(|g| GroupAdvantage {
            per_token: g
                .into_iter()
                .map(|y| y.iter().map(|_| it.next().unwrap()).collect())
                .collect(),
            omega: 1.0,
        })
        .collect())
}

/// Stop-gradient and multi-epoch context for a loss evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossOptions<'a> {
    /// Parameters at which stop-gradient quantities are read; defaults to the differentiated ones.
    pub sg_params: Option<&'a PolicyParams>,
    /// 1-based PPO epoch.
    pub epoch: usize,
    /// Per-token log-probs under θ^(m−1), needed for the correction weight when `epoch ≥ 2`.
    pub logp_prev: Option<&'a [Vec<f64>]>,
    /// Group index used in error coordinates.
    pub group_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub gradient: Matrix,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    /// Mean k3 estimate of KL(π_old ‖ π_θ) over tokens.
    pub drift_value: f64,
    pub n_tokens: usize,
    /// Tokens whose surrogate gradient was zeroed by a clip.
    pub clipped_tokens: usize,
    pub mean_is_weight: f64,
}

/// Per-token record exposed for contract tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenTerm {
    pub response: usize,
    pub token: usize,
    pub ratio: f64,
    pub advantage: f64,
    pub clipped: bool,
    /// Coefficient of `∇ ln π` contributed by the surrogate, before normalisation.
    pub surrogate_coef: f64,
    /// Coefficient of `∇ ln π` contributed by the drift, before normalisation.
    pub drift_coef: f64,
}

fn check(v: f64, what: &'static str, group: usize, response: usize, token: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LabError::NonFiniteLoss {
            what,
            group,
            response,
            token,
        })
    }
}

/// Loss, gradient and per-token terms for one group.
pub fn group_loss_terms(
    group: &RolloutGroup,
    adv: &GroupAdvantage,
    params: &PolicyParams,
    cfg: &LossConfig,
    opts: &LossOptions<'_>,
) -> Result<(LossReport, Vec<TokenTerm>)> {
    group.validate()?;
    if adv.per_token.len() != group.k()
        || adv
            .per_token
            .iter()
            .zip(&group.responses)
            .any(|(a, y)| a.len() != y.len())
    {
        return Err(LabError::Shape(
            "advantages misaligned with responses".into(),
        ));
    }
    let epoch = opts.epoch.max(1);
    if epoch >= 2 && cfg.algorithm.is_pg_family() && opts.logp_prev.is_none() {
        return Err(LabError::InvalidInput(
            "epochs after the first need log-probs under the previous epoch's parameters".into(),
        ));
    }
    let gi = opts.group_index;
    let pg_family = cfg.algorithm.is_pg_family();
    let alpha = cfg.effective_alpha();
    let beta = cfg.effective_beta();
    let eps = if cfg.algorithm.uses_clip() {
        cfg.epsilon
    } else {
        f64::INFINITY
    };
    let n_tokens = group.n_tokens();
    let k = group.k() as f64;

    let mut grad = params.zeros_like();
    let mut loss = 0.0;
    let mut terms = Vec::with_capacity(n_tokens);
    let mut clipped_tokens = 0;
    let mut ratio_sum = 0.0;
    let mut max_ratio = 0.0f64;
    let mut k3_sum = 0.0;
    let mut is_sum = 0.0;

    for (j, y) in group.responses.iter().enumerate() {
        let len = y.len();
        // pg family: 1/Σ|y|; PPO family: 1/(K·|y|)
        let norm = if pg_family {
            1.0 / n_tokens as f64
        } else {
            1.0 / (k * len as f64)
        };
        for i in 0..len {
            let ctx = Context::new(&group.prompt, &y[..i]);
            let ev = params.evaluate(&ctx)?;
            let logp_new = check(ev.logprobs[y[i]], "log-prob", gi, j, i)?;
            let logp_sg = match opts.sg_params {
                Some(sg) => sg.evaluate(&ctx)?.logprobs[y[i]],
                None => logp_new,
            };
            let logp_old = group.logp_old[j][i];
            let a = adv.per_token[j][i];
            let d = logp_new - logp_old;
            let ratio = check(d.exp(), "ratio", gi, j, i)?;
            ratio_sum += ratio;
            max_ratio = max_ratio.max(ratio);
            k3_sum += k3_estimate(&RatioSample { logp_old, logp_new });

            // objective contribution and its ∇ln π coefficient (maximisation sense)
            let (obj, coef, clipped) = if pg_family {
                let w = match opts.logp_prev {
                    Some(prev) if epoch >= 2 => {
                        is_correction_weight(epoch, prev[j][i], logp_old, cfg.epsilon)
                    }
                    _ => 1.0,
                };
                is_sum += w;
                let aw = w * a;
                let eps_i = epsilon_schedule(i + 1, len, eps, cfg.lambda);
                let (lo, hi) = log_clip_bounds(eps_i);
                let clipped = (aw > 0.0 && d > hi) || (aw < 0.0 && d < lo);
                let unclipped = d * aw;
                let obj = unclipped.min(d.clamp(lo, hi) * aw);
                (obj, if clipped { 0.0 } else { aw }, clipped)
            } else {
                is_sum += 1.0;
                let lo = if eps >= 1.0 { 0.0 } else { 1.0 - eps };
                let hi = 1.0 + eps;
                let surr = (ratio * a).min(ratio.clamp(lo, hi) * a);
                let ppo_clipped = (a > 0.0 && ratio > hi) || (a < 0.0 && ratio < lo);
                if cfg.algorithm == Algorithm::DualClip && a < 0.0 && ratio > cfg.dual_clip {
                    (cfg.dual_clip * a, 0.0, true)
                } else if ppo_clipped {
                    (surr, 0.0, true)
                } else {
                    (surr, a * ratio, false)
                }
            };
            let obj = check(obj, "surrogate", gi, j, i)?;
            if clipped {
                clipped_tokens += 1;
            }

            let mut total_coef = coef;
            let mut drift_coef = 0.0;
            loss -= norm * obj;
            if alpha > 0.0 {
                let dt = drift_term(
                    &RatioSample {
                        logp_old,
                        logp_new: logp_sg,
                    },
                    cfg.drift_cap,
                )?;
                drift_coef = dt.grad_coefficient;
                // drift value is coef · ln π_θ with coef frozen
                loss += norm * alpha * dt.grad_coefficient * logp_new;
                total_coef -= alpha * drift_coef;
            }
            if beta > 0.0 {
                let logp_ref = group.logp_ref.as_ref().ok_or_else(|| {
                    LabError::InvalidInput("beta > 0 needs reference log-probs".into())
                })?[j][i];
                // k3 of KL(π_θ ‖ π_ref) with samples from π_θ: ρ − 1 − ln ρ, ρ = π_ref/π_θ
                let lr = logp_ref - logp_new;
                let k3_ref = check(lr.exp_m1() - lr, "reference k3", gi, j, i)?;
                loss += norm * beta * k3_ref;
                // ∇k3 = (1 − ρ) ∇ln π_θ
                total_coef -= beta * (-lr.exp_m1());
            }
            let total_coef = check(total_coef, "gradient coefficient", gi, j, i)?;
            if total_coef != 0.0 {
                ev.accumulate_grad(y[i], -norm * total_coef, &mut grad);
            }
            terms.push(TokenTerm {
                response: j,
                token: i,
                ratio,
                advantage: a,
                clipped,
                surrogate_coef: coef,
                drift_coef,
            });
        }
    }
    let n = n_tokens as f64;
    let report = LossReport {
        loss: check(loss, "loss", gi, 0, 0)?,
        gradient: grad,
        clip_fraction: clipped_tokens as f64 / n,
        mean_ratio: ratio_sum / n,
        max_ratio,
        drift_value: k3_sum / n,
        n_tokens,
        clipped_tokens,
        mean_is_weight: is_sum / n,
    };
    Ok((report, terms))
}

pub fn group_loss(
    group: &RolloutGroup,
    adv: &GroupAdvantage,
    params: &PolicyParams,
    cfg: &LossConfig,
    opts: &LossOptions<'_>,
) -> Result<LossReport> {
    group_loss_terms(group, adv, params, cfg, opts).map(|(r, _)| r)
}

fn require(cfg: &LossConfig, ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(LabError::InvalidInput(format!(
            "{what} called with algorithm {}",
            cfg.algorithm
        )))
    }
}

/// Full clipped-log-ratio objective with drift.
pub fn cpgd_loss(
    group: &RolloutGroup,
    adv: &GroupAdvantage,
    params: &PolicyParams,
    cfg: &LossConfig,
    opts: &LossOptions<'_>,
) -> Result<LossReport> {
    require(cfg, cfg.algorithm == Algorithm::Cpgd, "cpgd_loss")?;
    group_loss(group, adv, params, cfg, opts)
}

pub fn pg_family_loss(
    group: &RolloutGroup,
    adv: &GroupAdvantage,
    params: &PolicyParams,
    cfg: &LossConfig,
    opts: &LossOptions<'_>,
) -> Result<LossReport> {
    require(cfg, cfg.algorithm.is_pg_family(), "pg_family_loss")?;
    group_loss(group, adv, params, cfg, opts)
}

pub fn ppo_clip_loss(
    group: &RolloutGroup,
    adv: &GroupAdvantage,
    params: &PolicyParams,
    cfg: &LossConfig,
    opts: &LossOptions<'_>,
) -> Result<LossReport> {
    require(
        cfg,
        matches!(
            cfg.algorithm,
            Algorithm::PpoClip
                | Algorithm::Grpo
                | Algorithm::GrpoDrift
                | Algorithm::Rloo
                | Algorithm::ReinforcePp
        ),
        "ppo_clip_loss",
    )?;
    group_loss(group, adv, params, cfg, opts)
}

pub fn dual_clip_loss(
    group: &RolloutGroup,
    adv: &GroupAdvantage,
    params: &PolicyParams,
    cfg: &LossConfig,
    opts: &LossOptions<'_>,
) -> Result<LossReport> {
    require(cfg, cfg.algorithm == Algorithm::DualClip, "dual_clip_loss")?;
    group_loss(group, adv, params, cfg, opts)
}

/// Loss averaged over prompts. Groups are evaluated in parallel and reduced in a fixed order.
pub fn batch_loss(
    groups: &[RolloutGroup],
    advs: &[GroupAdvantage],
    params: &PolicyParams,
    cfg: &LossConfig,
    opts: &LossOptions<'_>,
    logp_prev: Option<&[Vec<Vec<f64>>]>,
) -> Result<LossReport> {
    if groups.is_empty() || groups.len() != advs.len() {
        return Err(LabError::Shape(format!(
            "{} groups, {} advantage sets",
            groups.len(),
            advs.len()
        )));
    }
    let reports: Vec<LossReport> = groups
        .par_iter()
        .zip(advs.par_iter())
        .enumerate()
        .map(|(gi, (g, a))| {
            let o = LossOptions {
                group_index: gi,
                logp_prev: logp_prev.map(|p| p[gi].as_slice()),
                ..*opts
            };
            group_loss(g, a, params, cfg, &o)
        })
        .collect::<Result<_>>()?;
    let n_groups = reports.len() as f64;
    let n_tokens: usize = reports.iter().map(|r| r.n_tokens).sum();
    let mut gradient = params.zeros_like();
    let mut loss = 0.0;
    let (mut clipped, mut ratio_sum, mut k3_sum, mut is_sum, mut max_ratio) =
        (0, 0.0, 0.0, 0.0, 0.0f64);
    for r in &reports {
        gradient.axpy(1.0 / n_groups, &r.gradient)?;
        loss += r.loss / n_groups;
        clipped += r.clipped_tokens;
        let n = r.n_tokens as f64;
        ratio_sum += r.mean_ratio * n;
        k3_sum += r.drift_value * n;
        is_sum += r.mean_is_weight * n;
        max_ratio = max_ratio.max(r.max_ratio);
    }
    let n = n_tokens as f64;
    Ok(LossReport {
        loss,
        gradient,
        clip_fraction: clipped as f64 / n,
        mean_ratio: ratio_sum / n,
        max_ratio,
        drift_value: k3_sum / n,
        n_tokens,
        clipped_tokens: clipped,
        mean_is_weight: is_sum / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{token_logprobs, FeatureSpec};
    use crate::rng::stream;
    use approx::assert_abs_diff_eq;

    fn reward(total: f64) -> RewardBreakdown {
        RewardBreakdown {
            outcome: total,
            format: 0.0,
            total,
        }
    }

    fn setup(rewards: &[f64]) -> (PolicyParams, RolloutGroup) {
        let spec = FeatureSpec::new(4, 2, 3).unwrap();
        let p = PolicyParams::random(spec, 0.5, 1, &mut stream(1, &[9])).unwrap();
        let prompt = vec![2, 3];
        let responses: Vec<Vec<usize>> = (0..rewards.len())
            .map(|k| (0..1 + k % 3).map(|i| (k + i) % 4).collect())
            .collect();
        let logp_old = responses
            .iter()
            .map(|y| token_logprobs(&p, &prompt, y).unwrap())
            .collect();
        let g = RolloutGroup {
            prompt,
            responses,
            logp_old,
            logp_ref: None,
            rewards: rewards.iter().map(|&r| reward(r)).collect(),
        };
        (p, g)
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(epsilon_schedule(3, 7, 0.2, 1.0), 0.2);
        assert_abs_diff_eq!(epsilon_schedule(10, 10, 0.2, 0.5), 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(epsilon_schedule(5, 10, 0.2, 0.5), 0.15, epsilon = 1e-15);
        for i in 1..10 {
            assert!(epsilon_schedule(i + 1, 10, 0.2, 0.3) >= epsilon_schedule(i, 10, 0.2, 0.3));
        }
    }

    #[test]
    fn correction_weight_examples() {
        assert_eq!(is_correction_weight(1, 5.0, 0.0, 0.2), 1.0);
        assert_abs_diff_eq!(
            is_correction_weight(2, 1.5f64.ln(), 0.0, 0.2),
            1.2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            is_correction_weight(2, 0.9f64.ln(), 0.0, 0.2),
            0.9,
            epsilon = 1e-15
        );
    }

    #[test]
    fn zero_advantage_at_old_gives_zero() {
        let (p, g) = setup(&[0.5; 4]);
        let cfg = LossConfig::default();
        let adv = compute_advantages(std::slice::from_ref(&g), &cfg).unwrap();
        let r = cpgd_loss(&g, &adv[0], &p, &cfg, &LossOptions::default()).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.gradient.max_abs(), 0.0);
        assert_eq!(r.drift_value, 0.0);
        assert_eq!(r.mean_ratio, 1.0);
    }

    #[test]
    fn at_old_every_algorithm_is_plain_policy_gradient() {
        let (p, g) = setup(&[1.0, 0.0, 0.0, 1.0, 0.0]);
        for alg in Algorithm::ALL {
            let cfg = LossConfig {
                algorithm: alg,
                alpha: 0.3,
                ..LossConfig::default()
            };
            let adv = compute_advantages(std::slice::from_ref(&g), &cfg).unwrap();
            let r = group_loss(&g, &adv[0], &p, &cfg, &LossOptions::default()).unwrap();
            let mut expect = p.zeros_like();
            for (j, y) in g.responses.iter().enumerate() {
                let norm = if alg.is_pg_family() {
                    1.0 / g.n_tokens() as f64
                } else {
                    1.0 / (g.k() * y.len()) as f64
                };
                for i in 0..y.len() {
                    let ev = p.evaluate(&Context::new(&g.prompt, &y[..i])).unwrap();
                    ev.accumulate_grad(y[i], -norm * adv[0].per_token[j][i], &mut expect);
                }
            }
            for (a, b) in r.gradient.as_slice().iter().zip(expect.as_slice()) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-14);
            }
            assert_eq!(r.clip_fraction, 0.0, "{alg}");
        }
    }

    #[test]
    fn clipped_tokens_have_zero_surrogate_coefficient() {
        let (p, mut g) = setup(&[1.0, 0.0, 0.0, 1.0]);
        // make every token look as if π_old was much smaller or larger
        for (j, lp) in g.logp_old.iter_mut().enumerate() {
            for v in lp.iter_mut() {
                *v += if j % 2 == 0 { -0.7 } else { 0.7 };
            }
        }
        for alg in [
            Algorithm::Cpgd,
            Algorithm::Cpg,
            Algorithm::Grpo,
            Algorithm::DualClip,
        ] {
            let cfg = LossConfig::for_algorithm(alg);
            let adv = compute_advantages(std::slice::from_ref(&g), &cfg).unwrap();
            let (r, terms) =
                group_loss_terms(&g, &adv[0], &p, &cfg, &LossOptions::default()).unwrap();
            assert!(r.clipped_tokens > 0);
            for t in terms.iter().filter(|t| t.clipped) {
                assert_eq!(t.surrogate_coef, 0.0);
            }
        }
    }

    #[test]
    fn dual_clip_semantics() {
        let (p, mut g) = setup(&[1.0, 0.0]);
        // response 1 has negative advantage; push its ratio to 5 and then 2
        let cfg_d = LossConfig::for_algorithm(Algorithm::DualClip);
        let cfg_p = LossConfig::for_algorithm(Algorithm::Grpo);
        let base = g.logp_old[1].clone();
        for (r, expect_zero) in [(5.0f64, true), (2.0, false)] {
            g.logp_old[1] = base.iter().map(|v| v - r.ln()).collect();
            let adv = compute_advantages(std::slice::from_ref(&g), &cfg_d).unwrap();
            let (_, td) =
                group_loss_terms(&g, &adv[0], &p, &cfg_d, &LossOptions::default()).unwrap();
            let (_, tp) =
                group_loss_terms(&g, &adv[0], &p, &cfg_p, &LossOptions::default()).unwrap();
            let t = td.iter().find(|t| t.response == 1).unwrap();
            assert!(t.advantage < 0.0);
            if expect_zero {
                assert_eq!(t.surrogate_coef, 0.0);
                assert!(t.clipped);
            } else {
                assert_eq!(td, tp);
            }
        }
        // positive advantage is never touched by the dual clip
        g.logp_old[0] = g.logp_old[0].iter().map(|v| v - 20.0).collect();
        let adv = compute_advantages(std::slice::from_ref(&g), &cfg_d).unwrap();
        let (_, td) = group_loss_terms(&g, &adv[0], &p, &cfg_d, &LossOptions::default()).unwrap();
        let (_, tp) = group_loss_terms(&g, &adv[0], &p, &cfg_p, &LossOptions::default()).unwrap();
        let pos = |v: &[TokenTerm]| {
            v.iter()
                .filter(|t| t.response == 0)
                .copied()
                .collect::<Vec<_>>()
        };
        assert_eq!(pos(&td), pos(&tp));
    }

    #[test]
    fn reduction_lattice_is_bit_exact() {
        let (p, mut g) = setup(&[1.0, 0.0, 0.2, 1.0]);
        for lp in g.logp_old.iter_mut() {
            for (i, v) in lp.iter_mut().enumerate() {
                *v += 0.3 * (i as f64 - 0.5);
            }
        }
        let run = |cfg: &LossConfig| {
            let adv = compute_advantages(std::slice::from_ref(&g), cfg).unwrap();
            group_loss(&g, &adv[0], &p, cfg, &LossOptions::default()).unwrap()
        };
        let pg = run(&LossConfig::for_algorithm(Algorithm::Pg));
        let cpgd_reduced = run(&LossConfig {
            alpha: 0.0,
            epsilon: f64::INFINITY,
            ..LossConfig::for_algorithm(Algorithm::Cpgd)
        });
        let pgd0 = run(&LossConfig {
            alpha: 0.0,
            ..LossConfig::for_algorithm(Algorithm::Pgd)
        });
        let cpg_inf = run(&LossConfig {
            epsilon: f64::INFINITY,
            ..LossConfig::for_algorithm(Algorithm::Cpg)
        });
        let cpgd_a0 = run(&LossConfig {
            alpha: 0.0,
            ..LossConfig::for_algorithm(Algorithm::Cpgd)
        });
        let cpg = run(&LossConfig::for_algorithm(Algorithm::Cpg));
        let cpgd_inf = run(&LossConfig {
            epsilon: f64::INFINITY,
            ..LossConfig::for_algorithm(Algorithm::Cpgd)
        });
        let pgd = run(&LossConfig::for_algorithm(Algorithm::Pgd));
        assert_eq!(pg, cpgd_reduced);
        assert_eq!(pg, pgd0);
        assert_eq!(pg, cpg_inf);
        assert_eq!(cpg, cpgd_a0);
        assert_eq!(pgd, cpgd_inf);
    }

    #[test]
    fn reinforcepp_needs_reference_when_beta_positive() {
        let (_, g) = setup(&[1.0, 0.0]);
        let cfg = LossConfig {
            beta: 0.1,
            ..LossConfig::for_algorithm(Algorithm::ReinforcePp)
        };
        assert!(compute_advantages(std::slice::from_ref(&g), &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            epsilon: f64::INFINITY,
            ..LossConfig::default()
        }
        .validate()
        .is_ok());
        for bad in [
            LossConfig {
                epsilon: 0.0,
                ..LossConfig::default()
            },
            LossConfig {
                lambda: 1.5,
                ..LossConfig::default()
            },
            LossConfig {
                dual_clip: 1.1,
                ..LossConfig::for_algorithm(Algorithm::DualClip)
            },
            LossConfig {
                ppo_epochs: 0,
                ..LossConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!("ppo".parse::<Algorithm>().is_err());
    }
}
