//! Advantage constructions.
//!
//! Standard deviations are population standard deviations with an additive
//! stabiliser [`EPS_STD`] in every denominator.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const EPS_STD: f64 = 1e-6;
pub const DEFAULT_C_OMEGA: f64 = 4.0;

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn need(values: &[f64], min: usize, what: &str) -> Result<()> {
    if values.len() < min {
        return Err(LabError::InvalidInput(format!(
            "{what} needs at least {min} values, got {}",
            values.len()
        )));
    }
    Ok(())
}

/// `(r − mean) / (std + ε_std)` within one group.
pub fn group_norm(rewards: &[f64]) -> Result<Vec<f64>> {
    need(rewards, 2, "group_norm")?;
    let (mean, std) = mean_std(rewards);
    Ok(rewards
        .iter()
        .map(|r| (r - mean) / (std + EPS_STD))
        .collect())
}

/// `(x − mean) / (std + ε_std)` over a whole batch.
pub fn global_norm(values: &[f64]) -> Result<Vec<f64>> {
    need(values, 2, "global_norm")?;
    let (mean, std) = mean_std(values);
    Ok(values
        .iter()
        .map(|v| (v - mean) / (std + EPS_STD))
        .collect())
}

/// Leave-one-out advantage `G_k − mean(G_{−k})`, before batch normalisation.
pub fn rloo_advantage(g: &[f64]) -> Result<Vec<f64>> {
    need(g, 2, "rloo_advantage")?;
    let k = g.len() as f64;
    let total: f64 = g.iter().sum();
    Ok(g.iter().map(|&gk| gk - (total - gk) / (k - 1.0)).collect())
}

/// Per-token log-ratios `ln π_old − ln π_ref` for the REINFORCE++ penalty.
pub fn log_ratios_to_ref(logp_old: &[f64], logp_ref: &[f64]) -> Result<Vec<f64>> {
    if logp_old.len() != logp_ref.len() {
        return Err(LabError::Shape(format!(
            "{} old log-probs vs {} reference log-probs",
            logp_old.len(),
            logp_ref.len()
        )));
    }
    Ok(logp_old.iter().zip(logp_ref).map(|(o, r)| o - r).collect())
}

/// REINFORCE++ returns `G_i = R − β Σ_{j≥i} log_ratio_j`.
pub fn reinforcepp_returns(reward: f64, log_ratios: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta >= 0.0) {
        return Err(LabError::InvalidInput(format!(
            "beta must be >= 0, got {beta}"
        )));
    }
    let mut out = vec![0.0; log_ratios.len()];
    let mut suffix = 0.0;
    for i in (0..log_ratios.len()).rev() {
        suffix += log_ratios[i];
        out[i] = reward - beta * suffix;
    }
    Ok(out)
}

/// How the mean-centred CPGD advantage of a group is weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Raw rewards, no centring.
    Unprocessed,
    Equal,
    Std,
    ClipFilter,
}

impl Weighting {
    pub const ALL: [Weighting; 4] = [
        Weighting::Unprocessed,
        Weighting::Equal,
        Weighting::Std,
        Weighting::ClipFilter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Weighting::Unprocessed => "unprocessed",
            Weighting::Equal => "equal",
            Weighting::Std => "std",
            Weighting::ClipFilter => "clip-filter",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Weighting {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Weighting::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| LabError::InvalidInput(format!("unknown weighting `{s}`")))
    }
}

/// Batch-level statistics consumed by the clip-filter weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub n_prompts: usize,
    pub n_nonzero_std: usize,
    pub c_omega: f64,
}

impl BatchStats {
    pub fn new(n_prompts: usize, n_nonzero_std: usize, c_omega: f64) -> Result<Self> {
        if n_nonzero_std > n_prompts || !(c_omega > 0.0) {
            return Err(LabError::InvalidInput(format!(
                "batch stats: {n_nonzero_std} of {n_prompts} prompts, c_omega {c_omega}"
            )));
        }
        Ok(Self {
            n_prompts,
            n_nonzero_std,
            c_omega,
        })
    }

    pub fn from_groups<G: AsRef<[f64]>>(groups: &[G], c_omega: f64) -> Result<Self> {
        let nonzero = groups
            .iter()
            .filter(|g| mean_std(g.as_ref()).1 > 0.0)
            .count();
        Self::new(groups.len(), nonzero, c_omega)
    }

    /// `min(c_ω, #prompts / #prompts with non-zero std)`, or `c_ω` when no group has spread.
    pub fn clip_filter_weight(&self) -> f64 {
        if self.n_nonzero_std == 0 {
            self.c_omega
        } else {
            self.c_omega
                .min(self.n_prompts as f64 / self.n_nonzero_std as f64)
        }
    }
}

/// Per-response advantages of one group plus the weight that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub weighting: Weighting,
    pub omega: f64,
}

/// `ω(x) · (r − mean r)` with ω chosen by `mode`.
pub fn cpgd_weighted_advantage(
    rewards: &[f64],
    mode: Weighting,
    stats: &BatchStats,
) -> Result<AdvantageVector> {
    if mode == Weighting::Unprocessed {
        return Ok(unprocessed_advantage(rewards));
    }
    need(rewards, 2, "cpgd_weighted_advantage")?;
    let (mean, std) = mean_std(rewards);
    let (values, omega) = match mode {
        Weighting::Std => {
            // divide rather than multiply by 1/(std+ε) so this matches group_norm bit for bit
            let denom = std + EPS_STD;
            (
                rewards.iter().map(|r| (r - mean) / denom).collect(),
                1.0 / denom,
            )
        }
        Weighting::Equal => (rewards.iter().map(|r| r - mean).collect(), 1.0),
        Weighting::ClipFilter => {
            let w = stats.clip_filter_weight();
            (rewards.iter().map(|r| w * (r - mean)).collect(), w)
        }
        Weighting::Unprocessed => unreachable!(),
    };
    Ok(AdvantageVector {
        values,
        weighting: mode,
        omega,
    })
}

/// Rewards used directly as advantages.
pub fn unprocessed_advantage(rewards: &[f64]) -> AdvantageVector {
    AdvantageVector {
        values: rewards.to_vec(),
        weighting: Weighting::Unprocessed,
        omega: 1.0,
    }
}
