//! Rollout, update and metrics loop.
//!
//! A step samples `batch_size` prompts, draws `group_size` responses for each
//! under the pre-step policy θ_old, scores them, computes advantages once for
//! the whole batch, and then runs `ppo_epochs × minibatches` optimiser updates.
//! θ_old is refreshed once, after the last update. All randomness comes from
//! per-(step, prompt, sample) streams, so a run is a pure function of its
//! configuration and a split run resumes bit-exactly.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::losses::{batch_loss, compute_advantages, LossConfig, LossOptions, RolloutGroup};
use crate::matrix::Matrix;
use crate::policy::{
    greedy_response, sample_response, snapshot, token_logprobs, FeatureSpec, PolicyParams,
    PolicySnapshot, SnapshotTag, TokenId,
};
use crate::rng::{domain, stream};
use crate::tasks::{Task, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(LabError::InvalidInput(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for the adaptive optimiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Matrix,
    pub v: Matrix,
}

impl OptimizerState {
    pub fn new(shape_of: &Matrix) -> Self {
        Self {
            t: 0,
            m: Matrix::zeros(shape_of.rows(), shape_of.cols()),
            v: Matrix::zeros(shape_of.rows(), shape_of.cols()),
        }
    }
}

/// `θ ← θ − η g` or a bias-corrected Adam step.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grad: &Matrix,
    state: &mut OptimizerState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if !params.weights().same_shape(grad) || !grad.same_shape(&state.m) {
        return Err(LabError::Shape("gradient does not match parameters".into()));
    }
    match cfg.kind {
        OptimizerKind::Sgd => params.weights_mut().axpy(-cfg.learning_rate, grad),
        OptimizerKind::Adam => {
            state.t += 1;
            let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
            let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
            let w = params.weights_mut().as_mut_slice();
            let m = state.m.as_mut_slice();
            let v = state.v.as_mut_slice();
            for (j, &g) in grad.as_slice().iter().enumerate() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[j] / b1t;
                let vh = v[j] / b2t;
                w[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseThresholds {
    pub r_max: f64,
    pub l_min: f64,
    pub window: usize,
    pub delta: f64,
    /// Format-reward rate above which short responses count as length collapse.
    pub format_rate: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        Self {
            r_max: 10.0,
            l_min: 2.0,
            window: 20,
            delta: 0.3,
            format_rate: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub group_size: usize,
    /// Optimiser updates per PPO epoch; the batch is split into this many contiguous chunks.
    pub minibatches: usize,
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub temperature: f64,
    pub seed: u64,
    pub n_ctx: usize,
    pub n_buckets: usize,
    pub init_scale: f64,
    /// Fraction of the task's prompts withheld from training. With 0 the evaluation set is an
    /// independently seeded sample of `eval_prompts` prompts from the full task distribution.
    pub holdout: f64,
    pub eval_prompts: usize,
    pub eval_every: usize,
    pub thresholds: CollapseThresholds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 16,
            group_size: 8,
            minibatches: 1,
            episodes: 1,
            steps_per_episode: 300,
            temperature: 1.0,
            seed: 0,
            n_ctx: 4,
            n_buckets: 4,
            init_scale: 0.0,
            holdout: 0.0,
            eval_prompts: 64,
            eval_every: 50,
            thresholds: CollapseThresholds::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.episodes * self.steps_per_episode
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: &str| Err(LabError::InvalidInput(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.minibatches == 0 || self.minibatches > self.batch_size {
            return bad("minibatches must lie in 1..=batch_size");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.optimizer.learning_rate >= 0.0) {
            return bad("learning_rate must be >= 0");
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return bad("holdout must lie in [0, 1)");
        }
        if self.eval_prompts == 0 {
            return bad("eval_prompts must be >= 1");
        }
        if self.thresholds.window == 0 {
            return bad("collapse window must be >= 1");
        }
        Ok(())
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub accuracy: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub max_ratio: f64,
    pub mean_length: f64,
    pub loss: f64,
    pub drift_value: f64,
    pub grad_norm: f64,
    pub format_rate: f64,
    pub mean_reward: f64,
    pub eval_accuracy: Option<f64>,
}

pub const CSV_COLUMNS: [&str; 9] = [
    "step",
    "accuracy",
    "clip_fraction",
    "mean_ratio",
    "max_ratio",
    "mean_length",
    "loss",
    "drift_value",
    "grad_norm",
];

impl MetricsRecord {
    /// Field values in [`CSV_COLUMNS`] order.
    pub fn csv_row(&self) -> [String; 9] {
        [
            self.step.to_string(),
            self.accuracy.to_string(),
            self.clip_fraction.to_string(),
            self.mean_ratio.to_string(),
            self.max_ratio.to_string(),
            self.mean_length.to_string(),
            self.loss.to_string(),
            self.drift_value.to_string(),
            self.grad_norm.to_string(),
        ]
    }
}

/// Writes the fixed-column metrics CSV.
pub fn write_metrics_csv<W: Write>(out: W, history: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for m in history {
        w.write_record(m.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Sticky collapse flags; each holds the step at which it was raised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapseFlags {
    pub ratio_explosion: Option<usize>,
    pub length_collapse: Option<usize>,
    pub accuracy_crash: Option<usize>,
}

impl CollapseFlags {
    pub fn any(&self) -> bool {
        self.ratio_explosion.is_some()
            || self.length_collapse.is_some()
            || self.accuracy_crash.is_some()
    }
}

/// Scans a metrics history for the collapse signatures.
///
/// Accuracy is smoothed with a trailing mean over the window before it is
/// compared with its running peak.
pub fn detect_collapse(history: &[MetricsRecord], th: &CollapseThresholds) -> CollapseFlags {
    let mut flags = CollapseFlags::default();
    let (mut ratio_run, mut length_run) = (0usize, 0usize);
    let mut peak = f64::NEG_INFINITY;
    let w = th.window.max(1);
    for (idx, m) in history.iter().enumerate() {
        ratio_run = if m.max_ratio > th.r_max || !m.max_ratio.is_finite() {
            ratio_run + 1
        } else {
            0
        };
        if ratio_run >= w && flags.ratio_explosion.is_none() {
            flags.ratio_explosion = Some(m.step);
        }
        let short = m.mean_length < th.l_min && m.format_rate > th.format_rate;
        length_run = if short { length_run + 1 } else { 0 };
        if length_run >= w && flags.length_collapse.is_none() {
            flags.length_collapse = Some(m.step);
        }
        let lo = (idx + 1).saturating_sub(w);
        let window = &history[lo..=idx];
        let smooth = window.iter().map(|r| r.accuracy).sum::<f64>() / window.len() as f64;
        peak = peak.max(smooth);
        if peak - smooth > th.delta && flags.accuracy_crash.is_none() {
            flags.accuracy_crash = Some(m.step);
        }
    }
    flags
}

/// A run that ended early because a step produced a non-finite gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Abort {
    pub step: usize,
    pub max_ratio: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub final_params: PolicyParams,
    pub history: Vec<MetricsRecord>,
    pub flags: CollapseFlags,
    pub final_eval_accuracy: f64,
    pub aborted: Option<Abort>,
}

/// Resumable trainer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    task: Task,
    params: PolicyParams,
    reference: PolicySnapshot,
    opt_state: OptimizerState,
    step: usize,
    history: Vec<MetricsRecord>,
    train_prompts: Vec<Vec<TokenId>>,
    eval_prompts: Vec<Vec<TokenId>>,
    aborted: Option<Abort>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let task = Task::new(cfg.task.clone())?;
        let spec = FeatureSpec::new(task.vocab().size(), cfg.n_ctx, cfg.n_buckets)?;
        let params = PolicyParams::random(
            spec,
            cfg.init_scale,
            cfg.seed,
            &mut stream(cfg.seed, &[domain::INIT]),
        )?;
        let (train_prompts, eval_prompts) =
            split_prompts(&task, cfg.holdout, cfg.eval_prompts, cfg.seed)?;
        Ok(Self {
            reference: snapshot(&params, SnapshotTag::Reference),
            opt_state: OptimizerState::new(params.weights()),
            params,
            task,
            cfg,
            step: 0,
            history: Vec::new(),
            train_prompts,
            eval_prompts,
            aborted: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub fn eval_prompts(&self) -> &[Vec<TokenId>] {
        &self.eval_prompts
    }

    pub fn train_prompts(&self) -> &[Vec<TokenId>] {
        &self.train_prompts
    }

    pub fn aborted(&self) -> Option<&Abort> {
        self.aborted.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.aborted.is_some() || self.step >= self.cfg.total_steps()
    }

    /// Greedy accuracy on the held-out prompts.
    pub fn evaluate(&self) -> Result<f64> {
        greedy_accuracy(&self.params, &self.task, &self.eval_prompts)
    }

    fn batch_prompts(&self, step: usize) -> Vec<Vec<TokenId>> {
        let mut rng = stream(self.cfg.seed, &[domain::PROMPTS, step as u64]);
        (0..self.cfg.batch_size)
            .map(|_| {
                use rand::Rng;
                self.train_prompts[rng.random_range(0..self.train_prompts.len())].clone()
            })
            .collect()
    }

    /// Samples K responses per prompt under the current (pre-step) policy.
    pub fn rollout(&self, step: usize) -> Result<Vec<RolloutGroup>> {
        let old = snapshot(&self.params, SnapshotTag::Old);
        let need_ref = self.cfg.loss.beta > 0.0;
        let prompts = self.batch_prompts(step);
        let end = self.task.vocab().end();
        let max_len = self.task.max_response_len();
        prompts
            .into_par_iter()
            .enumerate()
            .map(|(pi, prompt)| {
                let mut responses = Vec::with_capacity(self.cfg.group_size);
                let mut logp_old = Vec::with_capacity(self.cfg.group_size);
                let mut logp_ref = Vec::new();
                let mut rewards = Vec::with_capacity(self.cfg.group_size);
                for k in 0..self.cfg.group_size {
                    let mut rng = stream(
                        self.cfg.seed,
                        &[domain::ROLLOUT, step as u64, pi as u64, k as u64],
                    );
                    let y = sample_response(
                        &old,
                        &prompt,
                        end,
                        max_len,
                        self.cfg.temperature,
                        &mut rng,
                    )?;
                    logp_old.push(token_logprobs(&old, &prompt, &y)?);
                    if need_ref {
                        logp_ref.push(token_logprobs(&self.reference, &prompt, &y)?);
                    }
                    rewards.push(self.task.reward(&prompt, &y));
                    responses.push(y);
                }
                Ok(RolloutGroup {
                    prompt,
                    responses,
                    logp_old,
                    logp_ref: need_ref.then_some(logp_ref),
                    rewards,
                })
            })
            .collect()
    }

    /// One full training step; returns its metrics.
    pub fn run_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let groups = self.rollout(step)?;
        let loss_cfg = &self.cfg.loss;
        let advs = compute_advantages(&groups, loss_cfg)?;

        let mut chunks: Vec<usize> = (0..groups.len()).collect();
        let per = groups.len().div_ceil(self.cfg.minibatches);
        let pg_family = loss_cfg.algorithm.is_pg_family();

        let (mut clipped, mut tokens, mut ratio_sum, mut k3_sum) = (0usize, 0usize, 0.0, 0.0);
        let mut max_ratio = 0.0f64;
        let (mut loss_sum, mut gnorm_sum, mut updates) = (0.0, 0.0, 0usize);

        for epoch in 1..=loss_cfg.ppo_epochs {
            if epoch > 1 {
                // revisit the chunks in a fresh order each epoch
                chunks.shuffle(&mut stream(
                    self.cfg.seed,
                    &[domain::ROLLOUT, step as u64, u64::MAX, epoch as u64],
                ));
            }
            let logp_prev: Option<Vec<Vec<Vec<f64>>>> = if epoch > 1 && pg_family {
                Some(
                    groups
                        .par_iter()
                        .map(|g| {
                            g.responses
                                .iter()
                                .map(|y| token_logprobs(&self.params, &g.prompt, y))
                                .collect::<Result<Vec<_>>>()
                        })
                        .collect::<Result<_>>()?,
                )
            } else {
                None
            };
            for chunk in chunks.chunks(per) {
                let sub_g: Vec<RolloutGroup> = chunk.iter().map(|&i| groups[i].clone()).collect();
                let sub_a: Vec<_> = chunk.iter().map(|&i| advs[i].clone()).collect();
                let sub_p: Option<Vec<Vec<Vec<f64>>>> = logp_prev
                    .as_ref()
                    .map(|p| chunk.iter().map(|&i| p[i].clone()).collect());
                let opts = LossOptions {
                    epoch,
                    ..LossOptions::default()
                };
                let report = batch_loss(
                    &sub_g,
                    &sub_a,
                    &self.params,
                    loss_cfg,
                    &opts,
                    sub_p.as_deref(),
                )
                .map_err(|e| self.non_finite(step, max_ratio, e))?;
                if !report.gradient.is_finite() {
                    return Err(self.non_finite(
                        step,
                        report.max_ratio,
                        LabError::InvalidInput("gradient".into()),
                    ));
                }
                clipped += report.clipped_tokens;
                tokens += report.n_tokens;
                ratio_sum += report.mean_ratio * report.n_tokens as f64;
                k3_sum += report.drift_value * report.n_tokens as f64;
                max_ratio = max_ratio.max(report.max_ratio);
                loss_sum += report.loss;
                gnorm_sum += report.gradient.norm();
                updates += 1;
                optimizer_step(
                    &mut self.params,
                    &report.gradient,
                    &mut self.opt_state,
                    &self.cfg.optimizer,
                )?;
                if !self.params.weights().is_finite() {
                    return Err(self.non_finite(
                        step,
                        max_ratio,
                        LabError::InvalidInput("parameters".into()),
                    ));
                }
            }
        }

        let n_resp = (groups.len() * self.cfg.group_size) as f64;
        let mut correct = 0.0;
        let mut formatted = 0.0;
        let mut length = 0.0;
        let mut reward = 0.0;
        for g in &groups {
            for (y, r) in g.responses.iter().zip(&g.rewards) {
                correct += r.outcome;
                formatted += f64::from(u8::from(r.format > 0.0));
                length += Task::content_len(y) as f64;
                reward += r.total;
            }
        }
        self.step += 1;
        let eval_accuracy = if self.cfg.eval_every > 0
            && (self.step.is_multiple_of(self.cfg.eval_every)
                || self.step == self.cfg.total_steps())
        {
            Some(self.evaluate()?)
        } else {
            None
        };
        let t = tokens as f64;
        let record = MetricsRecord {
            step,
            accuracy: correct / n_resp,
            clip_fraction: clipped as f64 / t,
            mean_ratio: ratio_sum / t,
            max_ratio,
            mean_length: length / n_resp,
            loss: loss_sum / updates as f64,
            drift_value: k3_sum / t,
            grad_norm: gnorm_sum / updates as f64,
            format_rate: formatted / n_resp,
            mean_reward: reward / n_resp,
            eval_accuracy,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    fn non_finite(&self, step: usize, max_ratio: f64, e: LabError) -> LabError {
        match e {
            LabError::NonFiniteLoss { .. }
            | LabError::NonFiniteLogits { .. }
            | LabError::InvalidInput(_) => LabError::NonFiniteGradient { step, max_ratio },
            other => other,
        }
    }

    /// Runs `n` more steps (or until the configured total). A non-finite gradient ends the run
    /// and is recorded as an abort; other errors propagate.
    pub fn advance(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            match self.run_step() {
                Ok(_) => {}
                Err(LabError::NonFiniteGradient { step, max_ratio }) => {
                    self.aborted = Some(Abort {
                        step,
                        max_ratio,
                        message: LabError::NonFiniteGradient { step, max_ratio }.to_string(),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn flags(&self) -> CollapseFlags {
        let mut flags = detect_collapse(&self.history, &self.cfg.thresholds);
        if let Some(a) = &self.aborted {
            flags.ratio_explosion.get_or_insert(a.step);
        }
        flags
    }

    pub fn finish(self) -> Result<RunRecord> {
        let final_eval_accuracy = self.evaluate()?;
        let flags = self.flags();
        Ok(RunRecord {
            config: self.cfg,
            final_params: self.params,
            history: self.history,
            flags,
            final_eval_accuracy,
            aborted: self.aborted,
        })
    }
}

/// Runs the whole configured schedule.
pub fn train(cfg: TrainConfig) -> Result<RunRecord> {
    let mut t = Trainer::new(cfg)?;
    let total = t.config().total_steps();
    t.advance(total)?;
    t.finish()
}

type Prompts = Vec<Vec<TokenId>>;

/// Training prompts and evaluation prompts.
///
/// A positive `holdout` withholds that fraction of the prompt set from training;
/// otherwise training uses every prompt and evaluation draws `n_eval` prompts
/// from a stream the training batches never touch.
pub fn split_prompts(
    task: &Task,
    holdout: f64,
    n_eval: usize,
    seed: u64,
) -> Result<(Prompts, Prompts)> {
    let mut rng = stream(seed, &[domain::EVAL_PROMPTS]);
    let mut all = task.all_prompts();
    let n_out = (all.len() as f64 * holdout).round() as usize;
    if n_out == 0 {
        let eval = task.generate_prompts(n_eval, &mut rng)?;
        return Ok((all, eval));
    }
    all.shuffle(&mut rng);
    let train = all.split_off(n_out.min(all.len() - 1));
    Ok((train, all))
}

pub fn greedy_accuracy(
    params: &PolicyParams,
    task: &Task,
    prompts: &[Vec<TokenId>],
) -> Result<f64> {
    let mut correct = 0.0;
    for x in prompts {
        let y = greedy_response(params, x, task.vocab().end(), task.max_response_len())?;
        correct += task.outcome_reward(x, &y);
    }
    Ok(correct / prompts.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn quick() -> TrainConfig {
        TrainConfig {
            steps_per_episode: 6,
            batch_size: 4,
            eval_every: 3,
            ..TrainConfig::default()
        }
    }

    fn rec(step: usize, max_ratio: f64, len: f64, fmt: f64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            accuracy: acc,
            clip_fraction: 0.0,
            mean_ratio: 1.0,
            max_ratio,
            mean_length: len,
            loss: 0.0,
            drift_value: 0.0,
            grad_norm: 0.0,
            format_rate: fmt,
            mean_reward: 0.0,
            eval_accuracy: None,
        }
    }

    #[test]
    fn sgd_and_adam_steps() {
        let spec = FeatureSpec::new(3, 1, 1).unwrap();
        let mut p = PolicyParams::zeros(spec, 0);
        let ones = Matrix::from_vec(3, spec.dim(), vec![1.0; 3 * spec.dim()]).unwrap();
        let mut st = OptimizerState::new(p.weights());
        let sgd = OptimizerConfig {
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        };
        optimizer_step(&mut p, &ones, &mut st, &sgd).unwrap();
        assert!(p.weights().as_slice().iter().all(|&w| w == -0.1));

        for scale in [1e-3, 1.0, 1e3] {
            let mut p = PolicyParams::zeros(spec, 0);
            let mut g = ones.clone();
            g.scale(scale);
            let mut st = OptimizerState::new(p.weights());
            let adam = OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 0.01,
                ..OptimizerConfig::default()
            };
            optimizer_step(&mut p, &g, &mut st, &adam).unwrap();
            for &w in p.weights().as_slice() {
                assert_abs_diff_eq!(w, -0.01, epsilon = 1e-7);
            }
        }

        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut p = PolicyParams::zeros(spec, 0);
            let before = p.clone();
            let mut st = OptimizerState::new(p.weights());
            let cfg = OptimizerConfig {
                kind,
                ..OptimizerConfig::default()
            };
            let zero = p.zeros_like();
            optimizer_step(&mut p, &zero, &mut st, &cfg).unwrap();
            assert_eq!(p, before);
        }
    }

    #[test]
    fn healthy_history_raises_nothing() {
        let h: Vec<_> = (0..50).map(|s| rec(s, 1.0, 3.0, 0.5, 0.5)).collect();
        assert!(!detect_collapse(&h, &CollapseThresholds::default()).any());
    }

    #[test]
    fn ratio_explosion_raised_on_window_step() {
        let th = CollapseThresholds::default();
        let h: Vec<_> = (0..30).map(|s| rec(s, 50.0, 3.0, 0.0, 0.5)).collect();
        assert_eq!(
            detect_collapse(&h, &th).ratio_explosion,
            Some(th.window - 1)
        );
    }

    #[test]
    fn length_collapse_and_accuracy_crash() {
        let th = CollapseThresholds::default();
        let mut h: Vec<_> = (0..20).map(|s| rec(s, 1.0, 6.0, 1.0, 0.8)).collect();
        h.extend((20..60).map(|s| rec(s, 1.0, 1.0, 1.0, 0.0)));
        let f = detect_collapse(&h, &th);
        assert_eq!(f.length_collapse, Some(39));
        assert!(f.accuracy_crash.is_some());
        assert!(f.ratio_explosion.is_none());
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let cfg = TrainConfig {
            steps_per_episode: 0,
            ..TrainConfig::default()
        };
        let init = Trainer::new(cfg.clone()).unwrap().params().clone();
        let r = train(cfg).unwrap();
        assert!(r.history.is_empty());
        assert_eq!(r.final_params, init);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let mut cfg = quick();
        cfg.optimizer.learning_rate = 0.0;
        let init = Trainer::new(cfg.clone()).unwrap().params().clone();
        let r = train(cfg).unwrap();
        assert_eq!(r.history.len(), 6);
        assert_eq!(r.final_params, init);
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let a = train(quick()).unwrap();
        let b = train(quick()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.final_params, b.final_params);
        let mut t = Trainer::new(quick()).unwrap();
        t.advance(2).unwrap();
        let mut resumed = t.clone();
        resumed.advance(10).unwrap();
        let c = resumed.finish().unwrap();
        assert_eq!(a.history, c.history);
        assert_eq!(a.final_params, c.final_params);
    }

    #[test]
    fn single_epoch_uses_unit_correction_weights() {
        let mut t = Trainer::new(quick()).unwrap();
        let m = t.run_step().unwrap();
        assert_eq!(m.mean_ratio, 1.0);
        assert_eq!(m.max_ratio, 1.0);
        assert_eq!(m.clip_fraction, 0.0);
    }

    #[test]
    fn prompt_splits() {
        let task = Task::new(TaskConfig::default()).unwrap();
        let (tr, ev) = split_prompts(&task, 0.2, 64, 3).unwrap();
        assert_eq!(tr.len() + ev.len(), task.prompt_space());
        assert!(ev.iter().all(|p| !tr.contains(p)));
        assert_eq!(ev.len(), 5);
        let (tr, ev) = split_prompts(&task, 0.0, 64, 3).unwrap();
        assert_eq!(tr.len(), task.prompt_space());
        assert_eq!(ev.len(), 64);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rec(0, 1.0, 2.0, 0.0, 0.5)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with(
            "step,accuracy,clip_fraction,mean_ratio,max_ratio,mean_length,loss,drift_value,grad_norm\n"
        ));
    }
}
