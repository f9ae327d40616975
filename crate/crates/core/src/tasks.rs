//! Verifiable toy tasks with rule-based rewards.
//!
//! Every task shares the layout `END = 0`, `FORMAT = 1`, followed by the
//! task's own symbols. A response is read as an optional leading FORMAT
//! token, then the answer segment, then END. The outcome reward is exact
//! token match of the answer segment; the format channel pays a small bonus
//! for well-formed responses regardless of correctness.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::policy::{TokenId, Vocabulary};
use crate::rng::LabRng;

pub const END: TokenId = 0;
pub const FORMAT: TokenId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    ArithmeticSum,
    CopySequence,
    Parity,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::ArithmeticSum,
        TaskKind::CopySequence,
        TaskKind::Parity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ArithmeticSum => "arithmetic-sum",
            TaskKind::CopySequence => "copy-sequence",
            TaskKind::Parity => "parity",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| LabError::InvalidInput(format!("unknown task kind `{s}`")))
    }
}

/// When the format bonus is paid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatRule {
    /// Response begins with FORMAT.
    Leading,
    /// Response begins with FORMAT and is terminated by END within the length budget.
    LeadingTerminated,
}

impl FromStr for FormatRule {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leading" => Ok(FormatRule::Leading),
            "leading-terminated" => Ok(FormatRule::LeadingTerminated),
            _ => Err(LabError::InvalidInput(format!("unknown format rule `{s}`"))),
        }
    }
}

impl fmt::Display for FormatRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FormatRule::Leading => "leading",
            FormatRule::LeadingTerminated => "leading-terminated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub kind: TaskKind,
    /// Arithmetic operands are drawn from `0..=max_operand`.
    pub max_operand: usize,
    /// Number of distinct symbols for copy-sequence.
    pub alphabet: usize,
    /// Prompt length range for copy-sequence and parity.
    pub min_prompt_len: usize,
    pub max_prompt_len: usize,
    pub f_bonus: f64,
    pub format_rule: FormatRule,
    pub max_response_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::ArithmeticSum,
            max_operand: 4,
            alphabet: 4,
            min_prompt_len: 2,
            max_prompt_len: 3,
            f_bonus: 0.2,
            format_rule: FormatRule::LeadingTerminated,
            max_response_len: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub outcome: f64,
    pub format: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    cfg: TaskConfig,
    vocab: Vocabulary,
}

impl Task {
    pub fn new(cfg: TaskConfig) -> Result<Self> {
        if !(0.0..=0.5).contains(&cfg.f_bonus) {
            return Err(LabError::InvalidInput(format!(
                "f_bonus must lie in [0, 0.5], got {}",
                cfg.f_bonus
            )));
        }
        let mut names = vec!["<end>".to_string(), "<fmt>".to_string()];
        match cfg.kind {
            TaskKind::ArithmeticSum => {
                names.push("+".into());
                names.extend((0..=2 * cfg.max_operand).map(|d| d.to_string()));
            }
            TaskKind::CopySequence => {
                if cfg.alphabet == 0 {
                    return Err(LabError::InvalidInput(
                        "copy alphabet must be non-empty".into(),
                    ));
                }
                names.extend(
                    (0..cfg.alphabet).map(|i| char::from(b'a' + (i % 26) as u8).to_string()),
                );
            }
            TaskKind::Parity => {
                names.push("0".into());
                names.push("1".into());
            }
        }
        if cfg.kind != TaskKind::ArithmeticSum
            && (cfg.min_prompt_len == 0 || cfg.min_prompt_len > cfg.max_prompt_len)
        {
            return Err(LabError::InvalidInput(format!(
                "prompt length range {}..={} is empty",
                cfg.min_prompt_len, cfg.max_prompt_len
            )));
        }
        let task = Self {
            vocab: Vocabulary::new(names, END, FORMAT)?,
            cfg,
        };
        if task.longest_answer() > task.cfg.max_response_len {
            return Err(LabError::InvalidInput(format!(
                "max_response_len {} cannot hold an answer of length {}",
                task.cfg.max_response_len,
                task.longest_answer()
            )));
        }
        Ok(task)
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn max_response_len(&self) -> usize {
        self.cfg.max_response_len
    }

    fn longest_answer(&self) -> usize {
        match self.cfg.kind {
            TaskKind::ArithmeticSum | TaskKind::Parity => 1,
            TaskKind::CopySequence => self.cfg.max_prompt_len,
        }
    }

    fn digit(&self, d: usize) -> TokenId {
        3 + d
    }

    fn symbol(&self, s: usize) -> TokenId {
        2 + s
    }

    /// Number of distinct prompts the task can produce.
    pub fn prompt_space(&self) -> usize {
        match self.cfg.kind {
            TaskKind::ArithmeticSum => (self.cfg.max_operand + 1).pow(2),
            TaskKind::CopySequence => (self.cfg.min_prompt_len..=self.cfg.max_prompt_len)
                .map(|n| self.cfg.alphabet.pow(n as u32))
                .sum(),
            TaskKind::Parity => (self.cfg.min_prompt_len..=self.cfg.max_prompt_len)
                .map(|n| 1usize << n)
                .sum(),
        }
    }

    /// Every prompt of the task, in a fixed order.
    pub fn all_prompts(&self) -> Vec<Vec<TokenId>> {
        match self.cfg.kind {
            TaskKind::ArithmeticSum => {
                let m = self.cfg.max_operand;
                (0..=m)
                    .flat_map(|a| (0..=m).map(move |b| (a, b)))
                    .map(|(a, b)| vec![self.digit(a), 2, self.digit(b)])
                    .collect()
            }
            TaskKind::CopySequence | TaskKind::Parity => {
                let base = if self.cfg.kind == TaskKind::Parity {
                    2
                } else {
                    self.cfg.alphabet
                };
                let mut out = Vec::new();
                for n in self.cfg.min_prompt_len..=self.cfg.max_prompt_len {
                    for code in 0..base.pow(n as u32) {
                        let mut c = code;
                        let mut p = Vec::with_capacity(n);
                        for _ in 0..n {
                            p.push(self.symbol(c % base));
                            c /= base;
                        }
                        out.push(p);
                    }
                }
                out
            }
        }
    }

    pub fn generate_prompt(&self, rng: &mut LabRng) -> Vec<TokenId> {
        match self.cfg.kind {
            TaskKind::ArithmeticSum => {
                let a = rng.random_range(0..=self.cfg.max_operand);
                let b = rng.random_range(0..=self.cfg.max_operand);
                vec![self.digit(a), 2, self.digit(b)]
            }
            TaskKind::CopySequence | TaskKind::Parity => {
                let base = if self.cfg.kind == TaskKind::Parity {
                    2
                } else {
                    self.cfg.alphabet
                };
                let n = rng.random_range(self.cfg.min_prompt_len..=self.cfg.max_prompt_len);
                (0..n)
                    .map(|_| self.symbol(rng.random_range(0..base)))
                    .collect()
            }
        }
    }

    pub fn generate_prompts(&self, count: usize, rng: &mut LabRng) -> Result<Vec<Vec<TokenId>>> {
        if count == 0 {
            return Err(LabError::InvalidInput(
                "prompt count must be at least 1".into(),
            ));
        }
        Ok((0..count).map(|_| self.generate_prompt(rng)).collect())
    }

    /// The unique correct answer segment for a prompt.
    pub fn answer(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        self.vocab.check(prompt)?;
        let malformed = || LabError::InvalidInput(format!("malformed prompt {prompt:?}"));
        match self.cfg.kind {
            TaskKind::ArithmeticSum => match prompt {
                [a, 2, b] if *a >= 3 && *b >= 3 => Ok(vec![self.digit((a - 3) + (b - 3))]),
                _ => Err(malformed()),
            },
            TaskKind::CopySequence => {
                if prompt.iter().any(|&t| t < 2) {
                    return Err(malformed());
                }
                Ok(prompt.to_vec())
            }
            TaskKind::Parity => {
                if prompt.iter().any(|&t| t < 2) {
                    return Err(malformed());
                }
                let ones = prompt.iter().filter(|&&t| t == 3).count();
                Ok(vec![self.symbol(ones % 2)])
            }
        }
    }

    /// Tokens between an optional leading FORMAT and the first END.
    pub fn answer_segment<'a>(&self, response: &'a [TokenId]) -> &'a [TokenId] {
        let body = match response.first() {
            Some(&FORMAT) => &response[1..],
            _ => response,
        };
        let stop = body.iter().position(|&t| t == END).unwrap_or(body.len());
        &body[..stop]
    }

    pub fn outcome_reward(&self, prompt: &[TokenId], response: &[TokenId]) -> f64 {
        if response.is_empty() {
            return 0.0;
        }
        match self.answer(prompt) {
            Ok(ans) if self.answer_segment(response) == ans.as_slice() => 1.0,
            _ => 0.0,
        }
    }

    pub fn format_reward(&self, response: &[TokenId]) -> f64 {
        let leading = response.first() == Some(&FORMAT);
        let ok = match self.cfg.format_rule {
            FormatRule::Leading => leading,
            FormatRule::LeadingTerminated => leading && response.last() == Some(&END),
        };
        if ok {
            self.cfg.f_bonus
        } else {
            0.0
        }
    }

    pub fn reward(&self, prompt: &[TokenId], response: &[TokenId]) -> RewardBreakdown {
        let outcome = self.outcome_reward(prompt, response);
        let format = self.format_reward(response);
        RewardBreakdown {
            outcome,
            format,
            total: outcome + format,
        }
    }

    /// A shortest correct response: the answer followed by END when it fits.
    pub fn reference_response(&self, prompt: &[TokenId]) -> Result<Vec<TokenId>> {
        let mut r = self.answer(prompt)?;
        if r.len() < self.cfg.max_response_len {
            r.push(END);
        }
        Ok(r)
    }

    /// Content length of a response: generated tokens excluding a terminating END.
    pub fn content_len(response: &[TokenId]) -> usize {
        match response.last() {
            Some(&END) => response.len() - 1,
            _ => response.len(),
        }
    }
}
