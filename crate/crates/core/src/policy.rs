//! Tiny autoregressive softmax policy.
//!
//! The policy is log-linear over a fixed sparse feature map: the one-hot
//! encodings of the last `n_ctx` context tokens (with a padding symbol before
//! the start of the prompt) concatenated with a one-hot bucket of the response
//! position. Logits are `weights · φ(context)`, so every log-probability has
//! an exact analytic gradient:
//!
//! ```text
//! ∇_W ln π(t | ctx) = (onehot(t) − π(· | ctx)) ⊗ φ(ctx)
//! ```

use std::fmt::Write as _;
use std::ops::Deref;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::matrix::Matrix;
use crate::rng::LabRng;

pub type TokenId = usize;

/// Finite vocabulary with the distinguished END and FORMAT tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
    end: TokenId,
    format: TokenId,
}

impl Vocabulary {
    pub fn new(names: Vec<String>, end: TokenId, format: TokenId) -> Result<Self> {
        if names.len() < 3 {
            return Err(LabError::InvalidInput(format!(
                "vocabulary needs at least 3 tokens, got {}",
                names.len()
            )));
        }
        if end >= names.len() || format >= names.len() || end == format {
            return Err(LabError::InvalidInput(
                "END and FORMAT must be distinct in-vocabulary tokens".into(),
            ));
        }
        Ok(Self { names, end, format })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn end(&self) -> TokenId {
        self.end
    }

    pub fn format(&self) -> TokenId {
        self.format
    }

    pub fn name(&self, token: TokenId) -> &str {
        self.names.get(token).map(String::as_str).unwrap_or("?")
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, tokens: &[TokenId]) -> Result<()> {
        check_tokens(tokens, self.size())
    }
}

fn check_tokens(tokens: &[TokenId], vocab: usize) -> Result<()> {
    match tokens.iter().find(|&&t| t >= vocab) {
        Some(&token) => Err(LabError::TokenOutOfVocabulary { token, vocab }),
        None => Ok(()),
    }
}

/// A decoding context: the prompt plus the response generated so far.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prompt: &'a [TokenId],
    pub response: &'a [TokenId],
}

impl<'a> Context<'a> {
    pub fn new(prompt: &'a [TokenId], response: &'a [TokenId]) -> Self {
        Self { prompt, response }
    }

    /// Token `back` positions from the end (0 = last), `None` before the prompt start.
    fn token_back(&self, back: usize) -> Option<TokenId> {
        let r = self.response.len();
        if back < r {
            Some(self.response[r - 1 - back])
        } else {
            let b = back - r;
            let p = self.prompt.len();
            (b < p).then(|| self.prompt[p - 1 - b])
        }
    }
}

/// Shape of the context feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub n_buckets: usize,
}

impl FeatureSpec {
    pub fn new(vocab_size: usize, n_ctx: usize, n_buckets: usize) -> Result<Self> {
        if vocab_size < 2 || n_buckets == 0 {
            return Err(LabError::InvalidInput(format!(
                "invalid feature spec: V={vocab_size}, buckets={n_buckets}"
            )));
        }
        Ok(Self {
            vocab_size,
            n_ctx,
            n_buckets,
        })
    }

    pub fn dim(&self) -> usize {
        self.n_ctx * (self.vocab_size + 1) + self.n_buckets
    }

    /// Indices of the active (value 1) features for a context.
    pub fn active(&self, ctx: &Context<'_>) -> Vec<usize> {
        let stride = self.vocab_size + 1;
        let mut out = Vec::with_capacity(self.n_ctx + 1);
        for slot in 0..self.n_ctx {
            let sym = ctx.token_back(slot).unwrap_or(self.vocab_size);
            out.push(slot * stride + sym);
        }
        let bucket = ctx.response.len().min(self.n_buckets - 1);
        out.push(self.n_ctx * stride + bucket);
        out
    }
}

/// Weight matrix of the log-linear policy, shape `V × F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    spec: FeatureSpec,
    seed: u64,
    weights: Matrix,
}

impl PolicyParams {
    pub fn zeros(spec: FeatureSpec, seed: u64) -> Self {
        Self {
            weights: Matrix::zeros(spec.vocab_size, spec.dim()),
            spec,
            seed,
        }
    }

    /// Gaussian initialisation with standard deviation `scale`; `scale == 0` gives the uniform policy.
    pub fn random(spec: FeatureSpec, scale: f64, seed: u64, rng: &mut LabRng) -> Result<Self> {
        let mut p = Self::zeros(spec, seed);
        if scale > 0.0 {
            let normal = Normal::new(0.0, scale)
                .map_err(|e| LabError::InvalidInput(format!("init scale: {e}")))?;
            for w in p.weights.as_mut_slice() {
                *w = normal.sample(rng);
            }
        }
        Ok(p)
    }

    pub fn from_weights(spec: FeatureSpec, seed: u64, weights: Matrix) -> Result<Self> {
        if weights.rows() != spec.vocab_size || weights.cols() != spec.dim() {
            return Err(LabError::Shape(format!(
                "weights {}x{} do not match V={} F={}",
                weights.rows(),
                weights.cols(),
                spec.vocab_size,
                spec.dim()
            )));
        }
        Ok(Self {
            spec,
            seed,
            weights,
        })
    }

    pub fn spec(&self) -> FeatureSpec {
        self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    /// Zero matrix with the shape of the weights.
    pub fn zeros_like(&self) -> Matrix {
        Matrix::zeros(self.weights.rows(), self.weights.cols())
    }

    fn logits(&self, active: &[usize], ctx: &Context<'_>) -> Result<Vec<f64>> {
        let mut logits = Vec::with_capacity(self.spec.vocab_size);
        for t in 0..self.spec.vocab_size {
            let row = self.weights.row(t);
            let z: f64 = active.iter().map(|&j| row[j]).sum();
            if !z.is_finite() {
                let mut context = ctx.prompt.to_vec();
                context.extend_from_slice(ctx.response);
                return Err(LabError::NonFiniteLogits { row: t, context });
            }
            logits.push(z);
        }
        Ok(logits)
    }

    /// Full evaluation at a context: active features and log-probabilities.
    pub fn evaluate(&self, ctx: &Context<'_>) -> Result<TokenEval> {
        let active = self.spec.active(ctx);
        let logits = self.logits(&active, ctx)?;
        Ok(TokenEval {
            logprobs: log_softmax(&logits),
            active,
        })
    }

    /// Serialises to a self-describing text dump that round-trips bit-exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "cpgd-policy v1");
        let _ = writeln!(s, "vocab {}", self.spec.vocab_size);
        let _ = writeln!(s, "features {}", self.spec.dim());
        let _ = writeln!(s, "n_ctx {}", self.spec.n_ctx);
        let _ = writeln!(s, "n_buckets {}", self.spec.n_buckets);
        let _ = writeln!(s, "seed {}", self.seed);
        for r in 0..self.weights.rows() {
            let row: Vec<String> = self
                .weights
                .row(r)
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: &str| LabError::InvalidInput(format!("policy dump: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some("cpgd-policy v1") {
            return Err(bad("missing header"));
        }
        let mut header = |key: &str| -> Result<u64> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let (k, v) = line.split_once(' ').ok_or_else(|| bad(line))?;
            if k != key {
                return Err(bad(&format!("expected `{key}`, found `{k}`")));
            }
            v.parse::<u64>().map_err(|_| bad(line))
        };
        let vocab = header("vocab")? as usize;
        let features = header("features")? as usize;
        let n_ctx = header("n_ctx")? as usize;
        let n_buckets = header("n_buckets")? as usize;
        let seed = header("seed")?;
        let spec = FeatureSpec::new(vocab, n_ctx, n_buckets)?;
        if spec.dim() != features {
            return Err(bad("feature count does not match n_ctx/n_buckets"));
        }
        let mut data = Vec::with_capacity(vocab * features);
        for line in lines.take(vocab) {
            for v in line.split_whitespace() {
                data.push(v.parse::<f64>().map_err(|_| bad(v))?);
            }
        }
        let weights = Matrix::from_vec(vocab, features, data)?;
        Self::from_weights(spec, seed, weights)
    }
}

/// Log-probabilities over the vocabulary at one context, plus its active features.
#[derive(Debug, Clone)]
pub struct TokenEval {
    pub logprobs: Vec<f64>,
    pub active: Vec<usize>,
}

impl TokenEval {
    pub fn probs(&self) -> Vec<f64> {
        self.logprobs.iter().map(|l| l.exp()).collect()
    }

    /// `grad += scale · ∇ ln π(token | ctx)`
    pub fn accumulate_grad(&self, token: TokenId, scale: f64, grad: &mut Matrix) {
        if scale == 0.0 {
            return;
        }
        for (t, lp) in self.logprobs.iter().enumerate() {
            let coef = scale * (f64::from(u8::from(t == token)) - lp.exp());
            if coef == 0.0 {
                continue;
            }
            for &j in &self.active {
                *grad.get_mut(t, j) += coef;
            }
        }
    }
}

/// Max-subtracted log-softmax in 64-bit.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - max - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// π_θ(· | ctx) as a probability vector.
pub fn token_distribution(params: &PolicyParams, ctx: &Context<'_>) -> Result<Vec<f64>> {
    check_tokens(ctx.prompt, params.vocab_size())?;
    check_tokens(ctx.response, params.vocab_size())?;
    let active = params.spec.active(ctx);
    Ok(softmax(&params.logits(&active, ctx)?))
}

/// Per-token log-probabilities `ln π(y_i | x, y_<i)`.
pub fn token_logprobs(
    params: &PolicyParams,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<Vec<f64>> {
    check_tokens(prompt, params.vocab_size())?;
    check_tokens(response, params.vocab_size())?;
    (0..response.len())
        .map(|i| {
            let ev = params.evaluate(&Context::new(prompt, &response[..i]))?;
            Ok(ev.logprobs[response[i]])
        })
        .collect()
}

/// `ln π(y | x) = Σ_i ln π(y_i | x, y_<i)`.
pub fn logprob_sequence(
    params: &PolicyParams,
    prompt: &[TokenId],
    response: &[TokenId],
) -> Result<f64> {
    if response.is_empty() {
        return Err(LabError::InvalidInput("empty response".into()));
    }
    Ok(token_logprobs(params, prompt, response)?.iter().sum())
}

/// Dense gradient of `ln π(token | ctx)` with respect to the weights.
pub fn grad_logprob_token(
    params: &PolicyParams,
    ctx: &Context<'_>,
    token: TokenId,
) -> Result<Matrix> {
    check_tokens(&[token], params.vocab_size())?;
    check_tokens(ctx.prompt, params.vocab_size())?;
    check_tokens(ctx.response, params.vocab_size())?;
    let ev = params.evaluate(ctx)?;
    let mut g = params.zeros_like();
    ev.accumulate_grad(token, 1.0, &mut g);
    Ok(g)
}

/// Gradient of the full sequence log-probability.
pub fn grad_logprob_sequence(
    params: &PolicyParams,
    prompt: &[TokenId],
    response: &[TokenId],
    scale: f64,
    grad: &mut Matrix,
) -> Result<()> {
    for i in 0..response.len() {
        let ev = params.evaluate(&Context::new(prompt, &response[..i]))?;
        ev.accumulate_grad(response[i], scale, grad);
    }
    Ok(())
}

fn sample_index(probs: &[f64], rng: &mut LabRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum: take the last token with mass
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// Ancestral sampling until END or `max_len` tokens.
pub fn sample_response(
    params: &PolicyParams,
    prompt: &[TokenId],
    end: TokenId,
    max_len: usize,
    temperature: f64,
    rng: &mut LabRng,
) -> Result<Vec<TokenId>> {
    if max_len == 0 || !(temperature > 0.0) {
        return Err(LabError::InvalidInput(format!(
            "max_len={max_len}, temperature={temperature}"
        )));
    }
    check_tokens(prompt, params.vocab_size())?;
    let mut response = Vec::with_capacity(max_len);
    while response.len() < max_len {
        let ctx = Context::new(prompt, &response);
        let active = params.spec.active(&ctx);
        let mut logits = params.logits(&active, &ctx)?;
        if temperature != 1.0 {
            logits.iter_mut().for_each(|z| *z /= temperature);
        }
        let t = sample_index(&softmax(&logits), rng);
        response.push(t);
        if t == end {
            break;
        }
    }
    Ok(response)
}

/// Greedy (argmax) decoding; ties go to the lowest token id.
pub fn greedy_response(
    params: &PolicyParams,
    prompt: &[TokenId],
    end: TokenId,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    let mut response = Vec::with_capacity(max_len);
    while response.len() < max_len {
        let ev = params.evaluate(&Context::new(prompt, &response))?;
        let t = ev
            .logprobs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &l)| {
                if l > best.1 {
                    (i, l)
                } else {
                    best
                }
            })
            .0;
        response.push(t);
        if t == end {
            break;
        }
    }
    Ok(response)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SnapshotTag {
    Old,
    Reference,
}

/// Frozen, shareable copy of the policy weights.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: Arc<PolicyParams>,
    tag: SnapshotTag,
}

impl PolicySnapshot {
    pub fn tag(&self) -> SnapshotTag {
        self.tag
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }
}

impl Deref for PolicySnapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.params
    }
}

pub fn snapshot(params: &PolicyParams, tag: SnapshotTag) -> PolicySnapshot {
    PolicySnapshot {
        params: Arc::new(params.clone()),
        tag,
    }
}
