//! Divergence decoding: adjust a base model's logits with the difference of
//! a forget-side and a retain-side model, then sample.
//!
//! Two adjustments are supported:
//!
//! * linear: `l_P + alpha * (l_q - l_p)`
//! * rank: `l_P` with the `k` tokens of largest `l_p - l_q` set to `-inf`
//!
//! `p` is the forget-side model and `q` the retain-side model. Sampling
//! applies, in order: adjustment, temperature, top-k/top-p truncation,
//! softmax, draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenId, BOS, EOS};
use crate::logits::{argmax, softmax, LogitSource, LogitVector, SourceError};

/// Temperatures at or below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("logit vectors differ in length: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("{which} logits must be finite (entry {index} is {value})")]
    NonFinite { which: &'static str, index: usize, value: f64 },
    #[error("rank k={k} must be smaller than the vocabulary size {vocab_size}")]
    RankTooLarge { k: usize, vocab_size: usize },
    #[error("every token is masked")]
    FullyMasked,
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("sources disagree on vocabulary size: {0:?}")]
    VocabMismatch([usize; 3]),
    #[error("prompt must begin with <s>")]
    MissingBos,
    #[error(transparent)]
    Source(#[from] SourceError),
}

/// How the base logits are adjusted at each step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdjustMode {
    /// Base model alone.
    None,
    Linear { alpha: f64 },
    Rank { k: usize },
}

impl AdjustMode {
    pub fn label(&self) -> String {
        match self {
            AdjustMode::None => "none".to_owned(),
            AdjustMode::Linear { alpha } => format!("linear:alpha={alpha}"),
            AdjustMode::Rank { k } => format!("rank:k={k}"),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), DecodeError> {
        match *self {
            AdjustMode::Linear { alpha } if !(alpha.is_finite() && alpha >= 0.0) => {
                Err(DecodeError::InvalidConfig(format!("alpha must be finite and non-negative, got {alpha}")))
            }
            AdjustMode::Rank { k } if k >= vocab_size => Err(DecodeError::RankTooLarge { k, vocab_size }),
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for AdjustMode {
    type Err = DecodeError;

    /// Parses the form produced by [`AdjustMode::label`].
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DecodeError::InvalidConfig(format!("unrecognized mode label {s:?}"));
        if s == "none" {
            return Ok(AdjustMode::None);
        }
        if let Some(v) = s.strip_prefix("linear:alpha=") {
            return v.parse().map(|alpha| AdjustMode::Linear { alpha }).map_err(|_| bad());
        }
        if let Some(v) = s.strip_prefix("rank:k=") {
            return v.parse().map(|k| AdjustMode::Rank { k }).map_err(|_| bad());
        }
        Err(bad())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    None,
    TopK(usize),
    TopP(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: AdjustMode,
    /// `0` (or anything up to [`GREEDY_TEMPERATURE`]) means greedy.
    pub temperature: f64,
    pub truncation: Truncation,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(mode: AdjustMode, max_new_tokens: usize) -> Self {
        Self { mode, temperature: 0.0, truncation: Truncation::None, max_new_tokens, seed: 0 }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= GREEDY_TEMPERATURE
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), DecodeError> {
        self.mode.validate(vocab_size)?;
        self.sampler().validate()?;
        if self.max_new_tokens == 0 {
            return Err(DecodeError::InvalidConfig("max_new_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn sampler(&self) -> Sampler {
        Sampler { temperature: self.temperature, truncation: self.truncation }
    }
}

/// Temperature and truncation settings for [`sample_next`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampler {
    pub temperature: f64,
    pub truncation: Truncation,
}

impl Sampler {
    pub const GREEDY: Sampler = Sampler { temperature: 0.0, truncation: Truncation::None };

    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(DecodeError::InvalidConfig(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        match self.truncation {
            Truncation::TopK(0) => Err(DecodeError::InvalidConfig("top_k must be at least 1".into())),
            Truncation::TopP(p) if !(p > 0.0 && p <= 1.0) => {
                Err(DecodeError::InvalidConfig(format!("top_p must lie in (0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }
}

fn check_lengths(lp_base: &[f64], lp: &[f64], lq: &[f64]) -> Result<(), DecodeError> {
    for v in [lp, lq] {
        if v.len() != lp_base.len() {
            return Err(DecodeError::LengthMismatch { expected: lp_base.len(), found: v.len() });
        }
    }
    for (which, v) in [("forget-side", lp), ("retain-side", lq)] {
        if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !x.is_finite()) {
            return Err(DecodeError::NonFinite { which, index, value });
        }
    }
    Ok(())
}

/// `base + alpha * (retain - forget)`. Masked base entries stay masked.
pub fn linear_adjust(base: &[f64], forget: &[f64], retain: &[f64], alpha: f64) -> Result<LogitVector, DecodeError> {
    check_lengths(base, forget, retain)?;
    Ok(base.iter().zip(forget).zip(retain).map(|((&b, &p), &q)| b + alpha * (q - p)).collect::<Vec<_>>().into())
}

/// Token ids of the `k` largest entries of `forget - retain`, ties broken
/// towards the lower id.
pub fn most_divergent(forget: &[f64], retain: &[f64], k: usize) -> Vec<TokenId> {
    if k == 0 {
        return Vec::new();
    }
    let d: Vec<f64> = forget.iter().zip(retain).map(|(p, q)| p - q).collect();
    let mut ids: Vec<usize> = (0..d.len()).collect();
    let by_rank = |a: &usize, b: &usize| d[*b].total_cmp(&d[*a]).then(a.cmp(b));
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, by_rank);
        ids.truncate(k);
    }
    ids.sort_unstable_by(by_rank);
    ids.into_iter().map(|i| i as TokenId).collect()
}

/// `base` with the `k` tokens most favoured by the forget side over the
/// retain side set to `-inf`.
pub fn rank_adjust(base: &[f64], forget: &[f64], retain: &[f64], k: usize) -> Result<LogitVector, DecodeError> {
    check_lengths(base, forget, retain)?;
    if k >= base.len() {
        return Err(DecodeError::RankTooLarge { k, vocab_size: base.len() });
    }
    let mut out = base.to_vec();
    for id in most_divergent(forget, retain, k) {
        out[id as usize] = f64::NEG_INFINITY;
    }
    Ok(out.into())
}

pub fn adjust(base: &[f64], forget: &[f64], retain: &[f64], mode: AdjustMode) -> Result<LogitVector, DecodeError> {
    match mode {
        AdjustMode::None => {
            check_lengths(base, forget, retain)?;
            Ok(base.to_vec().into())
        }
        AdjustMode::Linear { alpha } => linear_adjust(base, forget, retain, alpha),
        AdjustMode::Rank { k } => rank_adjust(base, forget, retain, k),
    }
}

/// Order of token ids by descending value, ties to the lower id.
fn descending(values: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..values.len()).collect();
    ids.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    ids
}

fn truncate(logits: &mut [f64], truncation: Truncation) {
    match truncation {
        Truncation::None => {}
        Truncation::TopK(m) => {
            for &i in descending(logits).iter().skip(m) {
                logits[i] = f64::NEG_INFINITY;
            }
        }
        Truncation::TopP(p) => {
            let probs = softmax(logits);
            let order = descending(&probs);
            let mut cumulative = 0.0;
            let mut keep = order.len();
            for (n, &i) in order.iter().enumerate() {
                cumulative += probs[i];
                if cumulative >= p {
                    keep = n + 1;
                    break;
                }
            }
            for &i in &order[keep..] {
                logits[i] = f64::NEG_INFINITY;
            }
        }
    }
}

/// Draws the next token from `logits`. Masked tokens are never selected.
/// Greedy settings return the argmax (ties to the lower id) without
/// consuming randomness.
pub fn sample_next<R: Rng + ?Sized>(logits: &[f64], sampler: &Sampler, rng: &mut R) -> Result<TokenId, DecodeError> {
    sampler.validate()?;
    if sampler.temperature <= GREEDY_TEMPERATURE {
        return argmax(logits).ok_or(DecodeError::FullyMasked);
    }
    if !logits.iter().any(|x| x.is_finite()) {
        return Err(DecodeError::FullyMasked);
    }
    let mut scaled: Vec<f64> = logits.iter().map(|&x| x / sampler.temperature).collect();
    truncate(&mut scaled, sampler.truncation);
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last = Some(i);
            if u < cumulative {
                return Ok(i as TokenId);
            }
        }
    }
    last.map(|i| i as TokenId).ok_or(DecodeError::FullyMasked)
}

/// One generated step, recorded when tracing.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub token: TokenId,
    /// Five most probable tokens under the adjusted distribution.
    pub top: Vec<(TokenId, f64)>,
    pub masked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Newly generated tokens, excluding the prompt.
    pub tokens: Vec<TokenId>,
    /// Number of model queries made: three per generated token.
    pub source_queries: usize,
    pub trace: Vec<StepTrace>,
}

/// A base model steered by a forget-side and a retain-side model.
pub struct DivergenceDecoder<'a> {
    pub base: &'a dyn LogitSource,
    pub forget_side: &'a dyn LogitSource,
    pub retain_side: &'a dyn LogitSource,
    pub config: DecodeConfig,
}

impl<'a> DivergenceDecoder<'a> {
    pub fn new(
        base: &'a dyn LogitSource,
        forget_side: &'a dyn LogitSource,
        retain_side: &'a dyn LogitSource,
        config: DecodeConfig,
    ) -> Result<Self, DecodeError> {
        let sizes = [base.vocab_size(), forget_side.vocab_size(), retain_side.vocab_size()];
        if sizes[1] != sizes[0] || sizes[2] != sizes[0] {
            return Err(DecodeError::VocabMismatch(sizes));
        }
        config.validate(sizes[0])?;
        Ok(Self { base, forget_side, retain_side, config })
    }

    pub fn vocab_size(&self) -> usize {
        self.base.vocab_size()
    }

    /// Same models, different config.
    pub fn with_config(&self, config: DecodeConfig) -> Result<DivergenceDecoder<'a>, DecodeError> {
        Self::new(self.base, self.forget_side, self.retain_side, config)
    }

    pub fn adjusted_logits(&self, prefix: &[TokenId]) -> Result<LogitVector, DecodeError> {
        let base = self.base.logits(prefix)?;
        let forget = self.forget_side.logits(prefix)?;
        let retain = self.retain_side.logits(prefix)?;
        adjust(&base, &forget, &retain, self.config.mode)
    }

    /// Softmax of the adjusted logits at temperature 1, without truncation.
    pub fn adjusted_distribution(&self, prefix: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
        let logits = self.adjusted_logits(prefix)?;
        if !logits.has_finite() {
            return Err(DecodeError::FullyMasked);
        }
        Ok(softmax(&logits))
    }

    pub fn generate(&self, prompt: &[TokenId]) -> Result<Generation, DecodeError> {
        self.run(prompt, false)
    }

    /// Like [`generate`](Self::generate), also recording the top-5 adjusted
    /// probabilities at each step.
    pub fn generate_traced(&self, prompt: &[TokenId]) -> Result<Generation, DecodeError> {
        self.run(prompt, true)
    }

    fn run(&self, prompt: &[TokenId], trace: bool) -> Result<Generation, DecodeError> {
        if prompt.first() != Some(&BOS) {
            return Err(DecodeError::MissingBos);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let sampler = self.config.sampler();
        let mut prefix = prompt.to_vec();
        let mut out = Generation { tokens: Vec::new(), source_queries: 0, trace: Vec::new() };
        for _ in 0..self.config.max_new_tokens {
            let logits = self.adjusted_logits(&prefix)?;
            out.source_queries += 3;
            let token = sample_next(&logits, &sampler, &mut rng)?;
            if trace {
                let probs = softmax(&logits);
                let top = descending(&probs).into_iter().take(5).map(|i| (i as TokenId, probs[i])).collect();
                out.trace.push(StepTrace { token, top, masked: logits.masked_count() });
            }
            out.tokens.push(token);
            prefix.push(token);
            if token == EOS {
                break;
            }
        }
        Ok(out)
    }
}
