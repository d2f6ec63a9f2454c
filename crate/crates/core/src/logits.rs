//! Logit vectors and the capability of producing them for a prefix.

use std::ops::Deref;

use thiserror::Error;

use crate::corpus::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("prefix must be non-empty")]
    EmptyPrefix,
    #[error("token id {id} is outside a vocabulary of {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
}

/// Per-token scores over the whole vocabulary, interpreted as
/// log-probabilities up to a per-prefix additive constant. `-inf` is the
/// mask sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn masked_count(&self) -> usize {
        self.0.iter().filter(|&&x| x == f64::NEG_INFINITY).count()
    }

    pub fn has_finite(&self) -> bool {
        self.0.iter().any(|x| x.is_finite())
    }
}

impl Deref for LogitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for LogitVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Anything that scores the next token given a prefix.
///
/// Returned vectors have length [`vocab_size`](Self::vocab_size) and finite
/// entries; masking happens only downstream.
pub trait LogitSource: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn logits(&self, prefix: &[TokenId]) -> Result<LogitVector, SourceError>;
}

impl<T: LogitSource + ?Sized> LogitSource for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn logits(&self, prefix: &[TokenId]) -> Result<LogitVector, SourceError> {
        (**self).logits(prefix)
    }
}

/// A source that ignores the prefix and always returns the same logits.
/// Used when an external process supplies the base model's scores.
#[derive(Debug, Clone)]
pub struct FixedLogits(pub LogitVector);

impl LogitSource for FixedLogits {
    fn vocab_size(&self) -> usize {
        self.0.len()
    }

    fn logits(&self, _prefix: &[TokenId]) -> Result<LogitVector, SourceError> {
        Ok(self.0.clone())
    }
}

/// Numerically stable softmax. Masked entries get probability exactly zero.
/// Returns all zeros when every entry is masked.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![0.0; logits.len()];
    }
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}

/// Index of the largest entry, ties to the lower id. `None` when everything
/// is masked.
pub fn argmax(logits: &[f64]) -> Option<TokenId> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in logits.iter().enumerate() {
        if x == f64::NEG_INFINITY || x.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i as TokenId)
}
