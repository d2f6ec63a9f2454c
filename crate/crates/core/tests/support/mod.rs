//! Naive reference implementations used as test oracles. Written for
//! clarity, not speed, and sharing no code with the library beyond types.

#![allow(dead_code)]

use divdec::corpus::{TokenId, TokenSeq, BOS};

/// Brute-force Stupid Backoff: every query rescans the corpus.
pub struct NaiveBackoff {
    order: usize,
    vocab_size: usize,
    lambda: f64,
    /// Each sentence with `<s>` ensured at the start and `order - 2` extra
    /// `<s>` of left padding.
    padded: Vec<Vec<TokenId>>,
}

impl NaiveBackoff {
    pub fn new(corpus: &[TokenSeq], order: usize, vocab_size: usize, lambda: f64) -> Self {
        let padded = corpus
            .iter()
            .map(|s| {
                let mut p = vec![BOS; order.saturating_sub(2)];
                if s.first() != Some(&BOS) {
                    p.push(BOS);
                }
                p.extend_from_slice(s);
                p
            })
            .collect();
        Self { order, vocab_size, lambda, padded }
    }

    /// Positions that predict a token: every non-`<s>` entry.
    fn targets(&self) -> impl Iterator<Item = (&[TokenId], usize)> {
        self.padded.iter().flat_map(|s| (0..s.len()).filter(move |&j| s[j] != BOS).map(move |j| (s.as_slice(), j)))
    }

    fn preceded_by(s: &[TokenId], j: usize, context: &[TokenId]) -> bool {
        j >= context.len() && &s[j - context.len()..j] == context
    }

    pub fn total_tokens(&self) -> u64 {
        self.targets().count() as u64
    }

    pub fn count_with(&self, context: &[TokenId], token: TokenId) -> u64 {
        self.targets().filter(|&(s, j)| s[j] == token && Self::preceded_by(s, j, context)).count() as u64
    }

    pub fn context_total(&self, context: &[TokenId]) -> u64 {
        self.targets().filter(|&(s, j)| Self::preceded_by(s, j, context)).count() as u64
    }

    pub fn floor(&self) -> f64 {
        1.0 / (self.total_tokens() as f64 * self.vocab_size as f64)
    }

    pub fn score(&self, context: &[TokenId], token: TokenId) -> f64 {
        let keep = context.len().min(self.order - 1);
        self.recurse(&context[context.len() - keep..], token)
    }

    fn recurse(&self, context: &[TokenId], token: TokenId) -> f64 {
        if token == BOS || self.count_with(&[], token) == 0 {
            return self.floor();
        }
        if context.is_empty() {
            return self.count_with(&[], token) as f64 / self.total_tokens() as f64;
        }
        let n = self.count_with(context, token);
        if n > 0 {
            n as f64 / self.context_total(context) as f64
        } else {
            self.lambda * self.recurse(&context[1..], token)
        }
    }
}

/// Top-`k` ids of `forget - retain` by full sort: descending value, ties to
/// the lower id.
pub fn sort_top_k(forget: &[f64], retain: &[f64], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = forget.iter().zip(retain).map(|(p, q)| p - q).zip(0..).collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut top: Vec<usize> = scored.into_iter().take(k).map(|(_, i)| i).collect();
    top.sort_unstable();
    top
}

/// Softmax written out directly, for comparison with the library's.
pub fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Probability-space product of experts, `P (q/p)^alpha / Z`, computed
/// naively without log-space stabilization.
pub fn naive_poe(base: &[f64], forget: &[f64], retain: &[f64], alpha: f64) -> Vec<f64> {
    let w: Vec<f64> = (0..base.len()).map(|v| base[v] * (retain[v] / forget[v]).powf(alpha)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}
