//! Count-based n-gram language models scored with Stupid Backoff.
//!
//! Counting convention: each sentence starts with `<s>` (added if missing)
//! and is left-padded with further `<s>` so the first real token sees a full
//! context of `order - 1` sentence-start markers. Every non-`<s>` token is a
//! prediction target and contributes one count at each order `1..=order`.
//! `<s>` itself is counted once per sentence in the unigram table only.
//!
//! Scores are unnormalized relative frequencies:
//!
//! ```text
//! S(w | c) = count(c w) / count(c)     if count(c w) > 0
//!          = lambda * S(w | c[1..])    otherwise
//! S(w)     = count(w) / total_tokens
//! ```
//!
//! where `count(c)` is the number of times `c` was the context of a target
//! and `total_tokens` excludes `<s>`. Tokens never seen as a target score
//! `floor_score`.

mod format;

use std::collections::HashMap;

use thiserror::Error;

use crate::corpus::{TokenId, TokenSeq, BOS};
use crate::logits::{LogitSource, LogitVector, SourceError};

pub use format::{load_lm, read_lm, save_lm, write_lm, ModelFormatError, FORMAT_VERSION, MAGIC};

/// Default Stupid Backoff multiplier.
pub const DEFAULT_LAMBDA: f64 = 0.4;

#[derive(Debug, Error, PartialEq)]
pub enum NGramError {
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("corpus contains no prediction targets")]
    EmptyCorpus,
    #[error("backoff factor must lie in (0, 1], got {0}")]
    InvalidLambda(f64),
    #[error("vocabulary size {vocab_size} does not cover token id {max_id}")]
    VocabTooSmall { vocab_size: usize, max_id: TokenId },
}

/// Continuations observed after one context.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextEntry {
    total: u64,
    /// Sorted by token id.
    children: Vec<(TokenId, u64)>,
}

impl ContextEntry {
    fn from_map(map: HashMap<TokenId, u64>) -> Self {
        let mut children: Vec<_> = map.into_iter().collect();
        children.sort_unstable();
        Self::from_sorted(children)
    }

    pub(crate) fn from_sorted(children: Vec<(TokenId, u64)>) -> Self {
        let total = children.iter().map(|&(_, n)| n).sum();
        Self { total, children }
    }

    /// Sum of all child counts.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn children(&self) -> &[(TokenId, u64)] {
        &self.children
    }

    pub fn count(&self, token: TokenId) -> u64 {
        self.children.binary_search_by_key(&token, |&(t, _)| t).map_or(0, |i| self.children[i].1)
    }
}

/// N-gram count tables for orders `1..=order`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NGramCounts {
    order: usize,
    /// `tables[j]` maps contexts of length `j` to their continuations.
    tables: Vec<HashMap<Vec<TokenId>, ContextEntry>>,
    total_tokens: u64,
    sentences: u64,
}

impl NGramCounts {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Unigram denominator: number of prediction targets (excludes `<s>`).
    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    /// Number of sentences counted; equals the unigram count of `<s>`.
    pub fn sentences(&self) -> u64 {
        self.sentences
    }

    pub fn context(&self, context: &[TokenId]) -> Option<&ContextEntry> {
        self.tables.get(context.len())?.get(context)
    }

    /// Count of the n-gram `ngram` (context followed by its last token).
    pub fn count(&self, ngram: &[TokenId]) -> u64 {
        match ngram.split_last() {
            Some((&token, context)) => self.context(context).map_or(0, |e| e.count(token)),
            None => 0,
        }
    }

    pub fn unigram_count(&self, token: TokenId) -> u64 {
        self.tables[0].get(&[][..]).map_or(0, |e| e.count(token))
    }

    /// Contexts of length `len` in sorted order.
    pub fn contexts(&self, len: usize) -> Vec<(&[TokenId], &ContextEntry)> {
        let mut out: Vec<_> = self.tables[len].iter().map(|(k, v)| (k.as_slice(), v)).collect();
        out.sort_unstable_by(|a, b| a.0.cmp(b.0));
        out
    }

    pub fn max_token_id(&self) -> Option<TokenId> {
        self.tables.iter().flat_map(|t| t.iter()).flat_map(|(ctx, e)| {
            ctx.iter().copied().chain(e.children.iter().map(|&(t, _)| t))
        }).max()
    }

    /// Multiplies every count by `factor`.
    pub fn scaled(&self, factor: u64) -> Self {
        let tables = self
            .tables
            .iter()
            .map(|t| {
                t.iter()
                    .map(|(k, e)| {
                        let children = e.children.iter().map(|&(w, n)| (w, n * factor)).collect();
                        (k.clone(), ContextEntry::from_sorted(children))
                    })
                    .collect()
            })
            .collect();
        Self {
            order: self.order,
            tables,
            total_tokens: self.total_tokens * factor,
            sentences: self.sentences * factor,
        }
    }

    pub(crate) fn from_parts(
        order: usize,
        tables: Vec<HashMap<Vec<TokenId>, ContextEntry>>,
        sentences: u64,
    ) -> Self {
        let total_tokens = tables[0]
            .get(&[][..])
            .map_or(0, |e| e.children.iter().filter(|&&(t, _)| t != BOS).map(|&(_, n)| n).sum());
        Self { order, tables, total_tokens, sentences }
    }
}

/// Counts n-grams of orders `1..=order` over `corpus`.
pub fn train_counts(corpus: &[TokenSeq], order: usize) -> Result<NGramCounts, NGramError> {
    if order == 0 {
        return Err(NGramError::InvalidOrder);
    }
    let mut raw: Vec<HashMap<Vec<TokenId>, HashMap<TokenId, u64>>> = vec![HashMap::new(); order];
    let pad = order.saturating_sub(2);
    let mut sentences = 0u64;
    let mut padded = Vec::new();
    for sentence in corpus {
        padded.clear();
        padded.extend(std::iter::repeat_n(BOS, pad));
        if sentence.first() != Some(&BOS) {
            padded.push(BOS);
        }
        padded.extend_from_slice(sentence);
        sentences += 1;
        *raw[0].entry(Vec::new()).or_default().entry(BOS).or_default() += 1;

        for j in pad + 1..padded.len() {
            let token = padded[j];
            if token == BOS {
                continue;
            }
            for m in 1..=order {
                let context = &padded[j + 1 - m..j];
                let entry = match raw[m - 1].get_mut(context) {
                    Some(e) => e,
                    None => raw[m - 1].entry(context.to_vec()).or_default(),
                };
                *entry.entry(token).or_default() += 1;
            }
        }
    }
    let tables = raw
        .into_iter()
        .map(|t| t.into_iter().map(|(k, v)| (k, ContextEntry::from_map(v))).collect())
        .collect();
    let counts = NGramCounts::from_parts(order, tables, sentences);
    if counts.total_tokens == 0 {
        return Err(NGramError::EmptyCorpus);
    }
    Ok(counts)
}

/// A Stupid Backoff language model over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct BackoffLM {
    counts: NGramCounts,
    vocab_size: usize,
    lambda: f64,
    floor_score: f64,
    /// `unigram_logits[j]`: log score of every token after backing off from a
    /// context of length `j` all the way to the unigram table.
    unigram_logits: Vec<Vec<f64>>,
}

impl BackoffLM {
    /// Builds a model with the default floor `1 / (total_tokens * vocab_size)`.
    pub fn new(counts: NGramCounts, vocab_size: usize, lambda: f64) -> Result<Self, NGramError> {
        let floor = 1.0 / (counts.total_tokens as f64 * vocab_size as f64);
        Self::with_floor(counts, vocab_size, lambda, floor)
    }

    pub fn with_floor(counts: NGramCounts, vocab_size: usize, lambda: f64, floor_score: f64) -> Result<Self, NGramError> {
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(NGramError::InvalidLambda(lambda));
        }
        if let Some(max_id) = counts.max_token_id() {
            if max_id as usize >= vocab_size {
                return Err(NGramError::VocabTooSmall { vocab_size, max_id });
            }
        }
        let mut lm = Self { counts, vocab_size, lambda, floor_score, unigram_logits: Vec::new() };
        lm.unigram_logits = (0..lm.counts.order)
            .map(|backoffs| (0..vocab_size as TokenId).map(|w| lm.unigram_level(w, backoffs).ln()).collect())
            .collect();
        Ok(lm)
    }

    /// Trains counts and wraps them with the default floor.
    pub fn train(corpus: &[TokenSeq], order: usize, vocab_size: usize, lambda: f64) -> Result<Self, NGramError> {
        Self::new(train_counts(corpus, order)?, vocab_size, lambda)
    }

    pub fn counts(&self) -> &NGramCounts {
        &self.counts
    }

    pub fn order(&self) -> usize {
        self.counts.order
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn floor_score(&self) -> f64 {
        self.floor_score
    }

    fn scored(&self, token: TokenId) -> bool {
        token != BOS && (token as usize) < self.vocab_size && self.counts.unigram_count(token) > 0
    }

    fn backed_off(&self, mut value: f64, backoffs: usize) -> f64 {
        for _ in 0..backoffs {
            value *= self.lambda;
        }
        value
    }

    fn unigram_level(&self, token: TokenId, backoffs: usize) -> f64 {
        if !self.scored(token) {
            return self.floor_score;
        }
        let value = self.counts.unigram_count(token) as f64 / self.counts.total_tokens as f64;
        self.backed_off(value, backoffs)
    }

    /// Stupid Backoff score of `token` after `context`. Only the trailing
    /// `order - 1` context tokens are used. Always strictly positive; not a
    /// normalized probability.
    pub fn sb_score(&self, context: &[TokenId], token: TokenId) -> f64 {
        if !self.scored(token) {
            return self.floor_score;
        }
        let context = &context[context.len().saturating_sub(self.order() - 1)..];
        for start in 0..context.len() {
            let suffix = &context[start..];
            if let Some(entry) = self.counts.context(suffix) {
                let n = entry.count(token);
                if n > 0 {
                    return self.backed_off(n as f64 / entry.total as f64, start);
                }
            }
        }
        self.unigram_level(token, context.len())
    }

    /// The context window the model uses for `prefix`: its last `order - 1`
    /// tokens after left-padding with `<s>`.
    pub fn context_for(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        let width = self.order() - 1;
        let take = prefix.len().min(width);
        let mut ctx = vec![BOS; width - take];
        ctx.extend_from_slice(&prefix[prefix.len() - take..]);
        ctx
    }

    /// `ln S(v | context)` for every token `v`.
    pub fn lm_logits(&self, prefix: &[TokenId]) -> Result<LogitVector, SourceError> {
        if prefix.is_empty() {
            return Err(SourceError::EmptyPrefix);
        }
        if let Some(&id) = prefix.iter().find(|&&id| id as usize >= self.vocab_size) {
            return Err(SourceError::TokenOutOfRange { id, vocab_size: self.vocab_size });
        }
        let context = self.context_for(prefix);
        let width = context.len();
        let mut out = self.unigram_logits[width].clone();
        // Shortest suffix first so longer matches overwrite shorter ones.
        for len in 1..=width {
            let start = width - len;
            if let Some(entry) = self.counts.context(&context[start..]) {
                let total = entry.total as f64;
                for &(w, n) in &entry.children {
                    out[w as usize] = self.backed_off(n as f64 / total, start).ln();
                }
            }
        }
        Ok(LogitVector::new(out))
    }
}

impl LogitSource for BackoffLM {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn logits(&self, prefix: &[TokenId]) -> Result<LogitVector, SourceError> {
        self.lm_logits(prefix)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::logits::softmax;

    const A: TokenId = 3;
    const B: TokenId = 4;
    const C: TokenId = 5;

    fn abab_c() -> Vec<TokenSeq> {
        vec![TokenSeq::new(vec![BOS, A, B, A, B, C, EOS])]
    }

    #[test]
    fn hand_counts_on_five_token_sentence() {
        let counts = train_counts(&abab_c(), 3).unwrap();
        assert_eq!(counts.count(&[A, B, C]), 1);
        assert_eq!(counts.count(&[A, B]), 2);
        assert_eq!(counts.count(&[B, A]), 1);
        assert_eq!(counts.count(&[BOS, BOS, A]), 1);
        assert_eq!(counts.total_tokens(), 6);
    }

    #[test]
    fn unigram_counts_are_raw_frequencies() {
        let counts = train_counts(&abab_c(), 1).unwrap();
        assert_eq!(counts.unigram_count(BOS), 1);
        assert_eq!(counts.unigram_count(A), 2);
        assert_eq!(counts.unigram_count(B), 2);
        assert_eq!(counts.unigram_count(C), 1);
        assert_eq!(counts.unigram_count(EOS), 1);
    }

    #[test]
    fn hand_scores_on_unwrapped_corpus() {
        // No </s>: the unigram denominator covers exactly the five tokens.
        let corpus = vec![TokenSeq::new(vec![A, B, A, B, C])];
        let lm = BackoffLM::train(&corpus, 3, 6, 0.4).unwrap();
        assert_eq!(lm.sb_score(&[A, B], C), 0.5);
        let s = lm.sb_score(&[C, C], C);
        assert!((s - 0.032).abs() < 1e-15, "{s}");
        assert_eq!(s, 0.4 * (0.4 * (1.0 / 5.0)));
    }

    #[test]
    fn unseen_token_gets_floor() {
        let lm = BackoffLM::train(&abab_c(), 3, 8, 0.4).unwrap();
        assert_eq!(lm.sb_score(&[A, B], 7), lm.floor_score());
        assert_eq!(lm.sb_score(&[], 7), lm.floor_score());
        assert_eq!(lm.floor_score(), 1.0 / (6.0 * 8.0));
        // <s> is never a prediction target.
        assert_eq!(lm.sb_score(&[A], BOS), lm.floor_score());
    }

    #[test]
    fn empty_corpus_and_bad_order() {
        assert_eq!(train_counts(&[], 3), Err(NGramError::EmptyCorpus));
        assert_eq!(train_counts(&[TokenSeq::new(vec![BOS])], 3), Err(NGramError::EmptyCorpus));
        assert_eq!(train_counts(&abab_c(), 0), Err(NGramError::InvalidOrder));
    }

    #[test]
    fn rejects_bad_lambda_and_small_vocab() {
        let counts = train_counts(&abab_c(), 2).unwrap();
        assert!(matches!(BackoffLM::new(counts.clone(), 6, 0.0), Err(NGramError::InvalidLambda(_))));
        assert!(matches!(BackoffLM::new(counts.clone(), 6, 1.5), Err(NGramError::InvalidLambda(_))));
        assert!(matches!(BackoffLM::new(counts, 5, 0.4), Err(NGramError::VocabTooSmall { .. })));
    }

    #[test]
    fn doubled_corpus_scores_identically() {
        let once = BackoffLM::train(&abab_c(), 3, 6, 0.4).unwrap();
        let twice_corpus: Vec<_> = abab_c().into_iter().chain(abab_c()).collect();
        let twice = BackoffLM::train(&twice_corpus, 3, 6, 0.4).unwrap();
        assert_eq!(twice.counts().count(&[A, B]), 4);
        for ctx in [&[A, B][..], &[B, A], &[C, C], &[BOS, BOS], &[]] {
            for w in 0..6 {
                let (x, y) = (once.sb_score(ctx, w), twice.sb_score(ctx, w));
                if w == 2 || w == BOS {
                    continue; // floor shrinks with data by construction
                }
                assert!(((x - y) / x).abs() <= 1e-12, "{ctx:?} {w}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn child_sums_bounded_by_lower_order_counts() {
        let corpus = vec![
            TokenSeq::new(vec![BOS, A, B, A, B, C, EOS]),
            TokenSeq::new(vec![BOS, B, B, C, EOS]),
        ];
        let counts = train_counts(&corpus, 4).unwrap();
        for len in 1..4 {
            for (ctx, entry) in counts.contexts(len) {
                let parent = if ctx.iter().all(|&t| t == BOS) {
                    counts.sentences()
                } else {
                    counts.count(ctx)
                };
                assert!(entry.total() <= parent, "{ctx:?}");
            }
        }
    }

    #[test]
    fn logits_match_scores_and_use_trailing_window() {
        let corpus = vec![
            TokenSeq::new(vec![BOS, A, B, A, B, C, EOS]),
            TokenSeq::new(vec![BOS, B, B, C, A, EOS]),
        ];
        let lm = BackoffLM::train(&corpus, 3, 7, 0.4).unwrap();
        for prefix in [&[BOS][..], &[BOS, A], &[BOS, A, B], &[BOS, C, C, A, B]] {
            let logits = lm.lm_logits(prefix).unwrap();
            let ctx = lm.context_for(prefix);
            for w in 0..7 {
                assert_eq!(logits[w as usize], lm.sb_score(&ctx, w).ln());
                assert!(logits[w as usize].is_finite());
            }
        }
        assert_eq!(lm.lm_logits(&[BOS, C, A, B]).unwrap(), lm.lm_logits(&[BOS, B, B, A, B]).unwrap());
    }

    #[test]
    fn seen_continuations_proportional_to_counts() {
        let corpus = vec![
            TokenSeq::new(vec![BOS, A, B, EOS]),
            TokenSeq::new(vec![BOS, A, B, EOS]),
            TokenSeq::new(vec![BOS, A, C, EOS]),
        ];
        let lm = BackoffLM::train(&corpus, 2, 6, 0.4).unwrap();
        let l = lm.lm_logits(&[BOS, A]).unwrap();
        assert!(((l[B as usize] - l[C as usize]).exp() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_counts_give_constant_logits() {
        let corpus = vec![TokenSeq::new(vec![BOS, 2, A, B, C, EOS])];
        let lm = BackoffLM::train(&corpus, 1, 6, 0.4).unwrap();
        let l = lm.lm_logits(&[BOS]).unwrap();
        assert!(l[1..].iter().all(|&x| x == l[1]));
    }

    #[test]
    fn softmax_of_logits_equals_softmax_of_normalized_scores() {
        let lm = BackoffLM::train(&abab_c(), 3, 6, 0.4).unwrap();
        let l = lm.lm_logits(&[BOS, A, B]).unwrap();
        let z: f64 = l.iter().map(|x| x.exp()).sum();
        let normalized: Vec<f64> = l.iter().map(|x| x - z.ln()).collect();
        for (a, b) in softmax(&l).iter().zip(softmax(&normalized)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_reject_bad_prefixes() {
        let lm = BackoffLM::train(&abab_c(), 3, 6, 0.4).unwrap();
        assert_eq!(lm.lm_logits(&[]), Err(SourceError::EmptyPrefix));
        assert!(matches!(lm.lm_logits(&[BOS, 9]), Err(SourceError::TokenOutOfRange { id: 9, .. })));
    }
}
