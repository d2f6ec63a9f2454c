//! Divergence decoding over count-based language models, with an
//! unlearning evaluation harness.

pub mod corpus;
pub mod cost;
pub mod decode;
pub mod eval;
pub mod logits;
pub mod ngram;
pub mod poe;
pub mod service;

pub use corpus::{TokenId, TokenSeq, Vocabulary, BOS, EOS, UNK};
pub use decode::{AdjustMode, DecodeConfig, DecodeError, DivergenceDecoder, Truncation};
pub use logits::{LogitSource, LogitVector};
pub use ngram::BackoffLM;
