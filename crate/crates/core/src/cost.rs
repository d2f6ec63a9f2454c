//! FLOP accounting for divergence decoding against gradient-ascent
//! unlearning of the large model.
//!
//! With `N` large-model and `n` small-model parameters, inference costs
//! `2N` FLOPs per token for the base model alone and `2(N + 2n)` with both
//! auxiliaries. Training the two auxiliaries costs `6 n e_n (d_r + d_f)`;
//! one unregularized gradient-ascent pass over the forget set costs
//! `6 N e_N d_f`. Divergence decoding becomes the more expensive option once
//!
//! ```text
//! I >= 3 N e_N d_f / (2n) - 3 e_n (d_r + d_f) / 2
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("small-model parameter count must be positive")]
    ZeroSmallModel,
    #[error("{0} must be finite and non-negative")]
    Negative(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Large-model parameter count `N`.
    pub large_params: f64,
    /// Parameter count `n` of each small model.
    pub small_params: f64,
    pub large_epochs: f64,
    pub small_epochs: f64,
    pub retain_tokens: f64,
    pub forget_tokens: f64,
    pub inference_tokens: f64,
}

impl CostParams {
    fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("large_params", self.large_params),
            ("small_params", self.small_params),
            ("large_epochs", self.large_epochs),
            ("small_epochs", self.small_epochs),
            ("retain_tokens", self.retain_tokens),
            ("forget_tokens", self.forget_tokens),
            ("inference_tokens", self.inference_tokens),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value >= 0.0) {
                return Err(CostError::Negative(name));
            }
        }
        Ok(())
    }

    /// Total FLOPs of divergence decoding: auxiliary training plus inference.
    pub fn dd_total(&self) -> f64 {
        6.0 * self.small_params * self.small_epochs * (self.retain_tokens + self.forget_tokens)
            + 2.0 * (self.large_params + 2.0 * self.small_params) * self.inference_tokens
    }

    /// Total FLOPs of gradient ascent on the large model plus plain inference.
    pub fn gradient_ascent_total(&self) -> f64 {
        6.0 * self.large_params * self.large_epochs * self.forget_tokens
            + 2.0 * self.large_params * self.inference_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceFlops {
    pub base: f64,
    pub dd: f64,
}

impl InferenceFlops {
    /// Relative overhead of the auxiliaries, in percent.
    pub fn overhead_pct(&self) -> f64 {
        if self.base == 0.0 {
            0.0
        } else {
            100.0 * (self.dd - self.base) / self.base
        }
    }
}

pub fn inference_flops(large_params: f64, small_params: f64, inference_tokens: f64) -> InferenceFlops {
    InferenceFlops {
        base: 2.0 * large_params * inference_tokens,
        dd: 2.0 * (large_params + 2.0 * small_params) * inference_tokens,
    }
}

/// Inference volume `I*` beyond which divergence decoding costs more than
/// gradient ascent. Negative means divergence decoding is cheaper at every
/// volume.
pub fn breakeven_tokens(p: &CostParams) -> Result<f64, CostError> {
    p.validate()?;
    if p.small_params == 0.0 {
        return Err(CostError::ZeroSmallModel);
    }
    Ok(3.0 * p.large_params * p.large_epochs * p.forget_tokens / (2.0 * p.small_params)
        - 3.0 * p.small_epochs * (p.retain_tokens + p.forget_tokens) / 2.0)
}

/// Whether divergence decoding is strictly cheaper at `p.inference_tokens`.
pub fn dd_cheaper(p: &CostParams) -> Result<bool, CostError> {
    Ok(p.inference_tokens < breakeven_tokens(p)?)
}
