//! Unlearning evaluation: forget and utility metrics, hyperparameter sweeps,
//! distance-to-retrain selection, retrain-oracle comparison and
//! sequential/growing forget-set scenarios.
//!
//! The forget metric is an extraction rate (greedy exact match of a fact's
//! answer from a verbatim or cloze prompt). The utility metric is
//! perplexity on retain text. Both are compared against two references:
//! the unadjusted base model (target) and a base-architecture model trained
//! on retain data only (retrain).

mod report;
mod scenario;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FactRecord, TokenId, TokenSeq};
use crate::decode::{adjust, AdjustMode, DecodeConfig, DecodeError, DivergenceDecoder};
use crate::logits::{softmax, LogitSource};
use crate::ngram::NGramError;

pub use report::{read_report, write_plot_csv, write_report, REPORT_HEADER};
pub use scenario::{run_scenario, Scenario, ScenarioAssets, ScenarioKind, ScenarioStep};

/// Probability assigned to a target token the model gives zero mass.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fact list is empty")]
    NoFacts,
    #[error("evaluation corpus has no predicted tokens")]
    EmptyCorpus,
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("duplicate config label {0} in sweep grid")]
    DuplicateLabel(String),
    #[error("prefix list is empty")]
    NoPrefixes,
    #[error("target {0} metric is zero; cannot rescale")]
    ZeroTarget(&'static str),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("malformed report at line {line}: {message}")]
    Report { line: usize, message: String },
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] NGramError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Verbatim,
    Cloze,
}

impl ProbeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeKind::Verbatim => "verbatim",
            ProbeKind::Cloze => "cloze",
        }
    }

    pub fn prompt<'f>(&self, fact: &'f FactRecord) -> &'f TokenSeq {
        match self {
            ProbeKind::Verbatim => &fact.verbatim_prompt,
            ProbeKind::Cloze => &fact.cloze_prompt,
        }
    }
}

impl std::str::FromStr for ProbeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "verbatim" => Ok(ProbeKind::Verbatim),
            "cloze" => Ok(ProbeKind::Cloze),
            other => Err(format!("unknown probe kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub config_label: String,
    pub probe_kind: ProbeKind,
    /// Extraction rate in `[0, 1]`.
    pub forget_metric: f64,
    /// Retain-text perplexity.
    pub utility_metric: f64,
    /// Target tokens that received zero probability.
    pub clip_count: u64,
}

pub const TARGET_LABEL: &str = "target";
pub const RETRAIN_LABEL: &str = "retrain";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub probe: ProbeKind,
    /// One point per sweep config, ordered by label.
    pub points: Vec<MetricPoint>,
    pub target: MetricPoint,
    pub retrain: MetricPoint,
    /// Whether each axis is divided by the target's value before selection.
    pub rescale_forget: bool,
    pub rescale_utility: bool,
    pub best: Option<String>,
    /// Forget metric of each config re-measured on an earlier forget set.
    pub original: Vec<MetricPoint>,
}

impl EvalReport {
    /// Runs [`select_best`] and records the result.
    pub fn select(&mut self) -> Result<&str, EvalError> {
        let label = select_best(self)?;
        Ok(self.best.insert(label))
    }

    pub fn point(&self, label: &str) -> Option<&MetricPoint> {
        self.points.iter().find(|p| p.config_label == label)
    }

    pub fn best_point(&self) -> Option<&MetricPoint> {
        self.best.as_deref().and_then(|l| self.point(l))
    }

    pub fn original_point(&self, label: &str) -> Option<&MetricPoint> {
        self.original.iter().find(|p| p.config_label == label)
    }

    fn rescaled(&self, p: &MetricPoint) -> (f64, f64) {
        let f = if self.rescale_forget { p.forget_metric / self.target.forget_metric } else { p.forget_metric };
        let u = if self.rescale_utility { p.utility_metric / self.target.utility_metric } else { p.utility_metric };
        (f, u)
    }

    /// Euclidean distance of `p` to the retrain point after rescaling.
    pub fn distance_to_retrain(&self, p: &MetricPoint) -> f64 {
        let (f, u) = self.rescaled(p);
        let (rf, ru) = self.rescaled(&self.retrain);
        (f - rf).hypot(u - ru)
    }
}

/// Config closest to the retrain point, ties to the smallest label.
pub fn select_best(report: &EvalReport) -> Result<String, EvalError> {
    if report.rescale_forget && report.target.forget_metric == 0.0 {
        return Err(EvalError::ZeroTarget("forget"));
    }
    if report.rescale_utility && report.target.utility_metric == 0.0 {
        return Err(EvalError::ZeroTarget("utility"));
    }
    report
        .points
        .iter()
        .map(|p| (report.distance_to_retrain(p), &p.config_label))
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
        .map(|(_, label)| label.clone())
        .ok_or(EvalError::EmptyGrid)
}

/// A model that yields a normalized next-token distribution.
pub trait NextTokenModel {
    fn distribution(&self, prefix: &[TokenId]) -> Result<Vec<f64>, EvalError>;
}

impl NextTokenModel for DivergenceDecoder<'_> {
    fn distribution(&self, prefix: &[TokenId]) -> Result<Vec<f64>, EvalError> {
        Ok(self.adjusted_distribution(prefix)?)
    }
}

/// Softmax over a single source's logits.
pub struct Normalized<S>(pub S);

impl<S: LogitSource> NextTokenModel for Normalized<S> {
    fn distribution(&self, prefix: &[TokenId]) -> Result<Vec<f64>, EvalError> {
        let logits = self.0.logits(prefix).map_err(DecodeError::from)?;
        if !logits.has_finite() {
            return Err(DecodeError::FullyMasked.into());
        }
        Ok(softmax(&logits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perplexity {
    pub value: f64,
    pub clipped: u64,
    pub predicted: u64,
}

#[derive(Default)]
struct NllSum {
    nll: f64,
    clipped: u64,
    predicted: u64,
}

impl NllSum {
    fn add(&mut self, prob: f64) {
        if prob > 0.0 {
            self.nll -= prob.ln();
        } else {
            self.nll -= PROB_FLOOR.ln();
            self.clipped += 1;
        }
        self.predicted += 1;
    }

    fn finish(self) -> Result<Perplexity, EvalError> {
        if self.predicted == 0 {
            return Err(EvalError::EmptyCorpus);
        }
        Ok(Perplexity { value: (self.nll / self.predicted as f64).exp(), clipped: self.clipped, predicted: self.predicted })
    }
}

/// `exp` of the mean negative log-probability of every token after the
/// first in each sequence. Zero-probability targets count as
/// [`PROB_FLOOR`] and are tallied in `clipped`.
pub fn perplexity<M: NextTokenModel + ?Sized>(model: &M, corpus: &[TokenSeq]) -> Result<Perplexity, EvalError> {
    let mut sum = NllSum::default();
    for seq in corpus {
        for t in 1..seq.len() {
            let dist = model.distribution(&seq[..t])?;
            sum.add(dist[seq[t] as usize]);
        }
    }
    sum.finish()
}

/// Perplexity of every mode in `modes` at once. Each position queries the
/// three sources once; results equal [`perplexity`] over the corresponding
/// decoders bit for bit.
pub fn sweep_perplexity(
    base: &dyn LogitSource,
    forget_side: &dyn LogitSource,
    retain_side: &dyn LogitSource,
    modes: &[AdjustMode],
    corpus: &[TokenSeq],
) -> Result<Vec<Perplexity>, EvalError> {
    let mut sums: Vec<NllSum> = modes.iter().map(|_| NllSum::default()).collect();
    for seq in corpus {
        for t in 1..seq.len() {
            let prefix = &seq[..t];
            let lb = base.logits(prefix).map_err(DecodeError::from)?;
            let lp = forget_side.logits(prefix).map_err(DecodeError::from)?;
            let lq = retain_side.logits(prefix).map_err(DecodeError::from)?;
            for (mode, sum) in modes.iter().zip(&mut sums) {
                let adjusted = adjust(&lb, &lp, &lq, *mode)?;
                if !adjusted.has_finite() {
                    return Err(DecodeError::FullyMasked.into());
                }
                sum.add(softmax(&adjusted)[seq[t] as usize]);
            }
        }
    }
    sums.into_iter().map(NllSum::finish).collect()
}

/// Fraction of facts whose greedy continuation of the probe prompt equals
/// the answer exactly. Generation runs for the answer's length.
pub fn extraction_rate(dec: &DivergenceDecoder<'_>, facts: &[FactRecord], probe: ProbeKind) -> Result<f64, EvalError> {
    if facts.is_empty() {
        return Err(EvalError::NoFacts);
    }
    let mut hits = 0usize;
    for fact in facts {
        let greedy = dec.with_config(DecodeConfig::greedy(dec.config.mode, fact.answer.len()))?;
        let out = greedy.generate(probe.prompt(fact))?;
        if out.tokens.as_slice() == fact.answer.ids() {
            hits += 1;
        }
    }
    Ok(hits as f64 / facts.len() as f64)
}

/// Models needed for a sweep.
#[derive(Clone, Copy)]
pub struct SweepModels<'a> {
    pub base: &'a dyn LogitSource,
    pub forget_side: &'a dyn LogitSource,
    pub retain_side: &'a dyn LogitSource,
    /// Base architecture trained on retain data only.
    pub retrain: &'a dyn LogitSource,
}

impl<'a> SweepModels<'a> {
    pub fn decoder(&self, mode: AdjustMode) -> Result<DivergenceDecoder<'a>, DecodeError> {
        DivergenceDecoder::new(self.base, self.forget_side, self.retain_side, DecodeConfig::greedy(mode, 1))
    }

    fn retrain_decoder(&self) -> Result<DivergenceDecoder<'a>, DecodeError> {
        DivergenceDecoder::new(self.retrain, self.retrain, self.retrain, DecodeConfig::greedy(AdjustMode::None, 1))
    }
}

/// Evaluates every mode in `grid` plus the target and retrain references.
/// The forget metric is measured on `facts`, utility on `utility_corpus`.
/// When `original` is given, each config's forget metric is also measured
/// on those facts. Selection is left to [`EvalReport::select`].
pub fn sweep(
    models: &SweepModels<'_>,
    grid: &[AdjustMode],
    facts: &[FactRecord],
    probe: ProbeKind,
    utility_corpus: &[TokenSeq],
    original: Option<&[FactRecord]>,
) -> Result<EvalReport, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let mut grid = grid.to_vec();
    grid.sort_by_cached_key(|m| m.label());
    if let Some(w) = grid.windows(2).find(|w| w[0].label() == w[1].label()) {
        return Err(EvalError::DuplicateLabel(w[0].label()));
    }

    let mut modes = grid.clone();
    modes.push(AdjustMode::None);
    let ppl = sweep_perplexity(models.base, models.forget_side, models.retain_side, &modes, utility_corpus)?;
    let target_ppl = ppl[grid.len()];

    let point = |label: String, forget: f64, ppl: Perplexity| MetricPoint {
        config_label: label,
        probe_kind: probe,
        forget_metric: forget,
        utility_metric: ppl.value,
        clip_count: ppl.clipped,
    };

    let mut points = Vec::with_capacity(grid.len());
    let mut original_points = Vec::new();
    for (mode, ppl) in grid.iter().zip(&ppl) {
        let dec = models.decoder(*mode)?;
        points.push(point(mode.label(), extraction_rate(&dec, facts, probe)?, *ppl));
        if let Some(orig) = original {
            original_points.push(point(mode.label(), extraction_rate(&dec, orig, probe)?, *ppl));
        }
    }

    let target = point(TARGET_LABEL.to_owned(), extraction_rate(&models.decoder(AdjustMode::None)?, facts, probe)?, target_ppl);
    let retrain_ppl = perplexity(&Normalized(models.retrain), utility_corpus)?;
    let retrain = point(RETRAIN_LABEL.to_owned(), extraction_rate(&models.retrain_decoder()?, facts, probe)?, retrain_ppl);

    Ok(EvalReport {
        probe,
        points,
        target,
        retrain,
        rescale_forget: true,
        rescale_utility: true,
        best: None,
        original: original_points,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrainGap {
    pub kl_adjusted: f64,
    pub kl_base: f64,
}

fn kl_floored(q: &[f64], m: &[f64]) -> f64 {
    q.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a.ln() - b.max(PROB_FLOOR).ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Mean KL divergence from the retrain oracle's distribution to the
/// adjusted and to the unadjusted base distribution over `prefixes`.
/// Zero model probabilities are raised to [`PROB_FLOOR`].
pub fn retrain_gap(
    dec: &DivergenceDecoder<'_>,
    retrain: &dyn LogitSource,
    prefixes: &[Vec<TokenId>],
) -> Result<RetrainGap, EvalError> {
    if prefixes.is_empty() {
        return Err(EvalError::NoPrefixes);
    }
    let oracle = Normalized(retrain);
    let base = Normalized(dec.base);
    let (mut adj_sum, mut base_sum) = (0.0, 0.0);
    for prefix in prefixes {
        let q = oracle.distribution(prefix)?;
        adj_sum += kl_floored(&q, &dec.adjusted_distribution(prefix)?);
        base_sum += kl_floored(&q, &base.distribution(prefix)?);
    }
    let n = prefixes.len() as f64;
    Ok(RetrainGap { kl_adjusted: adj_sum / n, kl_base: base_sum / n })
}

/// Trigram-scale sweep grid: linear alpha 5..=30 by 5, rank k in {1,2,3,5,10}.
pub fn default_grid() -> Vec<AdjustMode> {
    let linear = (1..=6).map(|i| AdjustMode::Linear { alpha: 5.0 * i as f64 });
    let rank = [1, 2, 3, 5, 10].into_iter().map(|k| AdjustMode::Rank { k });
    linear.chain(rank).collect()
}
