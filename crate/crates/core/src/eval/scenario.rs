//! Repeated unlearning requests.
//!
//! * Sustainability: disjoint forget sets arrive one after another. At step
//!   `i` the forget-side model is retrained on the union of sets `1..=i`.
//! * Scaling: each step names a single, larger forget set and the
//!   forget-side model is retrained on it alone.
//!
//! Every step runs a sweep on the step's own facts, re-measures each config
//! on the first step's facts, and selects a config.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{sweep, EvalError, EvalReport, ProbeKind, SweepModels};
use crate::corpus::{FactRecord, TokenSeq};
use crate::decode::AdjustMode;
use crate::logits::LogitSource;
use crate::ngram::BackoffLM;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Sustainability,
    Scaling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    /// Fact ids per step.
    pub steps: Vec<Vec<String>>,
    #[serde(default = "default_true")]
    pub remeasure_original: bool,
}

fn as_refs(ids: &[String]) -> Vec<&str> {
    ids.iter().map(String::as_str).collect()
}

fn default_true() -> bool {
    true
}

impl Scenario {
    /// `n_steps` consecutive, equally sized chunks of `fact_ids`.
    pub fn sustainability(fact_ids: &[String], n_steps: usize) -> Self {
        let size = fact_ids.len() / n_steps.max(1);
        let steps = (0..n_steps).map(|i| fact_ids[i * size..(i + 1) * size].to_vec()).collect();
        Self { kind: ScenarioKind::Sustainability, steps, remeasure_original: true }
    }

    /// Prefixes of `fact_ids` of the given sizes.
    pub fn scaling(fact_ids: &[String], sizes: &[usize]) -> Self {
        let steps = sizes.iter().map(|&n| fact_ids[..n.min(fact_ids.len())].to_vec()).collect();
        Self { kind: ScenarioKind::Scaling, steps, remeasure_original: true }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidScenario(m));
        if self.steps.is_empty() {
            return bad("no steps".into());
        }
        if let Some(i) = self.steps.iter().position(Vec::is_empty) {
            return bad(format!("step {} is empty", i + 1));
        }
        if self.kind == ScenarioKind::Sustainability {
            let mut seen = BTreeSet::new();
            for id in self.steps.iter().flatten() {
                if !seen.insert(id) {
                    return bad(format!("fact {id} requested twice"));
                }
            }
        }
        Ok(())
    }

    /// Fact ids the forget side is trained on at `step`.
    pub fn requested(&self, step: usize) -> Vec<&str> {
        match self.kind {
            ScenarioKind::Sustainability => self.steps[..=step].iter().flatten().map(String::as_str).collect(),
            ScenarioKind::Scaling => self.steps[step].iter().map(String::as_str).collect(),
        }
    }
}

/// Fixed models and data shared by every step.
pub struct ScenarioAssets<'a> {
    pub base: &'a dyn LogitSource,
    pub retain_side: &'a dyn LogitSource,
    pub retain_docs: &'a [TokenSeq],
    pub forget_docs: &'a [TokenSeq],
    pub facts: &'a [FactRecord],
    pub utility_corpus: &'a [TokenSeq],
    pub grid: &'a [AdjustMode],
    pub probe: ProbeKind,
    pub vocab_size: usize,
    pub forget_order: usize,
    pub retrain_order: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioStep {
    /// Facts the forget side was trained on.
    pub requested: Vec<String>,
    pub report: EvalReport,
}

pub fn run_scenario(sc: &Scenario, assets: &ScenarioAssets<'_>) -> Result<Vec<ScenarioStep>, EvalError> {
    sc.validate()?;
    let by_id: HashMap<&str, &FactRecord> = assets.facts.iter().map(|f| (f.fact_id.as_str(), f)).collect();
    let lookup = |ids: &[&str]| -> Result<Vec<FactRecord>, EvalError> {
        ids.iter()
            .map(|id| by_id.get(id).map(|f| (*f).clone()).ok_or_else(|| EvalError::InvalidScenario(format!("unknown fact {id}"))))
            .collect()
    };
    let original = lookup(&as_refs(&sc.steps[0]))?;

    let mut out = Vec::with_capacity(sc.steps.len());
    for (i, step) in sc.steps.iter().enumerate() {
        let requested_ids = sc.requested(i);
        let requested = lookup(&requested_ids)?;
        let current = lookup(&as_refs(step))?;

        // A document belongs to a fact when it contains the fact's answer.
        let (forget_part, kept): (Vec<&TokenSeq>, Vec<&TokenSeq>) =
            assets.forget_docs.iter().partition(|d| requested.iter().any(|f| d.contains_run(&f.answer)));
        let forget_corpus: Vec<TokenSeq> = forget_part.into_iter().cloned().collect();
        let retrain_corpus: Vec<TokenSeq> = assets.retain_docs.iter().chain(kept).cloned().collect();
        let forget_side = BackoffLM::train(&forget_corpus, assets.forget_order, assets.vocab_size, assets.lambda)?;
        let retrain = BackoffLM::train(&retrain_corpus, assets.retrain_order, assets.vocab_size, assets.lambda)?;

        let models = SweepModels { base: assets.base, forget_side: &forget_side, retain_side: assets.retain_side, retrain: &retrain };
        let orig = sc.remeasure_original.then_some(original.as_slice());
        let mut report = sweep(&models, assets.grid, &current, assets.probe, assets.utility_corpus, orig)?;
        report.select()?;
        out.push(ScenarioStep { requested: requested_ids.into_iter().map(str::to_owned).collect(), report });
    }
    Ok(out)
}
