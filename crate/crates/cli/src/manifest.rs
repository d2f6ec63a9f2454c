//! Run manifest: a TOML file naming every input and output of a run.
//!
//! Relative paths are resolved against the directory holding the manifest.
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//!
//! [corpus]
//! retain = "data/retain.txt"
//! forget = "data/forget.txt"
//! facts = "data/facts.jsonl"
//! vocab = "models/vocab.json"
//!
//! [models]
//! base = "models/base.lm"
//! forget = "models/forget.lm"
//! retain = "models/retain.lm"
//! retrain = "models/retrain.lm"
//!
//! [decode]
//! mode = "rank"
//! k = 1
//!
//! [sweep]
//! grid = ["linear:alpha=5", "rank:k=1"]
//!
//! [scenario]
//! kind = "scaling"
//! sizes = [10, 20, 40]
//! ```

use std::path::{Path, PathBuf};

use divdec::corpus::{CorpusSpec, TokenizeMode};
use divdec::cost::CostParams;
use divdec::decode::{AdjustMode, DecodeConfig, Truncation};
use divdec::eval::{Scenario, ScenarioKind};
use divdec::eval::{default_grid, ProbeKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusPaths,
    pub models: ModelPaths,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostParams>,
    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub retain: PathBuf,
    pub forget: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub facts: Option<PathBuf>,
    pub vocab: PathBuf,
    #[serde(default)]
    pub tokenize: TokenizeMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelPaths {
    pub base: PathBuf,
    pub forget: PathBuf,
    pub retain: PathBuf,
    pub retrain: PathBuf,
    #[serde(default = "default_base_order")]
    pub base_order: usize,
    #[serde(default = "default_aux_order")]
    pub aux_order: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_base_order() -> usize {
    5
}

fn default_aux_order() -> usize {
    3
}

fn default_lambda() -> f64 {
    divdec::ngram::DEFAULT_LAMBDA
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    None,
    Linear,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub mode: ModeName,
    pub alpha: f64,
    pub k: usize,
    pub temperature: f64,
    /// `none`, `top_k=N` or `top_p=P`.
    pub truncation: String,
    pub max_new_tokens: usize,
}

impl Default for DecodeSection {
    fn default() -> Self {
        Self { mode: ModeName::None, alpha: 0.0, k: 1, temperature: 0.0, truncation: "none".into(), max_new_tokens: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Mode labels such as `linear:alpha=5` or `rank:k=2`.
    pub grid: Vec<String>,
    pub probe: String,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { grid: default_grid().iter().map(AdjustMode::label).collect(), probe: "verbatim".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
    /// Sustainability: number of equal disjoint steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_steps: Option<usize>,
    /// Scaling: cumulative forget-set size at each step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sizes: Option<Vec<usize>>,
    #[serde(default = "yes")]
    pub remeasure_original: bool,
}

fn yes() -> bool {
    true
}

/// Parameters for `generate`; the manifest seed is used.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub n_retain_facts: usize,
    pub n_forget_facts: usize,
    pub filler_tokens: usize,
    pub vocab_content_size: usize,
}

pub fn parse_truncation(s: &str) -> Result<Truncation, CliError> {
    let bad = || CliError::Usage(format!("truncation must be none, top_k=N or top_p=P, got {s:?}"));
    if s == "none" {
        return Ok(Truncation::None);
    }
    if let Some(v) = s.strip_prefix("top_k=") {
        return v.parse().map(Truncation::TopK).map_err(|_| bad());
    }
    if let Some(v) = s.strip_prefix("top_p=") {
        return v.parse().map(Truncation::TopP).map_err(|_| bad());
    }
    Err(bad())
}

pub fn parse_probe(s: &str) -> Result<ProbeKind, CliError> {
    s.parse().map_err(|_| CliError::Usage(format!("probe must be verbatim or cloze, got {s:?}")))
}

impl DecodeSection {
    pub fn adjust_mode(&self) -> AdjustMode {
        match self.mode {
            ModeName::None => AdjustMode::None,
            ModeName::Linear => AdjustMode::Linear { alpha: self.alpha },
            ModeName::Rank => AdjustMode::Rank { k: self.k },
        }
    }

    pub fn to_config(&self, seed: u64) -> Result<DecodeConfig, CliError> {
        Ok(DecodeConfig {
            mode: self.adjust_mode(),
            temperature: self.temperature,
            truncation: parse_truncation(&self.truncation)?,
            max_new_tokens: self.max_new_tokens,
            seed,
        })
    }
}

impl RunManifest {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let mut m: RunManifest = toml::from_str(text).map_err(|e| CliError::Data(format!("manifest: {e}")))?;
        m.base_dir = base_dir.to_path_buf();
        m.check()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &dir)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest fields are all representable in TOML")
    }

    /// Shape checks that need no files: grid labels, probe, truncation and
    /// scenario parameters.
    fn check(&self) -> Result<(), CliError> {
        self.grid()?;
        self.probe()?;
        parse_truncation(&self.decode.truncation).map_err(|e| CliError::Data(format!("decode: {e}")))?;
        if let Some(sc) = &self.scenario {
            match (sc.kind, &sc.n_steps, &sc.sizes) {
                (ScenarioKind::Sustainability, Some(_), None) | (ScenarioKind::Scaling, None, Some(_)) => {}
                (ScenarioKind::Sustainability, ..) => {
                    return Err(CliError::Data("sustainability scenario takes n_steps (and no sizes)".into()))
                }
                (ScenarioKind::Scaling, ..) => {
                    return Err(CliError::Data("scaling scenario takes sizes (and no n_steps)".into()))
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.resolve(&self.output_dir).join(name)
    }

    pub fn grid(&self) -> Result<Vec<AdjustMode>, CliError> {
        self.sweep
            .grid
            .iter()
            .map(|s| s.parse().map_err(|e| CliError::Data(format!("sweep grid: {e}"))))
            .collect()
    }

    pub fn probe(&self) -> Result<ProbeKind, CliError> {
        parse_probe(&self.sweep.probe).map_err(|e| CliError::Data(format!("sweep probe: {e}")))
    }

    pub fn corpus_spec(&self) -> Option<CorpusSpec> {
        self.synthetic.as_ref().map(|s| CorpusSpec {
            n_retain_facts: s.n_retain_facts,
            n_forget_facts: s.n_forget_facts,
            filler_tokens: s.filler_tokens,
            vocab_content_size: s.vocab_content_size,
            seed: self.seed,
        })
    }

    /// Scenario over `fact_ids`, taken in order.
    pub fn scenario_for(&self, fact_ids: &[String]) -> Result<Scenario, CliError> {
        let sc = self.scenario.as_ref().ok_or_else(|| CliError::Usage("manifest has no [scenario] section".into()))?;
        let mut out = match sc.kind {
            ScenarioKind::Sustainability => Scenario::sustainability(fact_ids, sc.n_steps.unwrap_or(1)),
            ScenarioKind::Scaling => {
                let sizes = sc.sizes.as_deref().unwrap_or(&[]);
                if let Some(&n) = sizes.iter().find(|&&n| n > fact_ids.len()) {
                    return Err(CliError::Data(format!(
                        "scenario size {n} exceeds the {} forget facts available",
                        fact_ids.len()
                    )));
                }
                Scenario::scaling(fact_ids, sizes)
            }
        };
        out.remeasure_original = sc.remeasure_original;
        Ok(out)
    }
}
