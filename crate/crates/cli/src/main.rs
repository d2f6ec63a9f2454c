//! `divdec`: train count-based models, decode with divergence adjustment,
//! run unlearning sweeps and scenarios, and serve adjusted logits.
//!
//! Exit codes: 0 success, 2 usage error, 3 I/O error, 4 data or format error.

mod commands;
mod error;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divdec::cost::CostParams;

use crate::commands::DecodeOverrides;
use crate::error::CliError;
use crate::manifest::{ModeName, RunManifest};

#[derive(Parser)]
#[command(name = "divdec", version, about = "Divergence decoding over count-based language models")]
struct Cli {
    /// Run manifest (TOML).
    #[arg(short, long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic retain/forget corpora and facts file.
    Generate,
    /// Train base, forget-side, retain-side and retrain models.
    Train,
    /// Generate a continuation of a prompt.
    Decode(DecodeArgs),
    /// Sweep the manifest grid and select the config closest to retrain.
    Sweep,
    /// Extraction and perplexity table for base, retrain and the configured mode.
    Eval,
    /// Run the manifest's sustainability or scaling scenario.
    Scenario,
    /// Inference cost and breakeven volume.
    Cost(CostArgs),
    /// Answer adjustment requests, one JSON object per line.
    Serve(ServeArgs),
    /// Print the manifest with every default filled in.
    Manifest,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    prompt: String,
    #[arg(long, value_enum)]
    mode: Option<ModeName>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// `none`, `top_k=N` or `top_p=P`.
    #[arg(long)]
    truncation: Option<String>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the adjusted top-5 at every step.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    large_params: Option<f64>,
    #[arg(long)]
    small_params: Option<f64>,
    #[arg(long)]
    large_epochs: Option<f64>,
    #[arg(long)]
    small_epochs: Option<f64>,
    #[arg(long)]
    retain_tokens: Option<f64>,
    #[arg(long)]
    forget_tokens: Option<f64>,
    #[arg(long)]
    inference_tokens: Option<f64>,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen on this address instead of stdin/stdout.
    #[arg(long)]
    tcp: Option<String>,
    /// Stop after this many TCP connections have closed.
    #[arg(long, requires = "tcp")]
    max_connections: Option<usize>,
}

impl CostArgs {
    fn resolve(&self, base: Option<CostParams>) -> Result<CostParams, CliError> {
        let fields = [
            ("large-params", self.large_params, base.map(|b| b.large_params)),
            ("small-params", self.small_params, base.map(|b| b.small_params)),
            ("large-epochs", self.large_epochs, base.map(|b| b.large_epochs)),
            ("small-epochs", self.small_epochs, base.map(|b| b.small_epochs)),
            ("retain-tokens", self.retain_tokens, base.map(|b| b.retain_tokens)),
            ("forget-tokens", self.forget_tokens, base.map(|b| b.forget_tokens)),
            ("inference-tokens", self.inference_tokens, base.map(|b| b.inference_tokens)),
        ];
        let mut values = [0.0; 7];
        let mut missing = Vec::new();
        for (slot, (name, flag, fallback)) in values.iter_mut().zip(fields) {
            match flag.or(fallback) {
                Some(v) => *slot = v,
                None => missing.push(format!("--{name}")),
            }
        }
        if !missing.is_empty() {
            return Err(CliError::Usage(format!("missing {} (no [cost] section in manifest)", missing.join(", "))));
        }
        let [large_params, small_params, large_epochs, small_epochs, retain_tokens, forget_tokens, inference_tokens] = values;
        Ok(CostParams { large_params, small_params, large_epochs, small_epochs, retain_tokens, forget_tokens, inference_tokens })
    }
}

fn manifest(path: Option<&Path>) -> Result<RunManifest, CliError> {
    let path = path.ok_or_else(|| CliError::Usage("--manifest is required".into()))?;
    RunManifest::load(path)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let path = cli.manifest.as_deref();
    match cli.command {
        Command::Generate => commands::generate(&manifest(path)?, &mut out),
        Command::Train => commands::train(&manifest(path)?, &mut out),
        Command::Decode(a) => {
            let overrides = DecodeOverrides {
                mode: a.mode,
                alpha: a.alpha,
                k: a.k,
                temperature: a.temperature,
                truncation: a.truncation,
                max_new_tokens: a.max_new_tokens,
                seed: a.seed,
            };
            commands::decode(&manifest(path)?, &a.prompt, &overrides, a.trace, &mut out)
        }
        Command::Sweep => commands::sweep_cmd(&manifest(path)?, &mut out),
        Command::Eval => commands::eval_cmd(&manifest(path)?, &mut out),
        Command::Scenario => commands::scenario_cmd(&manifest(path)?, &mut out),
        Command::Cost(a) => {
            let from_manifest = match path {
                Some(p) => RunManifest::load(p)?.cost,
                None => None,
            };
            commands::cost(&a.resolve(from_manifest)?, &mut out)
        }
        Command::Manifest => out
            .write_all(manifest(path)?.to_toml().as_bytes())
            .map_err(|e| CliError::io(Path::new("<stdout>"), e)),
        Command::Serve(a) => commands::serve(&manifest(path)?, a.tcp.as_deref(), a.max_connections),
    }?;
    out.flush().map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("divdec: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
