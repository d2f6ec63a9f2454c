//! Subcommand bodies. Each writes human-readable output to `out` and files
//! under the manifest's output directory.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;

use divdec::corpus::{
    build_vocab, generate_synthetic, read_corpus, read_fact_tokens, read_facts, tokenize, write_corpus, write_facts,
    FactRecord, Split, TokenSeq, TokenizeMode, Vocabulary,
};
use divdec::cost::{breakeven_tokens, inference_flops, CostParams};
use divdec::decode::{AdjustMode, DecodeConfig, DivergenceDecoder};
use divdec::eval::{write_plot_csv, write_report};
use divdec::eval::{run_scenario, ScenarioAssets};
use divdec::eval::{extraction_rate, perplexity, sweep, ProbeKind, SweepModels};
use divdec::ngram::{read_lm, write_lm};
use divdec::ngram::NGramCounts;
use divdec::service::Sidecar;
use divdec::{BackoffLM, LogitSource};

use crate::error::CliError;
use crate::manifest::{parse_truncation, ModeName, RunManifest};

pub type Result<T> = std::result::Result<T, CliError>;

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn joiner(mode: TokenizeMode) -> &'static str {
    match mode {
        TokenizeMode::Whitespace => " ",
        TokenizeMode::Char => "",
    }
}

fn read_docs(path: &Path, mode: TokenizeMode) -> Result<Vec<Vec<String>>> {
    let docs = read_corpus(open(path)?, mode).map_err(|e| CliError::data(path, e))?;
    if docs.is_empty() {
        return Err(CliError::data(path, "corpus contains no documents"));
    }
    Ok(docs)
}

fn encode_docs(vocab: &Vocabulary, docs: &[Vec<String>]) -> Vec<TokenSeq> {
    docs.iter().map(|d| vocab.encode_sentence(d)).collect()
}

fn load_vocab(m: &RunManifest) -> Result<Vocabulary> {
    let path = m.resolve(&m.corpus.vocab);
    Vocabulary::read_json(open(&path)?).map_err(|e| CliError::data(&path, e))
}

fn load_model(m: &RunManifest, path: &Path, vocab: &Vocabulary) -> Result<BackoffLM> {
    let path = m.resolve(path);
    let lm = read_lm(open(&path)?).map_err(|e| CliError::data(&path, e))?;
    if lm.vocab_size() != vocab.len() {
        return Err(CliError::data(
            &path,
            format!("model vocabulary size {} differs from vocabulary file ({})", lm.vocab_size(), vocab.len()),
        ));
    }
    Ok(lm)
}

fn load_facts(m: &RunManifest, vocab: &Vocabulary) -> Result<Vec<FactRecord>> {
    let path = m.corpus.facts.as_ref().ok_or_else(|| CliError::Usage("manifest has no corpus.facts path".into()))?;
    let path = m.resolve(path);
    read_facts(open(&path)?, vocab).map_err(|e| CliError::data(&path, e))
}

fn split_facts(facts: &[FactRecord], split: Split) -> Vec<FactRecord> {
    facts.iter().filter(|f| f.split == split).cloned().collect()
}

/// Models named in the manifest, loaded against its vocabulary file.
struct Loaded {
    vocab: Vocabulary,
    base: BackoffLM,
    forget: BackoffLM,
    retain: BackoffLM,
    retrain: BackoffLM,
}

impl Loaded {
    fn load(m: &RunManifest) -> Result<Self> {
        let vocab = load_vocab(m)?;
        Ok(Self {
            base: load_model(m, &m.models.base, &vocab)?,
            forget: load_model(m, &m.models.forget, &vocab)?,
            retain: load_model(m, &m.models.retain, &vocab)?,
            retrain: load_model(m, &m.models.retrain, &vocab)?,
            vocab,
        })
    }

    fn sweep_models(&self) -> SweepModels<'_> {
        SweepModels { base: &self.base, forget_side: &self.forget, retain_side: &self.retain, retrain: &self.retrain }
    }
}

pub fn generate(m: &RunManifest, out: &mut dyn Write) -> Result<()> {
    let spec = m.corpus_spec().ok_or_else(|| CliError::Usage("manifest has no [synthetic] section".into()))?;
    let facts_path = m.corpus.facts.as_ref().ok_or_else(|| CliError::Usage("manifest has no corpus.facts path".into()))?;
    let corpus = generate_synthetic(&spec).map_err(data_err)?;
    let outputs = [
        (m.resolve(&m.corpus.retain), &corpus.retain),
        (m.resolve(&m.corpus.forget), &corpus.forget),
    ];
    for (path, docs) in outputs {
        let mut buf = Vec::new();
        write_corpus(&mut buf, docs, &corpus.vocab).map_err(data_err)?;
        write_bytes(&path, &buf)?;
        writeln!(out, "{} documents -> {}", docs.len(), path.display()).map_err(stdout_err)?;
    }
    let path = m.resolve(facts_path);
    let mut buf = Vec::new();
    write_facts(&mut buf, &corpus.facts, &corpus.vocab).map_err(data_err)?;
    write_bytes(&path, &buf)?;
    writeln!(out, "{} facts -> {}", corpus.facts.len(), path.display()).map_err(stdout_err)?;
    Ok(())
}

fn ngram_types(counts: &NGramCounts) -> usize {
    (0..counts.order()).flat_map(|n| counts.contexts(n)).map(|(_, e)| e.children().len()).sum()
}

pub fn train(m: &RunManifest, out: &mut dyn Write) -> Result<()> {
    let mode = m.corpus.tokenize;
    let retain_docs = read_docs(&m.resolve(&m.corpus.retain), mode)?;
    let forget_docs = read_docs(&m.resolve(&m.corpus.forget), mode)?;
    let mut all: Vec<Vec<String>> = retain_docs.iter().chain(&forget_docs).cloned().collect();
    if let Some(facts) = &m.corpus.facts {
        let path = m.resolve(facts);
        all.extend(read_fact_tokens(open(&path)?).map_err(|e| CliError::data(&path, e))?);
    }
    let vocab = build_vocab(&all);
    let retain = encode_docs(&vocab, &retain_docs);
    let forget = encode_docs(&vocab, &forget_docs);
    let combined: Vec<TokenSeq> = retain.iter().chain(&forget).cloned().collect();

    let mut buf = Vec::new();
    vocab.write_json(&mut buf).map_err(data_err)?;
    let vocab_path = m.resolve(&m.corpus.vocab);
    write_bytes(&vocab_path, &buf)?;
    writeln!(out, "vocab: {} types -> {}", vocab.len(), vocab_path.display()).map_err(stdout_err)?;

    let (v, lambda) = (vocab.len(), m.models.lambda);
    let jobs = [
        ("base", &m.models.base, &combined, m.models.base_order),
        ("forget", &m.models.forget, &forget, m.models.aux_order),
        ("retain", &m.models.retain, &retain, m.models.aux_order),
        ("retrain", &m.models.retrain, &retain, m.models.base_order),
    ];
    for (name, path, corpus, order) in jobs {
        let lm = BackoffLM::train(corpus, order, v, lambda).map_err(|e| CliError::Data(format!("{name} model: {e}")))?;
        let mut buf = Vec::new();
        write_lm(&lm, &mut buf).map_err(data_err)?;
        let path = m.resolve(path);
        write_bytes(&path, &buf)?;
        writeln!(
            out,
            "{name}: order {order}, {} sentences, {} tokens, {} n-gram types -> {}",
            lm.counts().sentences(),
            lm.counts().total_tokens(),
            ngram_types(lm.counts()),
            path.display()
        )
        .map_err(stdout_err)?;
    }
    Ok(())
}

/// Command-line overrides for the manifest's decode section.
#[derive(Debug, Default, Clone)]
pub struct DecodeOverrides {
    pub mode: Option<ModeName>,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub temperature: Option<f64>,
    pub truncation: Option<String>,
    pub max_new_tokens: Option<usize>,
    pub seed: Option<u64>,
}

impl DecodeOverrides {
    pub fn apply(&self, m: &RunManifest) -> Result<DecodeConfig> {
        let mut s = m.decode.clone();
        s.mode = self.mode.unwrap_or(s.mode);
        s.alpha = self.alpha.unwrap_or(s.alpha);
        s.k = self.k.unwrap_or(s.k);
        s.temperature = self.temperature.unwrap_or(s.temperature);
        s.max_new_tokens = self.max_new_tokens.unwrap_or(s.max_new_tokens);
        if let Some(t) = &self.truncation {
            parse_truncation(t)?;
            s.truncation = t.clone();
        }
        s.to_config(self.seed.unwrap_or(m.seed))
    }
}

pub fn decode(m: &RunManifest, prompt: &str, overrides: &DecodeOverrides, trace: bool, out: &mut dyn Write) -> Result<()> {
    let config = overrides.apply(m)?;
    let vocab = load_vocab(m)?;
    config.validate(vocab.len()).map_err(|e| CliError::Usage(e.to_string()))?;
    let base = load_model(m, &m.models.base, &vocab)?;
    let forget = load_model(m, &m.models.forget, &vocab)?;
    let retain = load_model(m, &m.models.retain, &vocab)?;
    let dec = DivergenceDecoder::new(&base, &forget, &retain, config).map_err(data_err)?;

    let prompt = vocab.encode_prompt(&tokenize(prompt, m.corpus.tokenize));
    let generation = if trace { dec.generate_traced(&prompt) } else { dec.generate(&prompt) }.map_err(data_err)?;

    let name = |id| vocab.token(id).unwrap_or("?");
    let mut text = String::new();
    for (i, step) in generation.trace.iter().enumerate() {
        write!(text, "step {}\ttoken {}\tmasked {}\ttop", i + 1, name(step.token), step.masked).unwrap();
        for &(id, p) in &step.top {
            write!(text, " {}:{p:.6}", name(id)).unwrap();
        }
        text.push('\n');
    }
    let words: Vec<&str> = generation.tokens.iter().map(|&id| name(id)).collect();
    writeln!(text, "{}", words.join(joiner(m.corpus.tokenize))).unwrap();
    writeln!(text, "tokens {}\tqueries {}", generation.tokens.len(), generation.source_queries).unwrap();
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

pub fn sweep_cmd(m: &RunManifest, out: &mut dyn Write) -> Result<()> {
    let grid = m.grid()?;
    let probe = m.probe()?;
    let loaded = Loaded::load(m)?;
    let facts = load_facts(m, &loaded.vocab)?;
    let forget = split_facts(&facts, Split::Forget);
    let utility = encode_docs(&loaded.vocab, &read_docs(&m.resolve(&m.corpus.retain), m.corpus.tokenize)?);

    let mut report = sweep(&loaded.sweep_models(), &grid, &forget, probe, &utility, None).map_err(data_err)?;
    report.select().map_err(data_err)?;
    let (report_path, plot_path) = (m.output_path("sweep_report.txt"), m.output_path("sweep_plot.csv"));
    write_report_files(&report, &report_path, &plot_path)?;

    let mut text = String::new();
    for p in std::iter::once(&report.target).chain(&report.points).chain(std::iter::once(&report.retrain)) {
        writeln!(text, "{}\tforget {:.4}\tperplexity {:.4}\tclipped {}", p.config_label, p.forget_metric, p.utility_metric, p.clip_count).unwrap();
    }
    writeln!(text, "selected {}", report.best.as_deref().unwrap_or("-")).unwrap();
    writeln!(text, "report -> {}\nplot -> {}", report_path.display(), plot_path.display()).unwrap();
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

fn write_report_files(report: &divdec::eval::EvalReport, report_path: &Path, plot_path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_report(&mut buf, report).map_err(data_err)?;
    write_bytes(report_path, &buf)?;
    let mut buf = Vec::new();
    write_plot_csv(&mut buf, report).map_err(data_err)?;
    write_bytes(plot_path, &buf)
}

pub fn eval_cmd(m: &RunManifest, out: &mut dyn Write) -> Result<()> {
    let mode = m.decode.adjust_mode();
    let loaded = Loaded::load(m)?;
    mode.validate(loaded.vocab.len()).map_err(|e| CliError::Usage(e.to_string()))?;
    let facts = load_facts(m, &loaded.vocab)?;
    let utility = encode_docs(&loaded.vocab, &read_docs(&m.resolve(&m.corpus.retain), m.corpus.tokenize)?);
    let splits = [split_facts(&facts, Split::Forget), split_facts(&facts, Split::Retain)];

    let models = loaded.sweep_models();
    let retrain_models = SweepModels { base: &loaded.retrain, ..loaded.sweep_models() };
    let rows = [
        ("target".to_owned(), &models, AdjustMode::None),
        ("retrain".to_owned(), &retrain_models, AdjustMode::None),
        (mode.label(), &models, mode),
    ];

    let mut text = String::from("config\tforget_verbatim\tforget_cloze\tretain_verbatim\tretain_cloze\tperplexity\tclipped\n");
    for (label, models, mode) in &rows {
        let dec = models.decoder(*mode).map_err(data_err)?;
        write!(text, "{label}").unwrap();
        for split in &splits {
            for probe in [ProbeKind::Verbatim, ProbeKind::Cloze] {
                match extraction_rate(&dec, split, probe) {
                    Ok(rate) => write!(text, "\t{rate:.6}").unwrap(),
                    Err(divdec::eval::EvalError::NoFacts) => text.push_str("\t-"),
                    Err(e) => return Err(data_err(e)),
                }
            }
        }
        let ppl = perplexity(&dec, &utility).map_err(data_err)?;
        writeln!(text, "\t{:.6}\t{}", ppl.value, ppl.clipped).unwrap();
    }
    let path = m.output_path("eval.tsv");
    write_bytes(&path, text.as_bytes())?;
    writeln!(text, "table -> {}", path.display()).unwrap();
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

pub fn scenario_cmd(m: &RunManifest, out: &mut dyn Write) -> Result<()> {
    let grid = m.grid()?;
    let probe = m.probe()?;
    let vocab = load_vocab(m)?;
    let facts = load_facts(m, &vocab)?;
    let ids: Vec<String> = split_facts(&facts, Split::Forget).into_iter().map(|f| f.fact_id).collect();
    let scenario = m.scenario_for(&ids)?;
    let base = load_model(m, &m.models.base, &vocab)?;
    let retain_side = load_model(m, &m.models.retain, &vocab)?;
    let retain_docs = encode_docs(&vocab, &read_docs(&m.resolve(&m.corpus.retain), m.corpus.tokenize)?);
    let forget_docs = encode_docs(&vocab, &read_docs(&m.resolve(&m.corpus.forget), m.corpus.tokenize)?);

    let assets = ScenarioAssets {
        base: &base,
        retain_side: &retain_side,
        retain_docs: &retain_docs,
        forget_docs: &forget_docs,
        facts: &facts,
        utility_corpus: &retain_docs,
        grid: &grid,
        probe,
        vocab_size: vocab.len(),
        forget_order: m.models.aux_order,
        retrain_order: m.models.base_order,
        lambda: m.models.lambda,
    };
    let steps = run_scenario(&scenario, &assets).map_err(data_err)?;

    let mut summary = String::from("step\trequested\tselected\tforget\tperplexity\toriginal_forget\n");
    for (i, step) in steps.iter().enumerate() {
        let n = i + 1;
        write_report_files(
            &step.report,
            &m.output_path(&format!("scenario_step{n}_report.txt")),
            &m.output_path(&format!("scenario_step{n}_plot.csv")),
        )?;
        let label = step.report.best.as_deref().unwrap_or("-");
        let best = step.report.best_point();
        let original = step.report.original_point(label).map(|p| format!("{:.6}", p.forget_metric));
        writeln!(
            summary,
            "{n}\t{}\t{label}\t{}\t{}\t{}",
            step.requested.len(),
            best.map_or("-".into(), |p| format!("{:.6}", p.forget_metric)),
            best.map_or("-".into(), |p| format!("{:.6}", p.utility_metric)),
            original.unwrap_or_else(|| "-".into()),
        )
        .unwrap();
    }
    let path = m.output_path("scenario_summary.tsv");
    write_bytes(&path, summary.as_bytes())?;
    writeln!(summary, "summary -> {}", path.display()).unwrap();
    out.write_all(summary.as_bytes()).map_err(stdout_err)
}

pub fn cost(params: &CostParams, out: &mut dyn Write) -> Result<()> {
    let flops = inference_flops(params.large_params, params.small_params, params.inference_tokens);
    let breakeven = breakeven_tokens(params).map_err(|e| CliError::Usage(e.to_string()))?;
    let text = format!(
        "base FLOPs\t{}\nDD FLOPs\t{}\noverhead %\t{}\nI*\t{}\n",
        flops.base,
        flops.dd,
        flops.overhead_pct(),
        breakeven
    );
    out.write_all(text.as_bytes()).map_err(stdout_err)
}

pub fn serve(m: &RunManifest, tcp: Option<&str>, max_connections: Option<usize>) -> Result<()> {
    let vocab = load_vocab(m)?;
    let base = load_model(m, &m.models.base, &vocab)?;
    let forget = load_model(m, &m.models.forget, &vocab)?;
    let retain = load_model(m, &m.models.retain, &vocab)?;
    let sidecar = Sidecar::new(Some(&base), &forget, &retain).map_err(data_err)?;
    match tcp {
        None => sidecar.serve_stream(io::stdin().lock(), io::stdout().lock()).map_err(stdout_err),
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
            let local = listener.local_addr().map_err(stdout_err)?;
            eprintln!("listening on {local}");
            sidecar.serve_tcp(&listener, max_connections).map_err(stdout_err)
        }
    }
}

fn stdout_err(e: io::Error) -> CliError {
    CliError::io(Path::new("<stream>"), e)
}
