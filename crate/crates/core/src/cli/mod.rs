//! The `synfaith` command line.
//!
//! Every subcommand that writes files also writes a [`RunManifest`] at
//! `<output>.manifest.json` with the parsed flags, seeds and content hashes of
//! its inputs and outputs. Exit status is 0 on success, 1 for input errors
//! (including bad flags) and 2 for backend or transport failures.

mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub use manifest::{sha256_file, Artifact, RunManifest};

use crate::aggregator::{FaithfulnessModel, ModelKind};
use crate::backend::{scenarios, GenerationBackend, HttpBackend, MockLm, DEFAULT_TOP_K};
use crate::error::{Error, Result};
use crate::eval::{self, Decoder, Report};
use crate::features::{
    read_feature_records, scorer_from_env, AlignmentScorer, FeatureConfig, FeatureFamily, HttpAlignScorer,
    LexicalScorer, DEFAULT_LID_K,
};
use crate::fod::{self, DecodeConfig, DecodeResult, SentenceScorer, Strategy, SynCheck};
use crate::jsonl;
use crate::pipeline::{self, ExtractorSpec, PromptRecord, Sampling};
use crate::seed;
use crate::trace::{read_traces, write_traces, FaithLabel, GenerationTrace};

#[derive(Debug, Parser, Serialize)]
#[command(name = "synfaith", version, about = "Sentence-level faithfulness monitoring and faithfulness-oriented decoding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Drive a backend over prompts and write decoding traces.
    Trace(TraceArgs),
    /// Turn traces into a feature dump.
    Features(FeaturesArgs),
    /// Fit an aggregator on a feature dump.
    Train(TrainArgs),
    /// Score every sentence of a trace file.
    Score(ScoreArgs),
    /// Decode prompts with one strategy.
    Decode(DecodeArgs),
    /// Evaluation metrics.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Train detectors, decode with every strategy and write the report grid.
    Bench(BenchArgs),
    /// Write a bundled mock scenario as JSON.
    Scenario(ScenarioArgs),
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum EvalCommand {
    /// AUROC of scores against gold labels.
    Auroc(AurocArgs),
    /// Faithfulness of the first L sentences, pooled over traces.
    FaithAtL(FaithAtLArgs),
}

#[derive(Debug, Args, Serialize)]
struct BackendArgs {
    /// Mock scenario: a JSON file or `builtin:<name>`.
    #[arg(long)]
    scenario: Option<String>,
    /// Remote generation backend. Defaults to $SYNFAITH_BACKEND_URL.
    #[arg(long)]
    backend_url: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    /// Layers whose activations a remote backend should return.
    #[arg(long, value_delimiter = ',')]
    hidden_layers: Vec<u32>,
    /// Prompt file (JSONL of {id?, prompt, context}). Defaults to the
    /// scenario's own prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ScorerArgs {
    /// Remote alignment scorer. Defaults to $SYNFAITH_SCORER_URL, then the
    /// lexical scorer.
    #[arg(long)]
    scorer_url: Option<String>,
    /// Use the lexical scorer even when a remote one is configured.
    #[arg(long)]
    lexical: bool,
}

#[derive(Debug, Args, Serialize)]
struct DetectorArgs {
    /// Model file from `train`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Extractor file written by `features`.
    #[arg(long)]
    extractor: Option<PathBuf>,
    #[command(flatten)]
    scorer: ScorerArgs,
}

#[derive(Debug, Args, Serialize)]
struct TraceArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample at this temperature instead of decoding greedily.
    #[arg(long)]
    temperature: Option<f64>,
    /// Responses per prompt when sampling.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 24)]
    max_sentences: usize,
    /// Keep only the first N sentences of the corpus.
    #[arg(long)]
    limit_sentences: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct FeaturesArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reuse a saved extractor instead of building one from `--traces`.
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Where to save a newly built extractor. Defaults to
    /// `<out>.extractor.json`.
    #[arg(long)]
    extractor_out: Option<PathBuf>,
    /// LID layers. Defaults to every layer present in the traces.
    #[arg(long, value_delimiter = ',')]
    lid_layers: Vec<u32>,
    #[arg(long, default_value_t = DEFAULT_LID_K)]
    lid_k: usize,
    #[arg(long, default_value_t = 200)]
    ref_size: usize,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scorer: ScorerArgs,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long, default_value = "mlp")]
    model: ModelKind,
    #[arg(long)]
    out: PathBuf,
    /// Feature families to leave out, e.g. `context_influence`.
    #[arg(long, value_delimiter = ',')]
    drop: Vec<FeatureFamily>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    traces: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Debug, Args, Serialize)]
struct DecodeArgs {
    #[arg(long, default_value = "fod")]
    strategy: Strategy,
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Decode results (JSONL).
    #[arg(long)]
    out: PathBuf,
    /// Also write the bare response traces here.
    #[arg(long)]
    traces_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.7)]
    tau1: f64,
    #[arg(long, default_value_t = 0.85)]
    tau2: f64,
    #[arg(long, default_value_t = 2)]
    beam: usize,
    #[arg(long, default_value_t = 6)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 24)]
    max_sentences: usize,
    #[arg(long)]
    complete_all: bool,
    #[arg(long, default_value_t = 0.7)]
    abstain_threshold: f64,
    #[arg(long, default_value_t = 6)]
    rerank_samples: usize,
    /// Responses per prompt; response `r` of prompt `i` uses seed
    /// `derive_all(seed, [i, r])`.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct AurocArgs {
    /// One score per line.
    #[arg(long, requires = "labels", conflicts_with = "scored")]
    scores: Option<PathBuf>,
    /// One label per line: 1 faithful, 0 unfaithful.
    #[arg(long, requires = "scores")]
    labels: Option<PathBuf>,
    /// Output of `score`.
    #[arg(long)]
    scored: Option<PathBuf>,
    /// Also write a report file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct FaithAtLArgs {
    #[arg(long)]
    traces: PathBuf,
    /// Number of leading sentences, or `inf`.
    #[arg(long = "L", alias = "l", value_parser = parse_l)]
    l: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[command(flatten)]
    backend: BackendArgs,
    #[command(flatten)]
    scorer: ScorerArgs,
    /// Labelled training traces. Generated from the mock when absent.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Labelled test traces. Generated from the mock when absent.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    train_sentences: usize,
    #[arg(long, default_value_t = 200)]
    test_sentences: usize,
    #[arg(long, value_delimiter = ',')]
    lid_layers: Vec<u32>,
    #[arg(long, default_value_t = 20)]
    lid_k: usize,
    #[arg(long, default_value_t = 200)]
    ref_size: usize,
    /// Responses per prompt for each decoding strategy.
    #[arg(long, default_value_t = 5)]
    decode_repeats: usize,
    #[arg(long, default_value_t = 24)]
    max_sentences: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write a flat CSV export.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args, Serialize)]
struct ScenarioArgs {
    #[arg(long, default_value = scenarios::RAG_DEMO)]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_l(s: &str) -> std::result::Result<usize, String> {
    match s {
        "inf" | "all" => Ok(usize::MAX),
        _ => match s.parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("expected a positive integer or `inf`, got {s:?}")),
            Ok(n) => Ok(n),
        },
    }
}

/// One line of the `score` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub trace_id: String,
    pub sentence_index: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<FaithLabel>,
}

/// Parse `argv` (program name first) and run the command. Returns the exit
/// status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli, argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let flags = serde_json::to_value(&cli.command).map_err(|e| Error::input(e.to_string()))?;
    let m = |name: &str| RunManifest::new(name, argv.clone(), flags.clone());
    match &cli.command {
        Command::Trace(a) => cmd_trace(a, m("trace")),
        Command::Features(a) => cmd_features(a, m("features")),
        Command::Train(a) => cmd_train(a, m("train")),
        Command::Score(a) => cmd_score(a, m("score")),
        Command::Decode(a) => cmd_decode(a, m("decode")),
        Command::Eval(EvalCommand::Auroc(a)) => cmd_auroc(a, m("eval auroc")),
        Command::Eval(EvalCommand::FaithAtL(a)) => cmd_faith_at_l(a, m("eval faith-at-l")),
        Command::Bench(a) => cmd_bench(a, m("bench")),
        Command::Scenario(a) => cmd_scenario(a, m("scenario")),
    }
}

enum Backend {
    Mock(MockLm),
    Http(HttpBackend),
}

impl Backend {
    fn open(a: &BackendArgs, seed_: u64) -> Result<(Self, Vec<PromptRecord>, Vec<PathBuf>)> {
        let mut inputs = Vec::new();
        let backend = match (&a.scenario, &a.backend_url) {
            (Some(_), Some(_)) => return Err(Error::input("pass either --scenario or --backend-url, not both")),
            (Some(s), None) => {
                if !s.starts_with("builtin:") {
                    inputs.push(PathBuf::from(s));
                }
                Backend::Mock(MockLm::load(s, seed_)?)
            }
            (None, Some(url)) => Backend::Http(http_backend(HttpBackend::new(url)?, a)),
            (None, None) => match HttpBackend::from_env()? {
                Some(b) => Backend::Http(http_backend(b, a)),
                None => {
                    return Err(Error::input(
                        "no backend: pass --scenario or --backend-url, or set SYNFAITH_BACKEND_URL",
                    ))
                }
            },
        };
        let prompts = match (&a.prompts, &backend) {
            (Some(p), _) => {
                inputs.push(p.clone());
                pipeline::read_prompts(p)?
            }
            (None, Backend::Mock(lm)) => pipeline::scenario_prompts(lm.spec()),
            (None, Backend::Http(_)) => return Err(Error::input("--prompts is required with a remote backend")),
        };
        Ok((backend, prompts, inputs))
    }

    fn as_dyn(&self) -> &dyn GenerationBackend {
        match self {
            Backend::Mock(m) => m,
            Backend::Http(h) => h,
        }
    }

    fn mock(&self) -> Option<&MockLm> {
        match self {
            Backend::Mock(m) => Some(m),
            Backend::Http(_) => None,
        }
    }

    /// Attach scripted labels when the backend is a mock.
    fn label(&self, traces: &mut [GenerationTrace]) -> Result<()> {
        match self.mock() {
            Some(lm) => pipeline::attach_oracle_labels(lm, traces),
            None => Ok(()),
        }
    }
}

fn http_backend(b: HttpBackend, a: &BackendArgs) -> HttpBackend {
    b.with_top_k(a.top_k).with_hidden_layers(a.hidden_layers.clone())
}

fn alignment_scorer(a: &ScorerArgs) -> Result<Box<dyn AlignmentScorer>> {
    if a.lexical {
        return Ok(Box::new(LexicalScorer));
    }
    match &a.scorer_url {
        Some(url) => Ok(Box::new(HttpAlignScorer::new(url)?)),
        None => scorer_from_env(),
    }
}

fn load_detector(a: &DetectorArgs, inputs: &mut Vec<PathBuf>) -> Result<Option<SynCheck>> {
    match (&a.model, &a.extractor) {
        (None, None) => Ok(None),
        (Some(m), Some(x)) => {
            let model = FaithfulnessModel::load(m)?;
            let spec = ExtractorSpec::load(x)?;
            inputs.extend([m.clone(), x.clone()]);
            Ok(Some(SynCheck::new(model, spec.extractor(alignment_scorer(&a.scorer)?)?)))
        }
        _ => Err(Error::input("--model and --extractor go together")),
    }
}

fn finish(m: RunManifest, inputs: &[PathBuf], outputs: &[&Path]) -> Result<()> {
    let inputs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    m.finish(&inputs, outputs).map(|_| ())
}

fn cmd_trace(a: &TraceArgs, mut m: RunManifest) -> Result<()> {
    let (backend, prompts, inputs) = Backend::open(&a.backend, a.seed)?;
    let sampling = match a.temperature {
        None => Sampling::Greedy,
        Some(temperature) => Sampling::Sample { temperature, seed: a.seed, repeats: a.repeats },
    };
    let mut traces = pipeline::generate_traces(backend.as_dyn(), &prompts, sampling, a.max_sentences)?;
    backend.label(&mut traces)?;
    if let Some(n) = a.limit_sentences {
        traces = pipeline::limit_sentences(&traces, n)?;
    }
    write_traces(&a.out, &traces)?;
    m.seeds.insert("seed".into(), a.seed);
    let n: usize = traces.iter().map(|t| t.sentences.len()).sum();
    println!("{} traces, {n} sentences -> {}", traces.len(), a.out.display());
    finish(m, &inputs, &[&a.out])
}

fn layers_in(traces: &[GenerationTrace]) -> Vec<u32> {
    let mut v: Vec<u32> = traces
        .iter()
        .flat_map(|t| t.sentences.iter())
        .flat_map(|s| s.final_hidden.keys().copied())
        .collect();
    v.sort_unstable();
    v.dedup();
    v
}

fn cmd_features(a: &FeaturesArgs, mut m: RunManifest) -> Result<()> {
    let traces = read_traces(&a.traces)?;
    let mut inputs = vec![a.traces.clone()];
    let mut outputs = vec![a.out.clone()];
    let spec = match &a.extractor {
        Some(p) => {
            inputs.push(p.clone());
            ExtractorSpec::load(p)?
        }
        None => {
            let lid_layers = if a.lid_layers.is_empty() { layers_in(&traces) } else { a.lid_layers.clone() };
            let config = FeatureConfig {
                vocab_size: a.vocab_size,
                lid_layers,
                lid_k: a.lid_k,
                ..FeatureConfig::default()
            };
            let spec = ExtractorSpec::build(&traces, config, a.ref_size, a.seed)?;
            let path = a.extractor_out.clone().unwrap_or_else(|| suffixed(&a.out, ".extractor.json"));
            spec.save(&path)?;
            outputs.push(path);
            spec
        }
    };
    let records = spec.extractor(alignment_scorer(&a.scorer)?)?.traces(&traces)?;
    jsonl::write(&a.out, &records)?;
    m.seeds.insert("seed".into(), a.seed);
    println!("{} feature records -> {}", records.len(), a.out.display());
    let outputs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(m, &inputs, &outputs)
}

fn suffixed(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: &TrainArgs, mut m: RunManifest) -> Result<()> {
    let records = read_feature_records(&a.features)?;
    let present: Vec<String> = records.iter().flat_map(|r| r.presence.keys().cloned()).collect();
    let columns = pipeline::drop_families(&crate::features::canonical_columns(present), &a.drop);
    if columns.is_empty() {
        return Err(Error::input("no feature columns left to train on"));
    }
    let model = pipeline::train_model(&records, a.model, &columns, a.seed)?;
    model.save(&a.out)?;
    m.seeds.insert("seed".into(), a.seed);
    println!("{} model on {} columns -> {}", a.model, columns.len(), a.out.display());
    finish(m, std::slice::from_ref(&a.features), &[&a.out])
}

fn cmd_score(a: &ScoreArgs, m: RunManifest) -> Result<()> {
    let mut inputs = vec![a.traces.clone()];
    let det = load_detector(&a.detector, &mut inputs)?
        .ok_or_else(|| Error::input("score needs --model and --extractor"))?;
    let traces = read_traces(&a.traces)?;
    let mut out = Vec::new();
    for t in &traces {
        for (i, s) in t.sentences.iter().enumerate() {
            out.push(ScoreRecord {
                trace_id: t.id.clone(),
                sentence_index: s.index,
                score: det.score(&t.prompt, &t.context, &t.sentences[..i], s)?,
                gold_label: t.gold_labels.as_ref().map(|l| l[i]),
            });
        }
    }
    jsonl::write(&a.out, &out)?;
    println!("{} sentences scored -> {}", out.len(), a.out.display());
    finish(m, &inputs, &[&a.out])
}

fn decode_config(a: &DecodeArgs) -> DecodeConfig {
    DecodeConfig {
        tau1: a.tau1,
        tau2: a.tau2,
        beam: a.beam,
        samples: a.samples,
        temperature: a.temperature,
        seed: a.seed,
        max_sentences: a.max_sentences,
        complete_all: a.complete_all,
        abstain_threshold: a.abstain_threshold,
        rerank_samples: a.rerank_samples,
    }
}

/// Decode `repeats` responses per prompt. Response `r` of prompt `i` runs
/// with seed `derive_all(config.seed, [i, r])`.
fn decode_all(
    strategy: Strategy,
    backend: &Backend,
    detector: Option<&dyn SentenceScorer>,
    prompts: &[PromptRecord],
    config: &DecodeConfig,
    repeats: usize,
) -> Result<Vec<DecodeResult>> {
    config.validate()?;
    if repeats == 0 {
        return Err(Error::input("repeats must be at least 1"));
    }
    let mut out = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let context = p
            .context
            .as_deref()
            .ok_or_else(|| Error::input(format!("prompt {} has no context", p.id_or(i))))?;
        for r in 0..repeats {
            let id = if repeats == 1 { p.id_or(i) } else { format!("{}/{r}", p.id_or(i)) };
            let cfg = DecodeConfig { seed: seed::derive_all(config.seed, &[i as u64, r as u64]), ..config.clone() };
            let mut res = fod::decode(strategy, backend.as_dyn(), detector, &id, &p.prompt, context, &cfg)?;
            backend.label(std::slice::from_mut(&mut res.trace))?;
            out.push(res);
        }
    }
    Ok(out)
}

fn cmd_decode(a: &DecodeArgs, mut m: RunManifest) -> Result<()> {
    let (backend, prompts, mut inputs) = Backend::open(&a.backend, a.seed)?;
    let det = load_detector(&a.detector, &mut inputs)?;
    let config = decode_config(a);
    let results = decode_all(
        a.strategy,
        &backend,
        det.as_ref().map(|d| d as &dyn SentenceScorer),
        &prompts,
        &config,
        a.repeats,
    )?;
    fod::write_results(&a.out, &results)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.traces_out {
        let traces: Vec<GenerationTrace> = results.iter().map(|r| r.trace.clone()).collect();
        write_traces(p, &traces)?;
        outputs.push(p);
    }
    if backend.mock().is_some() {
        if let Ok(s) = eval::summarize_intervention(&results) {
            let f = s.faithfulness.map_or("n/a".to_string(), |f| format!("{f:.4}"));
            println!(
                "{}: faithfulness {f}, informativeness {:.2}, abstain rate {:.2}",
                a.strategy, s.informativeness, s.abstain_rate
            );
        }
    }
    m.seeds.insert("seed".into(), a.seed);
    finish(m, &inputs, &outputs)
}

fn print_value(v: f64) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{v:.4}");
}

fn cmd_auroc(a: &AurocArgs, m: RunManifest) -> Result<()> {
    let (scores, labels, inputs) = match (&a.scores, &a.labels, &a.scored) {
        (Some(s), Some(l), None) => (eval::read_numbers(s)?, eval::read_labels(l)?, vec![s.clone(), l.clone()]),
        (None, None, Some(p)) => {
            let recs: Vec<ScoreRecord> = jsonl::read(p)?;
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for r in recs {
                let l = r.gold_label.ok_or_else(|| {
                    Error::input(format!("{}: sentence {} of {} has no gold label", p.display(), r.sentence_index, r.trace_id))
                })?;
                scores.push(r.score);
                labels.push(l);
            }
            (scores, labels, vec![p.clone()])
        }
        _ => return Err(Error::input("pass --scores with --labels, or --scored")),
    };
    let v = eval::auroc(&scores, &labels)?;
    print_value(v);
    if let Some(out) = &a.out {
        let row = eval::ReportRow {
            name: "scores".into(),
            tag: eval::ALL_TAGS.into(),
            metric: "auroc".into(),
            value: Some(v),
            n: scores.len(),
            error: None,
        };
        Report::new(vec![row]).save(out)?;
        finish(m, &inputs, &[out])?;
    }
    Ok(())
}

fn cmd_faith_at_l(a: &FaithAtLArgs, m: RunManifest) -> Result<()> {
    let traces = read_traces(&a.traces)?;
    let v = eval::faithfulness_at_l(&traces, a.l)?;
    print_value(v);
    if let Some(out) = &a.out {
        let metric = if a.l == usize::MAX { "faithfulness@inf".to_string() } else { format!("faithfulness@{}", a.l) };
        let n = traces.iter().map(|t| t.sentences.len().min(a.l)).sum();
        let row = eval::ReportRow {
            name: "traces".into(),
            tag: eval::ALL_TAGS.into(),
            metric,
            value: Some(v),
            n,
            error: None,
        };
        Report::new(vec![row]).save(out)?;
        finish(m, std::slice::from_ref(&a.traces), &[out])?;
    }
    Ok(())
}

fn labelled_corpus(
    path: Option<&PathBuf>,
    backend: &Backend,
    prompts: &[PromptRecord],
    sentences: usize,
    seed_: u64,
    max_sentences: usize,
    inputs: &mut Vec<PathBuf>,
) -> Result<Vec<GenerationTrace>> {
    if let Some(p) = path {
        inputs.push(p.clone());
        return read_traces(p);
    }
    let lm = backend
        .mock()
        .ok_or_else(|| Error::input("bench needs --train and --test trace files unless the backend is a mock"))?;
    // Sample until the corpus is large enough, then cut it to size.
    let mut repeats = 1;
    loop {
        let sampling = Sampling::Sample { temperature: 1.0, seed: seed_, repeats };
        let mut traces = pipeline::generate_traces(lm, prompts, sampling, max_sentences)?;
        let total: usize = traces.iter().map(|t| t.sentences.len()).sum();
        if total >= sentences {
            pipeline::attach_oracle_labels(lm, &mut traces)?;
            return pipeline::limit_sentences(&traces, sentences);
        }
        if total == 0 || repeats > 1 << 16 {
            return Err(Error::input("the scenario produces too few sentences"));
        }
        repeats = (repeats * 2).max(sentences.div_ceil(total.max(1)) * repeats);
    }
}

fn cmd_bench(a: &BenchArgs, mut m: RunManifest) -> Result<()> {
    let (backend, prompts, mut inputs) = Backend::open(&a.backend, a.seed)?;
    let train = labelled_corpus(
        a.train.as_ref(),
        &backend,
        &prompts,
        a.train_sentences,
        seed::derive(a.seed, 0),
        a.max_sentences,
        &mut inputs,
    )?;
    let test = labelled_corpus(
        a.test.as_ref(),
        &backend,
        &prompts,
        a.test_sentences,
        seed::derive(a.seed, 1),
        a.max_sentences,
        &mut inputs,
    )?;
    let lid_layers = if a.lid_layers.is_empty() { layers_in(&train) } else { a.lid_layers.clone() };
    let config = FeatureConfig { lid_layers, lid_k: a.lid_k, ..FeatureConfig::default() };
    let all = config.columns();
    let model_seed = seed::derive(a.seed, 2);

    let mut variants: Vec<(String, ModelKind, Vec<String>)> = vec![
        ("synfaith-mlp".into(), ModelKind::Mlp, all.clone()),
        ("synfaith-logistic".into(), ModelKind::Logistic, all.clone()),
    ];
    for f in FeatureFamily::ALL {
        let cols = pipeline::drop_families(&all, &[f]);
        if !cols.is_empty() && cols.len() < all.len() {
            variants.push((format!("synfaith-mlp-no-{}", f.as_str()), ModelKind::Mlp, cols));
        }
    }
    let mut detectors = Vec::new();
    for (name, kind, cols) in &variants {
        let (det, _, _) = pipeline::train_detector(
            &train,
            config.clone(),
            a.ref_size,
            *kind,
            Some(cols),
            alignment_scorer(&a.scorer)?,
            model_seed,
        )?;
        detectors.push((name.clone(), det));
    }
    let primary = &detectors[0].1;
    let det_refs: Vec<(String, &dyn SentenceScorer)> =
        detectors.iter().map(|(n, d)| (n.clone(), d as &dyn SentenceScorer)).collect();
    let decode_cfg = DecodeConfig { max_sentences: a.max_sentences, seed: seed::derive(a.seed, 3), ..DecodeConfig::default() };
    let decoders: Vec<(String, Decoder<'_>)> = Strategy::ALL
        .into_iter()
        .map(|s| {
            let (backend, prompts, cfg) = (&backend, &prompts, &decode_cfg);
            let run: Decoder<'_> =
                Box::new(move || decode_all(s, backend, Some(primary), prompts, cfg, a.decode_repeats));
            (s.to_string(), run)
        })
        .collect();
    let report = eval::run_benchmark(&test, &det_refs, &decoders);
    report.save(&a.out)?;
    let mut outputs = vec![a.out.as_path()];
    if let Some(p) = &a.csv {
        report.save_csv(p)?;
        outputs.push(p);
    }
    for r in report.rows.iter().filter(|r| r.tag == eval::ALL_TAGS) {
        match (r.value, &r.error) {
            (Some(v), _) => println!("{:<36} {:<16} {v:.4} (n={})", r.name, r.metric, r.n),
            (None, Some(e)) => println!("{:<36} {:<16} error: {e}", r.name, r.metric),
            (None, None) => {}
        }
    }
    m.seeds.insert("seed".into(), a.seed);
    m.seeds.insert("model".into(), model_seed);
    m.seeds.insert("decode".into(), decode_cfg.seed);
    finish(m, &inputs, &outputs)
}

fn cmd_scenario(a: &ScenarioArgs, m: RunManifest) -> Result<()> {
    let spec = scenarios::builtin(&a.name)?;
    std::fs::write(&a.out, spec.to_json()).map_err(|e| Error::io(&a.out, e))?;
    finish(m, &[], &[&a.out])
}
