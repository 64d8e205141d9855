//! Command-line surface. Exit codes: 0 success, 1 usage or validation error,
//! 2 runtime failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::bank::{deduplicate, load_bank, ReferenceBank};
use crate::comparison::{
    Backend, HttpConfig, HttpEngine, MockAdjudicator, MockEngine, MockFixture, ResponseCache,
    RoleReliability,
};
use crate::decision::Thresholds;
use crate::eval::{
    compute_metrics, evaluate_run, load_dataset, read_results, results_jsonl, sweep_thresholds,
    Dataset, EvalError, MetricsReport, ReportProvenance, RunConfig, RunInputs, SweepParam,
    SweepSpec,
};
use crate::pair::{trace_digest, trace_jsonl, PipelineError};
use crate::triad::Selector;

#[derive(Debug)]
pub enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Validation(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Runtime(e.into())
}

fn from_eval(e: EvalError) -> CliError {
    match e {
        EvalError::Pipeline(PipelineError::InvalidPair { .. })
        | EvalError::MissingResult(_)
        | EvalError::UnknownResult(_)
        | EvalError::DuplicateResult(_)
        | EvalError::BadSweep(_) => invalid(e),
        other => runtime(other),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ctriad",
    version,
    about = "Contrastive triad retrieval with confidence-weighted pairwise inference"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate and deduplicate a reference manifest into a bank artifact.
    Ingest(IngestArgs),
    /// Print the selected triad for every query image as JSON Lines.
    Select(SelectArgs),
    /// Run every pair end to end and write results, trace and report.
    Infer(InferArgs),
    /// Score a results file against a dataset.
    Eval(EvalArgs),
    /// Replay a cached run across values of one threshold.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct BankArgs {
    /// Bank manifest (JSON Lines).
    #[arg(long)]
    pub bank: PathBuf,
    /// Binary embedding matrix for row-referencing manifests.
    #[arg(long)]
    pub bank_matrix: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    pub tau_dup: f64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Confusion-pair dataset (JSON Lines).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Binary embedding matrix for datasets that reference rows.
    #[arg(long)]
    pub query_matrix: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct ThresholdArgs {
    #[arg(long = "p", default_value_t = 50.0)]
    pub p: f64,
    #[arg(long = "t", default_value_t = 50.0)]
    pub t: f64,
    #[arg(long = "m", default_value_t = 30.0)]
    pub m: f64,
    #[arg(long, default_value_t = 0.10)]
    pub delta: f64,
}

impl ThresholdArgs {
    fn thresholds(&self) -> Result<Thresholds, CliError> {
        let t = Thresholds {
            p: self.p,
            t: self.t,
            m: self.m,
            delta: self.delta,
        };
        t.validate().map_err(invalid)?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdjudicatorArg {
    Abstain,
    Truth,
}

#[derive(Debug, Args)]
pub struct EngineArgs {
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    pub backend: BackendKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Response cache file (JSON Lines), created if missing.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Mock reliability: one value for all roles, or anchor,hard_negative,boundary_probe.
    #[arg(long, default_value = "0.8")]
    pub mock_reliability: String,
    /// Mock confidence range lo,hi (inclusive).
    #[arg(long, default_value = "40,95")]
    pub mock_confidence: String,
    #[arg(long, value_enum, default_value_t = AdjudicatorArg::Abstain)]
    pub mock_adjudicator: AdjudicatorArg,
    /// Mock fixture JSON; overrides the other mock flags. Missing labels come from the dataset.
    #[arg(long)]
    pub mock_fixture: Option<PathBuf>,
    /// TOML configuration for the HTTP backend.
    #[arg(long)]
    pub http_config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    pub tau_dup: f64,
    /// Output directory for bank.jsonl, bank.bin and dropped.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub bank: BankArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub bank: BankArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// results.jsonl written by `infer`; a sibling run.json supplies config and provenance.
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub bank: BankArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[command(flatten)]
    pub engine: EngineArgs,
    #[arg(long)]
    pub param: SweepParam,
    /// Comma-separated, strictly increasing.
    #[arg(long)]
    pub values: String,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub report: ReportFormat,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Config and provenance of an `infer` run, stored next to its results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub provenance: ReportProvenance,
    pub trace_sha256: String,
}

/// Parses `argv` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let (kind, err) = match &e {
                CliError::Validation(err) => ("invalid input", err),
                CliError::Runtime(err) => ("runtime failure", err),
            };
            eprintln!("error ({kind}): {err:#}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Select(a) => select(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(runtime)?;
    }
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn emit(out: Option<&Path>, contents: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, contents),
        None => std::io::stdout()
            .write_all(contents.as_bytes())
            .context("writing to stdout")
            .map_err(runtime),
    }
}

fn load_deduped(args: &BankArgs) -> Result<ReferenceBank, CliError> {
    let bank = load_bank(&args.bank, args.bank_matrix.as_deref()).map_err(invalid)?;
    let (bank, _) = deduplicate(&bank, args.tau_dup).map_err(invalid)?;
    Ok(bank)
}

fn load_data(args: &DataArgs) -> Result<Dataset, CliError> {
    load_dataset(&args.dataset, args.query_matrix.as_deref()).map_err(invalid)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|e| invalid(anyhow!("bad {what} value {v:?}: {e}")))
        })
        .collect()
}

fn mock_fixture(args: &EngineArgs, dataset: &Dataset) -> Result<MockFixture, CliError> {
    let mut fixture = match &args.mock_fixture {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(invalid)?;
            serde_json::from_str::<MockFixture>(&text)
                .with_context(|| format!("parsing {}", p.display()))
                .map_err(invalid)?
        }
        None => {
            let q: Vec<f64> = parse_list(&args.mock_reliability, "--mock-reliability")?;
            let reliability = match q.as_slice() {
                [q] => RoleReliability::uniform(*q),
                [a, h, b] => RoleReliability {
                    anchor: *a,
                    hard_negative: *h,
                    boundary_probe: *b,
                },
                _ => return Err(invalid(anyhow!("--mock-reliability takes 1 or 3 values"))),
            };
            let c: Vec<u32> = parse_list(&args.mock_confidence, "--mock-confidence")?;
            let [lo, hi] = c[..] else {
                return Err(invalid(anyhow!("--mock-confidence takes lo,hi")));
            };
            MockFixture {
                labels: Default::default(),
                reliability,
                confidence_range: [lo, hi],
                adjudicator: match args.mock_adjudicator {
                    AdjudicatorArg::Abstain => MockAdjudicator::Abstain,
                    AdjudicatorArg::Truth => MockAdjudicator::Truth,
                },
            }
        }
    };
    for (id, label) in dataset.labels() {
        fixture.labels.entry(id).or_insert(label);
    }
    Ok(fixture)
}

fn build_backend(args: &EngineArgs, dataset: &Dataset) -> Result<Backend, CliError> {
    let cache = match &args.cache {
        Some(p) => ResponseCache::open(p).map_err(invalid)?,
        None => ResponseCache::in_memory(),
    };
    let engine: Arc<dyn crate::comparison::ComparisonEngine> = match args.backend {
        BackendKind::Mock => {
            Arc::new(MockEngine::new(mock_fixture(args, dataset)?, args.seed).map_err(invalid)?)
        }
        BackendKind::Http => {
            let path = args
                .http_config
                .as_ref()
                .ok_or_else(|| invalid(anyhow!("--backend http requires --http-config")))?;
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(invalid)?;
            let config = HttpConfig::from_toml(&text).map_err(invalid)?;
            Arc::new(HttpEngine::new(config).map_err(invalid)?)
        }
    };
    Ok(Backend::new(engine, Arc::new(cache)))
}

fn thread_pool(n: usize) -> Result<rayon::ThreadPool, CliError> {
    if n == 0 {
        return Err(invalid(anyhow!("--parallel must be at least 1")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(runtime)
}

fn backend_name(kind: BackendKind) -> &'static str {
    match kind {
        BackendKind::Mock => "mock",
        BackendKind::Http => "http",
    }
}

fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String, CliError> {
    match format {
        ReportFormat::Json => Ok(report.to_json()),
        ReportFormat::Csv => report.to_csv().map_err(runtime),
    }
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let bank = load_bank(&a.manifest, a.matrix.as_deref()).map_err(invalid)?;
    let (deduped, dropped) = deduplicate(&bank, a.tau_dup).map_err(invalid)?;
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .map_err(runtime)?;
    deduped
        .write(&a.out.join("bank.jsonl"), &a.out.join("bank.bin"))
        .map_err(runtime)?;
    let mut drops = String::new();
    for d in &dropped {
        drops.push_str(&serde_json::to_string(d).expect("drop record serializes"));
        drops.push('\n');
    }
    write_file(&a.out.join("dropped.jsonl"), &drops)?;
    println!(
        "ingested {} entries (dim {}), kept {}, dropped {} at tau_dup={}",
        bank.len(),
        bank.dimension(),
        deduped.len(),
        dropped.len(),
        a.tau_dup
    );
    Ok(())
}

#[derive(Serialize)]
struct SelectLine<'a> {
    pair_id: &'a str,
    image_id: &'a str,
    triad: &'a crate::triad::Triad,
}

fn select(a: SelectArgs) -> Result<(), CliError> {
    let bank = load_deduped(&a.bank)?;
    let dataset = load_data(&a.data)?;
    let selector = Selector::default();
    let mut out = String::new();
    for pair in &dataset.pairs {
        for (img, _) in pair.images() {
            let triad = selector
                .select_triad(&bank, &pair.context(img))
                .map_err(invalid)?;
            let line = SelectLine {
                pair_id: &pair.pair_id,
                image_id: &img.id,
                triad: &triad,
            };
            out.push_str(&serde_json::to_string(&line).expect("triad serializes"));
            out.push('\n');
        }
    }
    emit(a.out.as_deref(), &out)
}

fn infer(a: InferArgs) -> Result<(), CliError> {
    let thresholds = a.thresholds.thresholds()?;
    let bank = load_deduped(&a.bank)?;
    let dataset = load_data(&a.data)?;
    let backend = build_backend(&a.engine, &dataset)?;
    let pool = thread_pool(a.engine.parallel)?;
    let selector = Selector::default();
    let inputs = RunInputs {
        bank: &bank,
        selector: &selector,
        backend: &backend,
        dataset: &dataset,
        config: RunConfig {
            thresholds,
            tau_dup: a.bank.tau_dup,
            seed: Some(a.engine.seed),
            backend: backend_name(a.engine.backend).into(),
        },
        provenance: ReportProvenance {
            bank_digest: bank.provenance().digest.clone(),
            dataset_digest: dataset.digest.clone(),
            template_digests: backend.templates.digests(),
        },
    };
    let (results, report) = pool
        .install(|| evaluate_run(&inputs, thresholds))
        .map_err(from_eval)?;

    let events: Vec<_> = results.iter().flat_map(|r| r.trace.iter()).collect();
    let digest = trace_digest(events.iter().copied());
    let record = RunRecord {
        config: report.config.clone(),
        provenance: report.provenance.clone(),
        trace_sha256: digest.clone(),
    };
    write_file(
        &a.out.join("trace.jsonl"),
        &trace_jsonl(events.iter().copied()),
    )?;
    write_file(&a.out.join("results.jsonl"), &results_jsonl(&results))?;
    write_file(
        &a.out.join("run.json"),
        &(serde_json::to_string_pretty(&record).expect("run record serializes") + "\n"),
    )?;
    let report_name = match a.report {
        ReportFormat::Json => "report.json",
        ReportFormat::Csv => "report.csv",
    };
    write_file(&a.out.join(report_name), &render_report(&report, a.report)?)?;

    let m = &report.metrics;
    println!(
        "pairs {}  set {}%  individual {}%  confusion {}%  abstention {}%",
        report.counts.pairs,
        crate::eval::percent(m.set_accuracy),
        crate::eval::percent(m.individual_accuracy),
        crate::eval::percent(m.confusion_rate),
        crate::eval::percent(m.abstention_rate),
    );
    println!("trace sha256 {digest}");
    let failures = backend.failure_log();
    if !failures.is_empty() {
        eprintln!("{} engine failures degraded to abstentions", failures.len());
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let dataset = load_data(&a.data)?;
    let results = read_results(&a.results).map_err(invalid)?;
    let mut report = compute_metrics(&results, &dataset.pairs).map_err(from_eval)?;
    let run_json = a.results.with_file_name("run.json");
    if run_json.exists() {
        let text = fs::read_to_string(&run_json)
            .with_context(|| format!("reading {}", run_json.display()))
            .map_err(invalid)?;
        let record: RunRecord = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", run_json.display()))
            .map_err(invalid)?;
        report.config = record.config;
        report.provenance = record.provenance;
    } else {
        report.provenance.dataset_digest = dataset.digest.clone();
    }
    emit(a.out.as_deref(), &render_report(&report, a.report)?)
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let fixed = a.thresholds.thresholds()?;
    let values: Vec<f64> = parse_list(&a.values, "--values")?;
    let spec = SweepSpec::new(a.param, values, fixed).map_err(from_eval)?;
    if a.engine.cache.is_none() {
        return Err(invalid(anyhow!(
            "sweep replays a cached run and requires --cache"
        )));
    }
    let bank = load_deduped(&a.bank)?;
    let dataset = load_data(&a.data)?;
    let mut backend = build_backend(&a.engine, &dataset)?;
    if backend.cache().is_empty() {
        bail_invalid("the cache is empty; run infer with the same --cache first")?;
    }
    backend.replay_only = true;
    let pool = thread_pool(a.engine.parallel)?;
    let selector = Selector::default();
    let inputs = RunInputs {
        bank: &bank,
        selector: &selector,
        backend: &backend,
        dataset: &dataset,
        config: RunConfig {
            thresholds: fixed,
            tau_dup: a.bank.tau_dup,
            seed: Some(a.engine.seed),
            backend: backend_name(a.engine.backend).into(),
        },
        provenance: ReportProvenance {
            bank_digest: bank.provenance().digest.clone(),
            dataset_digest: dataset.digest.clone(),
            template_digests: backend.templates.digests(),
        },
    };
    let table = pool
        .install(|| sweep_thresholds(&spec, &inputs))
        .map_err(from_eval)?;
    let text = match a.report {
        ReportFormat::Json => table.to_json(),
        ReportFormat::Csv => table.to_csv().map_err(runtime)?,
    };
    emit(a.out.as_deref(), &text)
}

fn bail_invalid(msg: &str) -> Result<(), CliError> {
    let r: anyhow::Result<()> = (|| bail!("{msg}"))();
    r.map_err(invalid)
}
