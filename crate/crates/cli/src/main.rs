//! Command-line front end: build and inspect keyword indexes, run the
//! samplers against tabular, seeded, or external model backends, run
//! the exact evaluations, and benchmark.
//!
//! Machine-readable output is CSV on stdout; diagnostics go to stderr.
//! Exit codes: 0 success, 2 input parse, 3 i/o, 4 transport, 5
//! enumeration budget, 64 usage.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use cdk_core::bench;
use cdk_core::corpus::{BucketPolicy, ConstraintSet, CorpusError, PersistError, SortedIndex};
use cdk_core::model::{
    serve_model, worst_case_instance, Endpoint, ExternalModelClient, LanguageModel, ModelError,
    SeededRandomModel, TabularModel, TerminationMode,
};
use cdk_core::oracle::{
    disc_kl_bound, exact_cd, exact_disc, exact_target, expected_rounds, kl, p_bad, worst_case_kl,
    OracleError,
};
use cdk_core::sampler::{disc_sample, DiscConfig, RoundLimit, SamplerError};
use cdk_core::types::{TokenId, TokenSeq, Vocabulary};
use cdk_core::verifier::{ppv_verify, VerifyError};

const EXIT_PARSE: i32 = 2;
const EXIT_IO: i32 = 3;
const EXIT_TRANSPORT: i32 = 4;
const EXIT_BUDGET: i32 = 5;
const EXIT_USAGE: i32 = 64;

struct AppError {
    code: i32,
    message: String,
}

impl AppError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        AppError {
            code,
            message: message.into(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        AppError::new(EXIT_USAGE, message)
    }

    fn parse(message: impl Into<String>) -> Self {
        AppError::new(EXIT_PARSE, message)
    }
}

impl From<CorpusError> for AppError {
    fn from(e: CorpusError) -> Self {
        AppError::new(EXIT_PARSE, e.to_string())
    }
}

impl From<PersistError> for AppError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::Io(io) => AppError::new(EXIT_IO, io.to_string()),
            other => AppError::new(EXIT_PARSE, other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::new(EXIT_IO, e.to_string())
    }
}

impl From<ModelError> for AppError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(io) => AppError::new(EXIT_IO, io.to_string()),
            ModelError::Transport(_)
            | ModelError::Protocol(_)
            | ModelError::InvalidDistribution(_) => AppError::new(EXIT_TRANSPORT, e.to_string()),
            other => AppError::new(EXIT_PARSE, other.to_string()),
        }
    }
}

impl From<OracleError> for AppError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Budget(_) => AppError::new(EXIT_BUDGET, e.to_string()),
            OracleError::Model(m) => m.into(),
            other => AppError::new(EXIT_PARSE, other.to_string()),
        }
    }
}

impl From<SamplerError> for AppError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(_) => AppError::new(EXIT_USAGE, e.to_string()),
            SamplerError::Model(m) => m.into(),
            other => AppError::new(EXIT_PARSE, other.to_string()),
        }
    }
}

impl From<VerifyError> for AppError {
    fn from(e: VerifyError) -> Self {
        AppError::new(EXIT_PARSE, e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "cdk",
    version,
    about = "Constrained-decoding kit: sorted-index prefix verification with an importance-sampling decoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a binary keyword index from a token text file (one keyword
    /// per line, space-separated decimal token ids).
    BuildIndex(BuildIndexArgs),
    /// Print the validity mask for candidate tokens after a prefix.
    Verify(VerifyArgs),
    /// Draw keyword samples; one CSV row per draw on stdout.
    Sample(SampleArgs),
    /// Exact KL/bound/step evaluation against a tabular model, one CSV
    /// row per K.
    Evaluate(EvaluateArgs),
    /// Build the two-token worst-case instance and print its exact
    /// distributions and divergences.
    WorstCase(WorstCaseArgs),
    /// Latency, load-time, and sampling-quality benchmarks (CSV).
    Bench(BenchArgs),
    /// Serve a model over the line-delimited wire protocol (stdio by
    /// default, or TCP with --tcp).
    ModelServe(ModelServeArgs),
}

#[derive(Args)]
struct BuildIndexArgs {
    /// Keyword text file
    #[arg(long)]
    keywords: PathBuf,
    /// Output index path
    #[arg(long)]
    out: PathBuf,
    /// Length-bucketing policy
    #[arg(long, default_value = "pow2")]
    bucket_policy: String,
    /// Vocabulary size; inferred as max token id + 1 when omitted
    #[arg(long)]
    vocab_size: Option<u32>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Index file
    #[arg(long)]
    index: PathBuf,
    /// Prefix tokens, space-separated (empty string for the root)
    #[arg(long, default_value = "")]
    prefix: String,
    /// Candidate tokens to verify, space-separated
    #[arg(long)]
    tokens: String,
}

#[derive(Args)]
struct SampleArgs {
    /// Index file
    #[arg(long)]
    index: PathBuf,
    /// Model selector: tabular:<path> | seeded:<seed> | external:<endpoint>
    #[arg(long)]
    model: String,
    /// Maximum sampling rounds: a positive integer, or "inf" [default: 4]
    #[arg(long = "K")]
    k: Option<String>,
    /// Top candidate count verified per step [default: 50]
    #[arg(long = "M")]
    m: Option<usize>,
    /// Sampling temperature [default: 1]
    #[arg(long = "temp")]
    temperature: Option<f64>,
    /// Termination mode (eok|prefixfree); defaults to prefixfree when
    /// the indexed set allows it
    #[arg(long)]
    mode: Option<String>,
    /// Number of draws [default: 1]
    #[arg(long)]
    draws: Option<u64>,
    /// RNG seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Sharpness of the seeded random model
    #[arg(long, default_value_t = 1.0)]
    concentration: f64,
    /// Optional JSON config file; flags win over config values
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Index file
    #[arg(long)]
    index: PathBuf,
    /// Tabular model selector (tabular:<path>)
    #[arg(long)]
    model: String,
    /// Comma-separated list of round limits
    #[arg(long = "K", default_value = "1,2,3,4")]
    k_list: String,
    /// Monte Carlo draws per K for the empirical columns
    #[arg(long, default_value_t = 20_000)]
    draws: u64,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Termination mode override (eok|prefixfree)
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct WorstCaseArgs {
    /// Probability mass outside the constraint set, in (0,1)
    #[arg(long)]
    p_bad: f64,
    /// Conditional probability of the kept branch under the bad token
    #[arg(long)]
    eps: f64,
}

#[derive(Args)]
struct BenchArgs {
    /// What to benchmark
    #[arg(long, default_value = "verify", value_parser = ["verify", "load", "quality"])]
    kind: String,
    /// Comma-separated keyword-set sizes
    #[arg(long, default_value = "1000,10000,100000,1000000")]
    sizes: String,
    /// Comma-separated top-candidate counts
    #[arg(long = "M", default_value = "50,100,500,1000")]
    m_list: String,
    /// Verification queries per scenario
    #[arg(long, default_value_t = 10_000)]
    queries: usize,
    /// Comma-separated round limits (quality benchmarks)
    #[arg(long = "K", default_value = "1,2,3,4")]
    k_list: String,
    /// Draws per grid point (quality benchmarks)
    #[arg(long, default_value_t = 20_000)]
    draws: u64,
    /// Index file (quality benchmarks)
    #[arg(long)]
    index: Option<PathBuf>,
    /// Tabular model selector (quality benchmarks)
    #[arg(long)]
    model: Option<String>,
    /// RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelServeArgs {
    /// Model selector: tabular:<path> | seeded:<seed>
    #[arg(long)]
    model: String,
    /// Vocabulary size (required for seeded models)
    #[arg(long)]
    vocab_size: Option<u32>,
    /// Maximum sequence length (required for seeded models)
    #[arg(long)]
    max_len: Option<usize>,
    /// Sharpness of the seeded random model
    #[arg(long, default_value_t = 1.0)]
    concentration: f64,
    /// Listen on this TCP address instead of stdio
    #[arg(long)]
    tcp: Option<String>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::BuildIndex(args) => cmd_build_index(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::WorstCase(args) => cmd_worst_case(args),
        Command::Bench(args) => cmd_bench(args),
        Command::ModelServe(args) => cmd_model_serve(args),
    };
    if let Err(e) = result {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

fn parse_mode(s: &str) -> Result<TerminationMode, AppError> {
    s.parse::<TerminationMode>().map_err(AppError::usage)
}

fn parse_rounds(s: &str) -> Result<RoundLimit, AppError> {
    if s == "inf" {
        return Ok(RoundLimit::Infinite);
    }
    let k: u32 = s.parse().map_err(|_| {
        AppError::usage(format!("K must be a positive integer or \"inf\", got {s:?}"))
    })?;
    if k == 0 {
        return Err(AppError::usage("K must be at least 1"));
    }
    Ok(RoundLimit::Finite(k))
}

fn parse_token_list(s: &str) -> Result<Vec<TokenId>, AppError> {
    s.split_whitespace()
        .map(|t| {
            t.parse::<u32>()
                .map(TokenId)
                .map_err(|_| AppError::parse(format!("invalid token {t:?}")))
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, AppError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| AppError::usage(format!("invalid {what} entry {p:?}")))
        })
        .collect()
}

fn cmd_build_index(args: BuildIndexArgs) -> Result<(), AppError> {
    let policy: BucketPolicy = args.bucket_policy.parse().map_err(AppError::usage)?;
    let text = std::fs::read_to_string(&args.keywords)?;
    let set = ConstraintSet::from_text(&text, args.vocab_size)?;
    let idx = SortedIndex::build(&set, policy)?;
    idx.save(&args.out).map_err(|e| match e {
        PersistError::Io(io) => AppError::new(EXIT_IO, io.to_string()),
        other => AppError::new(EXIT_IO, other.to_string()),
    })?;
    eprintln!(
        "indexed {} keywords (vocab {}, prefix_free {})",
        idx.total_count(),
        idx.vocab_size(),
        idx.prefix_free()
    );
    for (i, b) in idx.buckets().iter().enumerate() {
        eprintln!(
            "bucket {i}: lengths {}..={}, width {}, rows {}",
            b.min_len(),
            b.max_len(),
            b.width(),
            b.count()
        );
    }
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), AppError> {
    let idx = SortedIndex::load(&args.index)?;
    let prefix = TokenSeq::new(parse_token_list(&args.prefix)?);
    let tokens = parse_token_list(&args.tokens)?;
    if tokens.is_empty() {
        return Err(AppError::usage("no candidate tokens given"));
    }
    let mask = ppv_verify(&idx, &prefix, &tokens)?;
    let mut out = String::new();
    for t in &tokens {
        let _ = write!(out, "{}:{} ", t, u8::from(mask.is_allowed(*t)));
    }
    let _ = write!(out, "eok:{}", u8::from(mask.eok_allowed()));
    println!("{out}");
    Ok(())
}

/// Optional JSON config file backing the sampling flags; explicit flags
/// win over config values, config values win over built-in defaults.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(rename = "K")]
    k: Option<String>,
    #[serde(rename = "M")]
    m: Option<usize>,
    temp: Option<f64>,
    mode: Option<String>,
    draws: Option<u64>,
    seed: Option<u64>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, AppError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| AppError::parse(format!("bad config file: {e}")))
        }
    }
}

enum ModelBackend {
    Tabular(TabularModel),
    Seeded(SeededRandomModel),
    External(ExternalModelClient),
}

impl ModelBackend {
    fn as_model(&self) -> &dyn LanguageModel {
        match self {
            ModelBackend::Tabular(m) => m,
            ModelBackend::Seeded(m) => m,
            ModelBackend::External(m) => m,
        }
    }
}

/// Resolves a `tabular:<path> | seeded:<seed> | external:<endpoint>`
/// selector. Seeded and external backends take their vocabulary and
/// length limit from the index.
fn open_model(
    selector: &str,
    idx: &SortedIndex,
    concentration: f64,
) -> Result<ModelBackend, AppError> {
    if let Some(path) = selector.strip_prefix("tabular:") {
        return Ok(ModelBackend::Tabular(TabularModel::load(path)?));
    }
    if let Some(seed) = selector.strip_prefix("seeded:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| AppError::usage(format!("bad seeded model seed {seed:?}")))?;
        return Ok(ModelBackend::Seeded(SeededRandomModel::new(
            Vocabulary::new(idx.vocab_size()),
            idx.max_keyword_len(),
            seed,
            concentration,
        )));
    }
    if let Some(endpoint) = selector.strip_prefix("external:") {
        let endpoint = Endpoint::parse(endpoint)?;
        let client = ExternalModelClient::connect(
            &endpoint,
            Vocabulary::new(idx.vocab_size()),
            idx.max_keyword_len(),
            Some(Duration::from_secs(30)),
        )?;
        return Ok(ModelBackend::External(client));
    }
    Err(AppError::usage(format!(
        "bad model selector {selector:?} (expected tabular:<path>|seeded:<seed>|external:<endpoint>)"
    )))
}

fn cmd_sample(args: SampleArgs) -> Result<(), AppError> {
    let file_cfg = load_file_config(&args.config)?;
    let idx = SortedIndex::load(&args.index)?;
    let model = open_model(&args.model, &idx, args.concentration)?;

    let rounds = parse_rounds(args.k.or(file_cfg.k).unwrap_or_else(|| "4".into()).as_str())?;
    let top_m = args.m.or(file_cfg.m).unwrap_or(50);
    if top_m == 0 {
        return Err(AppError::usage("M must be at least 1"));
    }
    let temperature = args.temperature.or(file_cfg.temp).unwrap_or(1.0);
    let mode = match args.mode.or(file_cfg.mode) {
        Some(s) => parse_mode(&s)?,
        None if idx.prefix_free() => TerminationMode::PrefixFree,
        None => TerminationMode::Eok,
    };
    let draws = args.draws.or(file_cfg.draws).unwrap_or(1);
    let seed = args.seed.or(file_cfg.seed).unwrap_or(0);

    let cfg = DiscConfig {
        rounds,
        top_m: top_m.min(idx.vocab_size() as usize),
        temperature,
        termination: mode,
        max_len_guard: idx.max_keyword_len(),
        seed,
    };
    cfg.validate_for(&idx)?;

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "draw,sequence,log_importance,rounds_used,accepted_by")?;
    for draw in 0..draws {
        let mut rng = cfg.rng_for_draw(draw);
        let outcome = disc_sample(model.as_model(), &idx, &cfg, &mut rng)?;
        writeln!(
            out,
            "{},{},{},{},{}",
            draw,
            outcome.sequence,
            outcome.log_importance,
            outcome.rounds_used,
            outcome.accepted_by
        )?;
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), AppError> {
    let Some(path) = args.model.strip_prefix("tabular:") else {
        return Err(AppError::usage(
            "evaluate requires an exact model (tabular:<path>)",
        ));
    };
    let model = TabularModel::load(path)?;
    let idx = SortedIndex::load(&args.index)?;
    let set = idx.to_constraint_set();
    let mode = match &args.mode {
        Some(s) => parse_mode(s)?,
        None => TerminationMode::default_for(&set),
    };
    let ks: Vec<u32> = parse_list(&args.k_list, "K")?;
    if ks.contains(&0) {
        return Err(AppError::usage("K must be at least 1"));
    }

    let bad = p_bad(&model, &set, mode)?;
    let target = exact_target(&model, &set, mode)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(
        out,
        "K,p_bad,kl_exact,kl_bound,expected_rounds,empirical_mean_rounds,empirical_tv,status"
    )?;
    for &k in &ks {
        let disc = exact_disc(&model, &set, mode, k)?;
        let kl_exact = kl(&target, &disc);
        let bound = disc_kl_bound(bad, k)?;
        let rounds_formula = expected_rounds(bad, k)?;
        let cfg = DiscConfig {
            rounds: RoundLimit::Finite(k),
            seed: args.seed,
            ..DiscConfig::exact(&idx, mode)
        };
        let mut counts: BTreeMap<TokenSeq, u64> = BTreeMap::new();
        let mut total_draws = 0usize;
        for draw in 0..args.draws {
            let mut rng = cfg.rng_for_draw(draw);
            let outcome = disc_sample(&model, &idx, &cfg, &mut rng)?;
            total_draws += outcome.total_draws();
            *counts.entry(outcome.sequence).or_insert(0) += 1;
        }
        let mean_rounds = total_draws as f64 / args.draws as f64;
        let tv = target.tv_from_counts(&counts, args.draws);
        let status = if kl_exact <= bound + 1e-12 { "PASS" } else { "FAIL" };
        writeln!(
            out,
            "{k},{bad},{kl_exact},{bound},{rounds_formula},{mean_rounds},{tv},{status}"
        )?;
    }
    Ok(())
}

fn cmd_worst_case(args: WorstCaseArgs) -> Result<(), AppError> {
    let (model, set) = worst_case_instance(args.p_bad, args.eps)
        .map_err(|e| AppError::usage(e.to_string()))?;
    let target = exact_target(&model, &set, TerminationMode::Eok)?;
    let masked = exact_cd(&model, &set, TerminationMode::Eok)?;
    let closed =
        worst_case_kl(args.p_bad, args.eps).map_err(|e| AppError::usage(e.to_string()))?;
    let generic = kl(&target, &masked);
    let reference = (1.0 / (1.0 - args.p_bad)).ln();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "kind,key,value")?;
    for (seq, p) in target.iter() {
        writeln!(out, "target,{seq},{p}")?;
    }
    for (seq, p) in masked.iter() {
        writeln!(out, "masked,{seq},{p}")?;
    }
    writeln!(out, "metric,closed_form_kl,{closed}")?;
    writeln!(out, "metric,generic_kl,{generic}")?;
    writeln!(out, "metric,log_one_over_one_minus_p_bad,{reference}")?;
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), AppError> {
    let csv = match args.kind.as_str() {
        "verify" => {
            let sizes: Vec<usize> = parse_list(&args.sizes, "size")?;
            let ms: Vec<usize> = parse_list(&args.m_list, "M")?;
            let reports = bench::bench_verify(&sizes, &ms, args.queries, args.seed);
            bench::write_reports_csv(&reports)
        }
        "load" => {
            let sizes: Vec<usize> = parse_list(&args.sizes, "size")?;
            let reports = bench::bench_load(&sizes, args.seed);
            bench::write_reports_csv(&reports)
        }
        "quality" => {
            let Some(index) = &args.index else {
                return Err(AppError::usage("quality benchmarks require --index"));
            };
            let Some(model) = &args.model else {
                return Err(AppError::usage(
                    "quality benchmarks require --model tabular:<path>",
                ));
            };
            let Some(path) = model.strip_prefix("tabular:") else {
                return Err(AppError::usage(
                    "quality benchmarks require an exact model (tabular:<path>)",
                ));
            };
            let model = TabularModel::load(path)?;
            let idx = SortedIndex::load(index)?;
            let set = idx.to_constraint_set();
            let ks: Vec<u32> = parse_list(&args.k_list, "K")?;
            let ms: Vec<usize> = parse_list(&args.m_list, "M")?;
            let rows =
                bench::quality_sweep(&model, &set, &ks, &ms, args.draws as usize, args.seed)?;
            bench::write_quality_csv(&rows)
        }
        other => return Err(AppError::usage(format!("unknown bench kind {other:?}"))),
    };
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_model_serve(args: ModelServeArgs) -> Result<(), AppError> {
    let model: Box<dyn LanguageModel> = if let Some(path) = args.model.strip_prefix("tabular:") {
        Box::new(TabularModel::load(path)?)
    } else if let Some(seed) = args.model.strip_prefix("seeded:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| AppError::usage(format!("bad seeded model seed {seed:?}")))?;
        let (Some(vocab), Some(max_len)) = (args.vocab_size, args.max_len) else {
            return Err(AppError::usage(
                "seeded models need --vocab-size and --max-len to serve",
            ));
        };
        Box::new(SeededRandomModel::new(
            Vocabulary::new(vocab),
            max_len,
            seed,
            args.concentration,
        ))
    } else {
        return Err(AppError::usage(format!(
            "bad model selector {:?} (expected tabular:<path>|seeded:<seed>)",
            args.model
        )));
    };

    match &args.tcp {
        None => {
            serve_model(
                model.as_ref(),
                std::io::stdin().lock(),
                std::io::stdout().lock(),
            )?;
        }
        Some(addr) => {
            let listener = std::net::TcpListener::bind(addr)
                .map_err(|e| AppError::new(EXIT_TRANSPORT, format!("bind {addr}: {e}")))?;
            eprintln!("serving on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                let reader = stream.try_clone()?;
                if let Err(e) = serve_model(model.as_ref(), reader, stream) {
                    eprintln!("session ended: {e}");
                }
            }
        }
    }
    Ok(())
}
