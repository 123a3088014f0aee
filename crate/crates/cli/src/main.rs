use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use trigserve::attention::{forward_reference, forward_taq, AttentionBundle};
use trigserve::bench::{ambiguity_self_check, run_bench, AblationConfig, BenchConfig};
use trigserve::budget::{budget_report, flops_from_bops32, DEFAULT_CHECKPOINT_BYTES};
use trigserve::numerics::mse;
use trigserve::par::Execution;
use trigserve::quantizers::{QuantKind, QuantSpec};
use trigserve::registry::Repository;
use trigserve::sensitivity::{probe_all_with, SpanMode};
use trigserve::synth::{
    fixture_corpus, generate_prompts, generate_repository, personalized_fixture, prompts_from_json,
    prompts_to_json, PromptSpec, RepoSpec, FIXTURE_CORPUS_SEED, FIXTURE_CORPUS_SIZE,
};
use trigserve_service::{AppState, HttpRerankClient, ServiceConfig};

/// Minimum share of ambiguous prompts that must open a clarification.
const SELF_CHECK_FLOOR: f64 = 0.9;

#[derive(Parser)]
#[command(
    name = "trigserve",
    version,
    about = "Trigger-aware checkpoint selection and quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic checkpoint repositories.
    Repo {
        #[command(subcommand)]
        command: RepoCommand,
    },
    /// Selection benchmark prompts.
    Prompts {
        #[command(subcommand)]
        command: PromptsCommand,
    },
    /// Run the selection benchmark and print a report.
    Bench(BenchArgs),
    /// Attention quantization demos.
    Quant {
        #[command(subcommand)]
        command: QuantCommand,
    },
    /// Per-token quantization sensitivity.
    Probe {
        #[command(subcommand)]
        command: ProbeCommand,
    },
    /// Bit-operation and memory report for a quantization preset.
    Budget(BudgetArgs),
    /// Synthetic attention fixtures.
    Fixtures {
        #[command(subcommand)]
        command: FixturesCommand,
    },
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum RepoCommand {
    Gen {
        #[arg(long, default_value_t = 20)]
        categories: usize,
        #[arg(long, default_value_t = 50)]
        versions: u32,
        #[arg(long, default_value_t = trigserve::synth::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PromptsCommand {
    Gen {
        #[arg(long)]
        repo: PathBuf,
        #[arg(long, default_value_t = trigserve::synth::DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 350)]
        single: usize,
        #[arg(long, default_value_t = 100)]
        ambiguous: usize,
        #[arg(long, default_value_t = 50)]
        no_match: usize,
        #[arg(long, default_value_t = 10)]
        pool_size: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    repo: PathBuf,
    /// JSON array of prompt instances.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, value_enum, default_value = "on")]
    retrieval: Toggle,
    #[arg(long, value_enum, default_value = "on")]
    reasoning: Toggle,
    /// Seeds candidate sampling when retrieval is off.
    #[arg(long, default_value_t = trigserve::synth::DEFAULT_SEED)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the per-instance log (JSON array) here.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    #[value(alias = "log")]
    Logarithmic,
}

impl From<KindArg> for QuantKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Linear => QuantKind::Linear,
            KindArg::Logarithmic => QuantKind::Logarithmic,
        }
    }
}

#[derive(Subcommand)]
enum QuantCommand {
    /// TAQ forward pass on a bundle, compared with full precision.
    Demo {
        /// Defaults to the built-in personalized fixture.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Weight and activation bits.
        #[arg(long, num_args = 2, value_names = ["W", "A"], default_values_t = [8, 8])]
        bits: Vec<u32>,
        #[arg(long, value_enum, default_value = "linear")]
        kind: KindArg,
        #[arg(long, overrides_with = "no_separate_triggers")]
        separate_triggers: bool,
        #[arg(long)]
        no_separate_triggers: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SpanArg {
    Unit,
    PerSubToken,
}

#[derive(Subcommand)]
enum ProbeCommand {
    Sensitivity {
        /// Defaults to the built-in personalized fixture.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        bits: u32,
        #[arg(long, value_enum, default_value = "linear")]
        kind: KindArg,
        #[arg(long, value_enum, default_value = "unit")]
        span_mode: SpanArg,
    },
}

#[derive(Args)]
struct BudgetArgs {
    #[arg(long, conflicts_with = "flops")]
    bops32: Option<f64>,
    #[arg(long)]
    flops: Option<f64>,
    /// Weight and activation bits.
    #[arg(long, num_args = 2, value_names = ["W", "A"], required = true)]
    bits: Vec<u32>,
    #[arg(long, default_value_t = DEFAULT_CHECKPOINT_BYTES)]
    weight_bytes: u64,
    #[arg(long, default_value_t = 0)]
    trigger_overhead_bytes: u64,
}

#[derive(Subcommand)]
enum FixturesCommand {
    /// Write personalized.json and corpus.json.
    Gen {
        #[arg(long, default_value = "fixtures")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "TRIGSERVE_REPO")]
    repo: Option<PathBuf>,
    #[arg(long, env = "TRIGSERVE_ADDR", default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, env = "TRIGSERVE_SESSION_TTL_SECS", default_value_t = 600)]
    session_ttl_secs: u64,
    #[arg(long, env = "TRIGSERVE_RERANKER_URL")]
    reranker_url: Option<String>,
    #[arg(long, env = "TRIGSERVE_RERANKER_TIMEOUT_MS", default_value_t = 2000)]
    reranker_timeout_ms: u64,
}

enum Failure {
    /// Bad input: exit code 2.
    Invalid(String),
    /// Anything else: exit code 1.
    Runtime(String),
}

impl From<trigserve::Error> for Failure {
    fn from(e: trigserve::Error) -> Self {
        match e {
            trigserve::Error::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Repo { command } => repo(command),
        Command::Prompts { command } => prompts(command),
        Command::Bench(args) => bench(args),
        Command::Quant { command } => quant(command),
        Command::Probe { command } => probe(command),
        Command::Budget(args) => budget(args),
        Command::Fixtures { command } => fixtures(command),
        Command::Serve(args) => serve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(value: &impl Serialize) -> Outcome {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load_bundle(path: Option<&Path>) -> Result<AttentionBundle, Failure> {
    let Some(path) = path else {
        return Ok(personalized_fixture());
    };
    let bundle: AttentionBundle = serde_json::from_str(&read(path)?)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    bundle.validate()?;
    Ok(bundle)
}

fn bit_pair(bits: &[u32]) -> (u32, u32) {
    (bits[0], bits[1])
}

fn repo(command: RepoCommand) -> Outcome {
    let RepoCommand::Gen {
        categories,
        versions,
        seed,
        out,
    } = command;
    let repo = generate_repository(&RepoSpec {
        categories,
        versions,
        seed,
    })?;
    repo.save(&out)?;
    eprintln!("wrote {} records to {}", repo.len(), out.display());
    Ok(())
}

fn prompts(command: PromptsCommand) -> Outcome {
    let PromptsCommand::Gen {
        repo,
        seed,
        out,
        single,
        ambiguous,
        no_match,
        pool_size,
    } = command;
    let repo = Repository::load(&repo)?;
    let spec = PromptSpec {
        single,
        ambiguous,
        no_match,
        pool_size,
        seed,
    };
    let instances = generate_prompts(&repo, &spec)?;
    if let Some(rate) = ambiguity_self_check(&repo, &instances)? {
        eprintln!(
            "self-check: {:.1}% of ambiguous prompts ask for clarification",
            rate * 100.0
        );
        if rate < SELF_CHECK_FLOOR {
            return Err(Failure::Invalid(format!(
                "only {:.1}% of ambiguous prompts need clarification (floor {:.0}%)",
                rate * 100.0,
                SELF_CHECK_FLOOR * 100.0
            )));
        }
    }
    write(&out, &prompts_to_json(&instances)?)?;
    eprintln!("wrote {} prompts to {}", instances.len(), out.display());
    Ok(())
}

fn bench(args: BenchArgs) -> Outcome {
    let repo = Repository::load(&args.repo)?;
    let instances = prompts_from_json(&read(&args.queries)?, &repo)?;
    let config = BenchConfig {
        ablation: AblationConfig {
            retrieval_on: args.retrieval.on(),
            reasoning_on: args.reasoning.on(),
        },
        seed: args.seed,
        ..BenchConfig::default()
    };
    let output = run_bench(&repo, &instances, &config)?;
    if let Some(path) = &args.log {
        let text = serde_json::to_string_pretty(&output.log)
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        write(path, &text)?;
    }
    match &args.report {
        Some(path) => {
            let text = serde_json::to_string_pretty(&output.report)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            write(path, &text)
        }
        None => print_json(&output.report),
    }
}

#[derive(Serialize)]
struct DemoReport {
    spec: QuantSpec,
    mse_vs_reference: f64,
    row_sum_deviation: f64,
}

fn quant(command: QuantCommand) -> Outcome {
    let QuantCommand::Demo {
        bundle,
        bits,
        kind,
        no_separate_triggers,
        ..
    } = command;
    let bundle = load_bundle(bundle.as_deref())?;
    let (w, a) = bit_pair(&bits);
    let spec = QuantSpec::new(kind.into(), w, a, !no_separate_triggers)?;
    let out = forward_taq(&bundle, &spec)?;
    let reference = forward_reference(&bundle)?;
    print_json(&DemoReport {
        spec,
        mse_vs_reference: mse(&out.y, &reference.y)?,
        row_sum_deviation: out.row_sum_deviation,
    })
}

fn probe(command: ProbeCommand) -> Outcome {
    let ProbeCommand::Sensitivity {
        bundle,
        bits,
        kind,
        span_mode,
    } = command;
    let bundle = load_bundle(bundle.as_deref())?;
    let span_mode = match span_mode {
        SpanArg::Unit => SpanMode::Unit,
        SpanArg::PerSubToken => SpanMode::PerSubToken,
    };
    let report = probe_all_with(&bundle, bits, kind.into(), span_mode, Execution::default())?;
    print_json(&report)
}

fn budget(args: BudgetArgs) -> Outcome {
    let flops = match (args.flops, args.bops32) {
        (Some(f), _) => f,
        (None, Some(b)) => flops_from_bops32(b),
        (None, None) => return Err(Failure::Invalid("give --flops or --bops32".into())),
    };
    let (w, a) = bit_pair(&args.bits);
    print_json(&budget_report(
        flops,
        w,
        a,
        args.weight_bytes,
        args.trigger_overhead_bytes,
    )?)
}

fn fixtures(command: FixturesCommand) -> Outcome {
    let FixturesCommand::Gen { out_dir } = command;
    fs::create_dir_all(&out_dir)?;
    write(
        &out_dir.join("personalized.json"),
        &fixture_json(&personalized_fixture())?,
    )?;
    write(
        &out_dir.join("corpus.json"),
        &fixture_json(&fixture_corpus(FIXTURE_CORPUS_SEED, FIXTURE_CORPUS_SIZE))?,
    )?;
    eprintln!("wrote fixtures to {}", out_dir.display());
    Ok(())
}

fn fixture_json(value: &impl Serialize) -> Result<String, Failure> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

fn serve(args: ServeArgs) -> Outcome {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let repo = args.repo.as_deref().map(Repository::load).transpose()?;
    let reranker = args.reranker_url.as_ref().map(|url| {
        Arc::new(HttpRerankClient::new(
            url.clone(),
            Duration::from_millis(args.reranker_timeout_ms),
        )) as Arc<dyn trigserve::selection::RerankClient>
    });
    let state = AppState::new(
        repo,
        ServiceConfig {
            session_ttl: Duration::from_secs(args.session_ttl_secs),
            reranker,
            ..ServiceConfig::default()
        },
    );
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&args.addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        if let Some(path) = args.repo.clone() {
            tokio::spawn(reload_on_hangup(state.clone(), path));
        }
        trigserve_service::serve(listener, state).await?;
        Ok(())
    })
}

#[cfg(unix)]
async fn reload_on_hangup(state: AppState, path: PathBuf) {
    use tokio::signal::unix::{signal, SignalKind};
    let Ok(mut hangups) = signal(SignalKind::hangup()) else {
        tracing::warn!("SIGHUP handler unavailable; reload disabled");
        return;
    };
    while hangups.recv().await.is_some() {
        let loaded = tokio::task::spawn_blocking({
            let path = path.clone();
            move || Repository::load(&path)
        })
        .await;
        match loaded {
            Ok(Ok(repo)) => {
                let n = repo.len();
                let generation = state.publish(repo);
                tracing::info!(generation, records = n, "repository reloaded");
            }
            Ok(Err(e)) => tracing::error!(error = %e, "reload failed; keeping current snapshot"),
            Err(e) => tracing::error!(error = %e, "reload task failed"),
        }
    }
}

#[cfg(not(unix))]
async fn reload_on_hangup(_state: AppState, _path: PathBuf) {}
