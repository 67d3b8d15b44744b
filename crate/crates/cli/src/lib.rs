//! `groundloop` command implementations.
//!
//! stdout carries JSON only. Logs and tables go to stderr. Exit codes: 0 on
//! success (or a PASS verdict), 1 on a FAIL verdict, 2 on configuration or
//! infrastructure errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use groundloop_core::config::{BackendSource, BackendSpec, ExecutorKind, Settings};
use groundloop_core::eval::{
    ablation_configs, evaluate_patch, load_suite, run_ablation_suite, solve_all, BenchmarkInstance, EvalOptions,
    EvalReport,
};
use groundloop_core::orchestrator::{run_pipeline, EventKind, EventSink, FailureKind, PipelineDeps, RunResult};
use groundloop_core::retrieval::{read_manifest, Collection, EpisodicMemory, RepoIndex, SourceFilter};
use groundloop_core::sandbox::ResourceLimits;
use groundloop_core::types::{ContextFile, RelPath, Task};
use serde_json::{json, Value};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

/// Default config file looked up in the working directory.
pub const DEFAULT_CONFIG: &str = "groundloop.toml";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Infra(String),
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    fn infra(e: impl std::fmt::Display) -> Self {
        CliError::Infra(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "groundloop", version, about = "Execution-grounded multi-agent code repair")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Settings file (TOML). Defaults to ./groundloop.toml when present.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Model backend: "remote" (token from the env var named by model.token_env)
    /// or "scripted:<file or directory>".
    #[arg(long, global = true, value_name = "SPEC")]
    pub backend: Option<String>,
    /// Sampling seed [default: 42]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sampling temperature [default: 0.0]
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Sandbox executor: auto, container or subprocess.
    #[arg(long, global = true, value_name = "KIND")]
    pub executor: Option<String>,
    /// Write log lines to stderr as JSON objects.
    #[arg(long, global = true)]
    pub json: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline on one task and print its result.
    Run(RunArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Index a repository for retrieval.
    Index(IndexArgs),
    /// Inspect episodic memory.
    #[command(subcommand)]
    Memory(MemoryCommand),
    /// Evaluate patches (or the pipeline) against a benchmark suite.
    Eval(EvalArgs),
    /// Run the agent ablation sweep over a suite.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Task file: JSON with id, description and context_files.
    #[arg(value_name = "TASK_FILE", conflicts_with = "description", required_unless_present = "description")]
    pub task: Option<PathBuf>,
    /// Inline task description, used instead of a task file.
    #[arg(short, long)]
    pub description: Option<String>,
    /// Task id for an inline description.
    #[arg(long, default_value = "cli-task", requires = "description")]
    pub id: String,
    /// Context file for an inline description, relative to --root.
    #[arg(short, long = "file", value_name = "PATH", requires = "description")]
    pub files: Vec<String>,
    /// Repository to index for retrieval; also the base for --file.
    #[arg(long, value_name = "DIR")]
    pub root: Option<PathBuf>,
    /// Do not read or write episodic memory.
    #[arg(long)]
    pub no_memory: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Listen address, overriding service.bind.
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub no_memory: bool,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    pub root: PathBuf,
    /// Also print the top hits for this query after indexing.
    #[arg(long)]
    pub query: Option<String>,
    #[arg(short, long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Subcommand)]
pub enum MemoryCommand {
    /// Stored episodes: ids and task prefixes.
    List,
    /// Top-k episodes for a text, with similarities.
    Query {
        text: String,
        #[arg(short, long, default_value_t = 5)]
        k: usize,
    },
    /// Record count and store metadata.
    Stats,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Suite file (JSON lines).
    pub suite: PathBuf,
    /// Directory of `<instance_id>.diff` (or `.patch`) files. A missing file
    /// counts as an empty patch.
    #[arg(long, value_name = "DIR", conflicts_with = "gold")]
    pub patches: Option<PathBuf>,
    /// Evaluate each instance's gold patch.
    #[arg(long)]
    pub gold: bool,
    #[command(flatten)]
    pub budget: Budget,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    pub suite: PathBuf,
    #[command(flatten)]
    pub budget: Budget,
}

#[derive(Debug, Args)]
pub struct Budget {
    /// Timeout for one test-suite run, in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub test_timeout: f64,
    /// Wall-clock budget for one instance, in seconds.
    #[arg(long, default_value_t = 300.0)]
    pub instance_timeout: f64,
    /// Instances evaluated at once.
    #[arg(long, default_value_t = 2)]
    pub parallel: usize,
}

impl Budget {
    fn options(&self, limits: ResourceLimits) -> EvalOptions {
        EvalOptions {
            limits: ResourceLimits {
                timeout_seconds: self.test_timeout,
                ..limits
            },
            instance_timeout_s: self.instance_timeout,
        }
    }
}

/// Parses arguments and runs the command, returning the exit code.
pub fn main_with(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_PASS };
            let _ = e.print();
            return code;
        }
    };
    init_logging(&cli.global);
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| dispatch(&cli))) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            log::error!("{e}");
            EXIT_ERROR
        }
        Err(_) => {
            log::error!("internal error");
            EXIT_ERROR
        }
    }
}

fn init_logging(global: &GlobalArgs) {
    let level = match global.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let mut builder = env_logger::Builder::new();
    builder.filter_level(log::LevelFilter::Warn).filter_module("groundloop", level);
    builder.target(env_logger::Target::Stderr);
    if global.json {
        builder.format(|buf, record| {
            let line = json!({
                "level": record.level().as_str().to_ascii_lowercase(),
                "target": record.target(),
                "message": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    } else {
        builder.format(|buf, record| writeln!(buf, "{}: {}", record.level().as_str().to_ascii_lowercase(), record.args()));
    }
    builder.parse_env("GROUNDLOOP_LOG");
    let _ = builder.try_init();
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let settings = load_settings(&cli.global)?;
    match &cli.command {
        Command::Run(a) => cmd_run(&settings, a),
        Command::Serve(a) => cmd_serve(&settings, a),
        Command::Index(a) => cmd_index(&settings, a),
        Command::Memory(m) => cmd_memory(&settings, m),
        Command::Eval(a) => cmd_eval(&settings, a),
        Command::Ablate(a) => cmd_ablate(&settings, a),
    }
}

/// Config file, then flag overrides.
pub fn load_settings(global: &GlobalArgs) -> Result<Settings, CliError> {
    let mut settings = match &global.config {
        Some(path) => Settings::load(path).map_err(CliError::config)?,
        None if Path::new(DEFAULT_CONFIG).is_file() => Settings::load(Path::new(DEFAULT_CONFIG)).map_err(CliError::config)?,
        None => Settings::default(),
    };
    if let Some(b) = &global.backend {
        settings.model.backend = b.clone();
    }
    if let Some(s) = global.seed {
        settings.model.seed = s;
    }
    if let Some(t) = global.temperature {
        settings.model.temperature = t;
    }
    if let Some(e) = &global.executor {
        settings.sandbox.executor = match e.as_str() {
            "auto" => ExecutorKind::Auto,
            "container" => ExecutorKind::Container,
            "subprocess" => ExecutorKind::Subprocess,
            other => return Err(CliError::Config(format!("unknown executor {other:?}"))),
        };
    }
    settings.validate().map_err(CliError::config)?;
    Ok(settings)
}

/// Backend source, refusing a remote backend whose token variable is unset.
fn backend_source(settings: &Settings) -> Result<BackendSource, CliError> {
    let source = settings.backends().map_err(CliError::config)?;
    if *source.spec() == BackendSpec::Remote {
        let var = &settings.model.token_env;
        if std::env::var(var).map(|v| v.is_empty()).unwrap_or(true) {
            return Err(CliError::Config(format!(
                "remote backend needs a token in the {var} environment variable (or use --backend scripted:<path>)"
            )));
        }
    }
    Ok(source)
}

fn print_json(value: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer_pretty(&mut out, value);
    let _ = writeln!(out);
}

fn to_json(value: impl serde::Serialize) -> Value {
    serde_json::to_value(value).unwrap_or(Value::Null)
}

/// Logs pipeline progress to stderr.
struct StderrEvents;

impl EventSink for StderrEvents {
    fn emit(&self, kind: EventKind, payload: Value) {
        match kind {
            EventKind::Token => {}
            EventKind::StepStarted | EventKind::DebugAttempt | EventKind::ExecutionResult | EventKind::Verdict => {
                log::info!("{}: {}", kind.as_str(), compact(&payload))
            }
            _ => log::debug!("{}: {}", kind.as_str(), compact(&payload)),
        }
    }
}

fn compact(v: &Value) -> String {
    let mut s = v.to_string();
    if s.len() > 200 {
        let mut cut = 200;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
        s.push_str("...");
    }
    s
}

fn read_task(args: &RunArgs) -> Result<Task, CliError> {
    if let Some(path) = &args.task {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        return groundloop_service::parse_task(&value)
            .map_err(|(_, body)| CliError::Config(format!("{}: {}", path.display(), body["error"].as_str().unwrap_or(""))));
    }
    let description = args.description.clone().unwrap_or_default();
    let base = args.root.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut files = Vec::new();
    for f in &args.files {
        let path = RelPath::new(f).map_err(CliError::config)?;
        let full = base.join(f);
        let content =
            std::fs::read_to_string(&full).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?;
        files.push(ContextFile { path, content });
    }
    Task::new(args.id.clone(), description, files).map_err(CliError::config)
}

/// Exit code for a finished run.
pub fn run_exit_code(result: &RunResult) -> i32 {
    if result.verdict.is_pass() {
        return EXIT_PASS;
    }
    match result.failure.as_ref().map(|f| f.kind) {
        Some(FailureKind::Infrastructure | FailureKind::Config | FailureKind::Backend | FailureKind::Retrieval) => {
            EXIT_ERROR
        }
        _ => EXIT_FAIL,
    }
}

fn cmd_run(settings: &Settings, args: &RunArgs) -> Result<i32, CliError> {
    let task = read_task(args)?;
    let config = settings.run_config();
    config.validate().map_err(CliError::config)?;
    let backend = backend_source(settings)?.backend(&task.id.0).map_err(CliError::config)?;
    let sandbox = settings.sandbox().map_err(CliError::config)?;
    let memory = if args.no_memory {
        None
    } else {
        Some(settings.open_memory().map_err(CliError::config)?)
    };
    let repo = match &args.root {
        Some(root) => {
            let embedder = settings.embedder();
            let collection = Arc::new(Collection::in_memory(embedder.dimension(), embedder.id(), settings.search_backend()));
            let index = RepoIndex::new(root, collection, embedder, SourceFilter::default()).map_err(CliError::infra)?;
            let summary = index.index_repository().map_err(CliError::infra)?;
            log::info!("indexed {} files under {}", summary.indexed, root.display());
            Some(index)
        }
        None => None,
    };
    log::info!("running task {} with {}", task.id, config.label());
    let deps = PipelineDeps {
        backend: backend.as_ref(),
        sandbox: &sandbox,
        memory: memory.as_ref(),
        repo: repo.as_ref(),
        events: &StderrEvents,
    };
    let result = run_pipeline(&task, &config, &deps);
    match &result.failure {
        Some(f) => log::warn!("verdict FAIL: {:?}: {}", f.kind, f.message),
        None => log::info!("verdict {:?}: {}", result.verdict.value, result.verdict.rationale),
    }
    print_json(&to_json(&result));
    Ok(run_exit_code(&result))
}

fn cmd_serve(settings: &Settings, args: &ServeArgs) -> Result<i32, CliError> {
    let config = settings.run_config();
    config.validate().map_err(CliError::config)?;
    let backends = backend_source(settings)?;
    let sandbox = settings.sandbox().map_err(CliError::config)?;
    let memory = if args.no_memory {
        None
    } else {
        Some(Arc::new(settings.open_memory().map_err(CliError::config)?))
    };
    let mut state = groundloop_service::ServiceState::new(config, backends, sandbox, memory);
    state.max_active_runs = settings.service.max_active_runs;
    state.subscriber_buffer = settings.service.subscriber_buffer;
    let bind = args.bind.clone().unwrap_or_else(|| settings.service.bind.clone());
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::infra)?;
    log::info!("listening on {bind}");
    runtime
        .block_on(groundloop_service::serve(Arc::new(state), &bind))
        .map_err(CliError::infra)?;
    Ok(EXIT_PASS)
}

fn cmd_index(settings: &Settings, args: &IndexArgs) -> Result<i32, CliError> {
    let embedder = settings.embedder();
    let collection = Collection::open(
        &settings.retrieval.index_dir,
        embedder.dimension(),
        embedder.id(),
        settings.search_backend(),
    )
    .map_err(CliError::infra)?;
    let index =
        RepoIndex::new(&args.root, Arc::new(collection), embedder, SourceFilter::default()).map_err(CliError::infra)?;
    let summary = index.index_repository().map_err(CliError::infra)?;
    log::info!(
        "{} documents ({} embedded, {} unchanged, {} removed, {} skipped)",
        summary.indexed,
        summary.embedded,
        summary.unchanged,
        summary.removed,
        summary.skipped.len()
    );
    let mut out = json!({"root": args.root.display().to_string(), "summary": summary});
    if let Some(q) = &args.query {
        out["hits"] = to_json(index.query(q, args.k).map_err(CliError::infra)?);
    }
    print_json(&out);
    Ok(EXIT_PASS)
}

fn prefix(text: &str, chars: usize) -> String {
    let mut p: String = text.chars().take(chars).collect();
    if p.len() < text.len() {
        p.push_str("...");
    }
    p
}

fn cmd_memory(settings: &Settings, command: &MemoryCommand) -> Result<i32, CliError> {
    let dir = &settings.retrieval.memory_dir;
    if !matches!(command, MemoryCommand::Stats) && !dir.is_dir() {
        return Err(CliError::Config(format!("no memory store at {}", dir.display())));
    }
    let memory = EpisodicMemory::open(dir, settings.embedder(), settings.search_backend()).map_err(CliError::infra)?;
    match command {
        MemoryCommand::List => {
            let items: Vec<Value> = memory
                .list()
                .iter()
                .map(|r| json!({"id": r.id, "task_id": r.task_id, "task": prefix(&r.task_text, 60), "created_at": r.created_at}))
                .collect();
            for i in &items {
                log::info!("{}  {}", i["id"].as_str().unwrap_or(""), i["task"].as_str().unwrap_or(""));
            }
            print_json(&Value::Array(items));
        }
        MemoryCommand::Query { text, k } => {
            let hits = memory.query(text, *k).map_err(CliError::infra)?;
            for h in &hits {
                log::info!("{:.4}  {}", h.similarity, h.id);
            }
            print_json(&to_json(hits));
        }
        MemoryCommand::Stats => {
            let manifest = read_manifest(dir).ok();
            print_json(&json!({
                "dir": dir.display().to_string(),
                "count": memory.len(),
                "dimension": memory.embedder().dimension(),
                "provider": memory.embedder().id(),
                "manifest": manifest,
            }));
        }
    }
    Ok(EXIT_PASS)
}

fn load_nonempty_suite(path: &Path) -> Result<Vec<BenchmarkInstance>, CliError> {
    let suite = load_suite(path).map_err(CliError::config)?;
    if suite.is_empty() {
        // Surfaces the report's own error for an empty suite.
        return Err(CliError::config(EvalReport::new(Vec::new()).err().map(|e| e.to_string()).unwrap_or_default()));
    }
    Ok(suite)
}

fn read_patch(dir: &Path, id: &str) -> String {
    ["diff", "patch"]
        .iter()
        .find_map(|ext| std::fs::read_to_string(dir.join(format!("{id}.{ext}"))).ok())
        .unwrap_or_default()
}

fn cmd_eval(settings: &Settings, args: &EvalArgs) -> Result<i32, CliError> {
    let suite = load_nonempty_suite(&args.suite)?;
    let sandbox = settings.sandbox().map_err(CliError::config)?;
    let options = args.budget.options(settings.limits());
    let records = if args.gold || args.patches.is_some() {
        let patches: Vec<String> = suite
            .iter()
            .map(|i| match &args.patches {
                Some(dir) => read_patch(dir, &i.instance_id),
                None => i.gold_patch.clone().unwrap_or_default(),
            })
            .collect();
        parallel_map(&suite, args.budget.parallel, |idx, inst| {
            log::info!("evaluating {}", inst.instance_id);
            evaluate_patch(inst, &patches[idx], &sandbox, &options)
        })
    } else {
        let config = settings.run_config();
        config.validate().map_err(CliError::config)?;
        let source = backend_source(settings)?;
        let factory = |inst: &BenchmarkInstance| source.backend(&inst.instance_id).map_err(|e| e.to_string());
        let memory = EpisodicMemory::in_memory(settings.embedder(), settings.search_backend());
        solve_all(&suite, &config, &factory, &sandbox, Some(&memory), &options, args.budget.parallel)
            .into_iter()
            .map(|r| r.record)
            .collect()
    };
    let report = EvalReport::new(records).map_err(CliError::infra)?;
    eprint!("{}", report.to_text());
    print_json(&to_json(&report));
    Ok(if report.has_infra_failures() { EXIT_ERROR } else { EXIT_PASS })
}

fn cmd_ablate(settings: &Settings, args: &AblateArgs) -> Result<i32, CliError> {
    let suite = load_nonempty_suite(&args.suite)?;
    let sandbox = settings.sandbox().map_err(CliError::config)?;
    let options = args.budget.options(settings.limits());
    let source = backend_source(settings)?;
    let factory = |inst: &BenchmarkInstance| source.backend(&inst.instance_id).map_err(|e| e.to_string());
    let configs = ablation_configs(&settings.run_config());
    let report = run_ablation_suite(&suite, &configs, &factory, &sandbox, &options, args.budget.parallel)
        .map_err(CliError::config)?;
    eprint!("{}", report.to_text());
    print_json(&to_json(&report));
    let infra = report.rows.iter().any(|row| {
        row.records
            .iter()
            .any(|r| r.failure_class == Some(groundloop_core::eval::FailureClass::Infra))
    });
    Ok(if infra { EXIT_ERROR } else { EXIT_PASS })
}

/// Applies `f` to every item with up to `workers` threads, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> = items.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(i, item);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .filter_map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()))
        .collect()
}
