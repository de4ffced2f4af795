use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use lull_core::analytics::{cohort_report, load_sessions, read_cohort_csv, ReportConfig};
use lull_core::content::{Corpus, StoryLibrary};
use lull_core::sim::{run_experiment, ExperimentPlan};
use lull_serviced::config::{ENV_LISTEN, ENV_TELEMETRY_TOKEN};
use lull_serviced::session::{AbortKind, SessionOutcome, SessionState};
use lull_serviced::telemetry::MockTelemetry;
use lull_serviced::{api, exit, RunMode, ServiceError, SessionConfig, SessionController};

#[derive(Parser)]
#[command(name = "lulld", version, about = "Conversation lull detection and nudging daemon")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one session from a config file, optionally serving the control API.
    Run(RunArgs),
    /// Replay a `t,label` trace through the engine in virtual time.
    Replay(ReplayArgs),
    /// Run a simulated two-arm experiment and write logs plus a report.
    Simulate(SimulateArgs),
    /// Compute per-session metrics and cohort tests over a directory of logs.
    Analyze(AnalyzeArgs),
    /// Content corpus tools.
    Corpus {
        #[command(subcommand)]
        cmd: CorpusCmd,
    },
    /// Serve the mock telemetry endpoint.
    MockTelemetry(MockArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Serve the HTTP API on this address.
    #[arg(long, env = ENV_LISTEN)]
    listen: Option<SocketAddr>,
    /// Do not start ticking until POST /v1/session/start.
    #[arg(long, requires = "listen")]
    wait_for_start: bool,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Base config; its source and mode are replaced by the trace.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    session_id: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    stories: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    sessions: PathBuf,
    /// Cohort table (session_id, group, friendship_duration, intimacy_pre,
    /// intimacy_post). Optional when every log has its metadata sidecar.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lull_len: Option<u64>,
    #[arg(long)]
    eval_window: Option<u64>,
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Check a corpus (and optionally a story library) and print counts.
    Validate {
        file: PathBuf,
        #[arg(long)]
        stories: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MockArgs {
    #[arg(long, default_value = "127.0.0.1:8088")]
    listen: SocketAddr,
    #[arg(long, env = ENV_TELEMETRY_TOKEN)]
    token: Option<String>,
    /// Answer the first N posts with 503.
    #[arg(long, default_value_t = 0)]
    fail_first: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    let result = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Replay(a) => replay(a),
        Cmd::Simulate(a) => simulate(a),
        Cmd::Analyze(a) => analyze(a),
        Cmd::Corpus {
            cmd: CorpusCmd::Validate { file, stories },
        } => validate_corpus(&file, stories.as_deref()),
        Cmd::MockTelemetry(a) => mock(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lulld: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Io(format!("{}: {e}", path.display()))
}

fn runtime() -> Result<tokio::runtime::Runtime, ServiceError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ServiceError::Runtime(e.to_string()))
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

/// Prints the final status and maps an abort to its exit category.
fn finish(out: SessionOutcome) -> Result<(), ServiceError> {
    print_json(&out.status);
    let msg = out.status.error.clone().unwrap_or_default();
    match out.abort {
        None => Ok(()),
        Some(AbortKind::Source) => Err(ServiceError::Source(msg)),
        Some(AbortKind::Io) => Err(ServiceError::Io(msg)),
        Some(AbortKind::Engine) => Err(ServiceError::Runtime(msg)),
    }
}

fn run(a: RunArgs) -> Result<(), ServiceError> {
    let cfg = SessionConfig::load(&a.config)?;
    let ctl = SessionController::prepare(cfg)?;
    let Some(addr) = a.listen else {
        let stopper = ctl.clone();
        let rt = runtime()?;
        rt.spawn(async move {
            if tokio::signal::ctrl_c().await.is_ok() {
                log::info!("interrupt: stopping session");
                let _ = stopper.stop().await;
            }
        });
        let out = ctl.run_to_end()?;
        return finish(out);
    };
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ServiceError::Io(format!("bind {addr}: {e}")))?;
        log::info!("listening on http://{}", listener.local_addr().map_err(|e| ServiceError::Io(e.to_string()))?);
        // Subscribe first so a fast session cannot finish unobserved.
        let mut events = ctl.subscribe();
        if !a.wait_for_start {
            ctl.start().map_err(|e| ServiceError::Runtime(e.to_string()))?;
        }
        let (done_tx, done_rx) = tokio::sync::oneshot::channel::<()>();
        let app = api::router(ctl.clone());
        let server = tokio::spawn(async move {
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = done_rx.await;
                })
                .await
        });
        loop {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {
                    log::info!("interrupt: stopping session");
                    if ctl.stop().await.is_err() {
                        // Never started.
                        let _ = done_tx.send(());
                        let _ = server.await;
                        return Ok(());
                    }
                }
                ev = events.recv() => {
                    use tokio::sync::broadcast::error::RecvError;
                    match ev {
                        Ok(lull_serviced::session::ServerEvent::End(_)) | Err(RecvError::Closed) => break,
                        _ => {}
                    }
                }
            }
        }
        let waiter = ctl.clone();
        let out = tokio::task::spawn_blocking(move || waiter.wait())
            .await
            .map_err(|e| ServiceError::Runtime(e.to_string()))?
            .ok_or_else(|| ServiceError::Runtime("session outcome already collected".into()))?;
        // Let event-stream clients read the end event before closing.
        tokio::time::sleep(std::time::Duration::from_millis(200)).await;
        let _ = done_tx.send(());
        let _ = server.await;
        finish(out)
    })
}

fn replay(a: ReplayArgs) -> Result<(), ServiceError> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let base = path.parent().unwrap_or(Path::new("."));
            let mut cfg = SessionConfig::from_json(&text, base)?;
            cfg.apply_env(|k| std::env::var(k).ok());
            cfg
        }
        None => SessionConfig::new(RunMode::Replay),
    };
    cfg.mode = RunMode::Replay;
    cfg.source.trace = Some(a.trace);
    if a.out.is_some() {
        cfg.output_dir = a.out;
    }
    if a.session_id.is_some() {
        cfg.session_id = a.session_id;
    }
    let out = SessionController::prepare(cfg)?.run_to_end()?;
    debug_assert!(out.status.state != SessionState::Idle);
    finish(out)
}

fn load_content(corpus: Option<&Path>, stories: Option<&Path>) -> Result<(Corpus, StoryLibrary), ServiceError> {
    let corpus = match corpus {
        Some(p) => Corpus::from_path(p).map_err(|e| ServiceError::Input(format!("{}: {e}", p.display())))?,
        None => Corpus::fixture(),
    };
    let stories = match stories {
        Some(p) => StoryLibrary::from_path(p).map_err(|e| ServiceError::Input(format!("{}: {e}", p.display())))?,
        None => StoryLibrary::fixture(),
    };
    Ok((corpus, stories))
}

fn simulate(a: SimulateArgs) -> Result<(), ServiceError> {
    let text = std::fs::read_to_string(&a.plan).map_err(io_err(&a.plan))?;
    let plan = ExperimentPlan::from_json(&text)
        .map_err(|e| ServiceError::Config(lull_serviced::ConfigError::Invalid(format!("{}: {e}", a.plan.display()))))?;
    let (corpus, stories) = load_content(a.corpus.as_deref(), a.stories.as_deref())?;
    let outcome = run_experiment(&plan, Arc::new(corpus), Arc::new(stories))
        .map_err(|e| ServiceError::Runtime(e.to_string()))?;
    outcome
        .write_to_dir(&a.out)
        .map_err(|e| ServiceError::Io(e.to_string()))?;
    print_json(&serde_json::json!({
        "sessions": outcome.logs.len(),
        "out": a.out,
        "plausibility": outcome.plausibility,
    }));
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> Result<(), ServiceError> {
    let cohort = match &a.meta {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            read_cohort_csv(&text).map_err(|e| ServiceError::Input(format!("{}: {e}", path.display())))?
        }
        None => Vec::new(),
    };
    let mut cfg = ReportConfig::default();
    if let Some(l) = a.lull_len {
        cfg.metrics.lull_len = l;
    }
    if let Some(w) = a.eval_window {
        cfg.metrics.eval_window = w;
    }
    let logs = load_sessions(&a.sessions, &cohort).map_err(|e| ServiceError::Input(e.to_string()))?;
    if logs.is_empty() {
        return Err(ServiceError::Input(format!("no session logs in {}", a.sessions.display())));
    }
    let report = cohort_report(&logs, &cohort, &cfg).map_err(|e| ServiceError::Input(e.to_string()))?;
    report.write_to_dir(&a.out).map_err(|e| ServiceError::Io(e.to_string()))?;
    print_json(&serde_json::json!({
        "sessions": report.sessions.len(),
        "comparisons": report.comparisons,
        "notes": report.notes,
        "out": a.out,
    }));
    Ok(())
}

fn validate_corpus(file: &Path, stories: Option<&Path>) -> Result<(), ServiceError> {
    let (corpus, library) = load_content(Some(file), stories)?;
    print_json(&serde_json::json!({
        "errors": 0,
        "corpus": corpus.summary(),
        "stories": library.stories().len(),
    }));
    Ok(())
}

fn mock(a: MockArgs) -> Result<(), ServiceError> {
    let mock = MockTelemetry::new(a.token, a.fail_first);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.listen)
            .await
            .map_err(|e| ServiceError::Io(format!("bind {}: {e}", a.listen)))?;
        log::info!("mock telemetry on http://{}", a.listen);
        axum::serve(listener, mock.router())
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ServiceError::Io(e.to_string()))
    })
}
