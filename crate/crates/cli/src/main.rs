//! `fcflow` command-line interface.
//!
//! Exit codes: 0 success, 1 the run failed or was aborted, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fcflow_core::agents::{
    escalation_channel, execute_plan, make_plan_default, EscalationReceiver, ExecutorOptions, HumanDecision,
    PlanReport, PlanStatus, ReportEntry, ReportObserver, StepDriver,
};
use fcflow_core::backend::{LiveBackend, ScriptedBackend};
use fcflow_core::conversation::{drive, ConversationOptions, ConversationState, DEFAULT_BUDGET};
use fcflow_core::engine::{generate_run_id, Engine, EngineConfig, FutureState, RUNS_ROOT_ENV};
use fcflow_core::transcript::render_header;
use fcflow_core::{Backend, Registry, Transcript};
use fcflow_service::{Service, ServiceConfig, ADDR_ENV, DEFAULT_ADDR, TOKEN_ENV};
use tokio::io::{AsyncBufReadExt, BufReader, Lines, Stdin};
use tokio::sync::Mutex;

#[derive(Parser)]
#[command(name = "fcflow", version, about = "Run workflows from natural-language instructions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// Function-calling loop over the task descriptors.
    Loop,
    /// Planner, executor and debugger agents.
    Plan,
}

#[derive(clap::Args)]
struct RunSettings {
    /// `live` or `script:<file>`.
    #[arg(long, default_value = "live")]
    backend: String,
    /// Token budget of the conversation.
    #[arg(long, default_value_t = DEFAULT_BUDGET)]
    budget: u64,
    /// First future counter value.
    #[arg(long = "seed-counter", default_value_t = 0)]
    seed_counter: u64,
    /// Directory holding one subdirectory per run.
    #[arg(long, env = RUNS_ROOT_ENV, default_value = "runs")]
    runs_root: PathBuf,
    /// File replacing the built-in conversation preamble.
    #[arg(long)]
    preamble: Option<PathBuf>,
    /// Directory against which relative input paths are resolved
    /// (default: the manifest's directory).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Run plan steps on the engine directly instead of through per-step
    /// conversations.
    #[arg(long)]
    direct_steps: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest and exit.
    Validate { manifest: PathBuf },
    /// List the tasks of a manifest and their function descriptors.
    Tasks {
        manifest: PathBuf,
        /// Print the descriptors as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Execute one instruction. `@<file>` reads the instruction from a file.
    Run {
        manifest: PathBuf,
        instruction: String,
        #[arg(long, value_enum, default_value = "loop")]
        mode: Mode,
        #[command(flatten)]
        settings: RunSettings,
        /// Write the transcript (loop mode) or plan report (plan mode) as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive session; `/plan <text>` runs an instruction in plan mode.
    Chat {
        manifest: PathBuf,
        #[command(flatten)]
        settings: RunSettings,
    },
    /// Print a stored transcript in console layout.
    Replay { transcript: PathBuf },
    /// Start the HTTP service.
    Serve {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
        addr: String,
        #[arg(long, default_value = "live")]
        backend: String,
        #[arg(long, env = RUNS_ROOT_ENV, default_value = "runs")]
        runs_root: PathBuf,
        #[arg(long = "seed-counter", default_value_t = 0)]
        seed_counter: u64,
    },
}

/// An error that should exit with status 2.
struct Usage(anyhow::Error);

type StdinLines = Arc<Mutex<Lines<BufReader<Stdin>>>>;

fn load_registry(path: &Path) -> Result<Arc<Registry>, Usage> {
    Registry::load_file(path)
        .map(Arc::new)
        .with_context(|| format!("cannot load manifest {}", path.display()))
        .map_err(Usage)
}

fn make_backend(spec: &str) -> Result<Arc<dyn Backend>> {
    if spec == "live" {
        return Ok(Arc::new(LiveBackend::from_env()?));
    }
    if let Some(path) = spec.strip_prefix("script:") {
        let backend = ScriptedBackend::load_file(path).with_context(|| format!("cannot load script {path}"))?;
        return Ok(Arc::new(backend));
    }
    bail!("unknown backend `{spec}`; use `live` or `script:<file>`")
}

fn read_instruction(arg: &str) -> Result<String> {
    match arg.strip_prefix('@') {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {path}"))?;
            Ok(text.trim_end_matches('\n').to_string())
        }
        None => Ok(arg.to_string()),
    }
}

fn preamble(settings: &RunSettings) -> Result<String> {
    match &settings.preamble {
        Some(path) => Ok(std::fs::read_to_string(path)
            .with_context(|| format!("cannot read {}", path.display()))?
            .trim_end()
            .to_string()),
        None => Ok(fcflow_core::default_preamble().to_string()),
    }
}

fn make_engine(registry: Arc<Registry>, settings: &RunSettings) -> Result<Engine> {
    let mut config = EngineConfig::new(&settings.runs_root, generate_run_id()).with_initial_counter(settings.seed_counter);
    if let Some(dir) = &settings.data_dir {
        config = config.with_base_dir(dir);
    }
    Ok(Engine::new(registry, config)?)
}

fn executor_options(settings: &RunSettings) -> ExecutorOptions {
    ExecutorOptions {
        driver: if settings.direct_steps {
            StepDriver::Direct
        } else {
            StepDriver::Conversation
        },
        ..ExecutorOptions::default()
    }
}

fn parse_decision(line: &str) -> Option<HumanDecision> {
    let line = line.trim();
    let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    match word {
        "r" | "retry" => Some(HumanDecision::ApproveRetry),
        "a" | "abort" => Some(HumanDecision::Abort {
            reason: (!rest.trim().is_empty()).then(|| rest.trim().to_string()),
        }),
        "b" | "bind" => {
            let values = rest
                .split(',')
                .filter(|p| !p.trim().is_empty())
                .map(|pair| {
                    let (k, v) = pair.split_once('=')?;
                    Some((k.trim().to_string(), v.trim().to_string()))
                })
                .collect::<Option<_>>()?;
            Some(HumanDecision::ProvideBinding { values })
        }
        _ => None,
    }
}

/// Answers escalations from the terminal until the channel closes.
async fn prompt_escalations(mut rx: EscalationReceiver, stdin: StdinLines) {
    while let Some(pending) = rx.recv().await {
        eprintln!("\nESCALATION {} (step {}, {}): {}", pending.id, pending.step, pending.task, pending.question);
        let decision = loop {
            eprint!("[r]etry | [b]ind param=path,... | [a]bort [reason] > ");
            let line = stdin.lock().await.next_line().await;
            match line {
                Ok(Some(line)) => match parse_decision(&line) {
                    Some(decision) => break decision,
                    None => eprintln!("unrecognized answer"),
                },
                _ => {
                    break HumanDecision::Abort {
                        reason: Some("no answer on stdin".into()),
                    }
                }
            }
        };
        let _ = pending.answer(decision);
    }
}

/// Waits for every future of the run and reports failures on stderr.
async fn settle(engine: &Engine) -> bool {
    match engine.await_all(Duration::from_secs(3600)).await {
        Ok(futures) => {
            let failed: Vec<String> = futures
                .iter()
                .filter(|f| f.state == FutureState::Failed)
                .map(|f| f.id.to_string())
                .collect();
            if failed.is_empty() {
                eprintln!("{} future(s) succeeded in {}", futures.len(), engine.run_dir().display());
                true
            } else {
                eprintln!("failed futures: {}", failed.join(", "));
                false
            }
        }
        Err(err) => {
            eprintln!("error: {err}");
            false
        }
    }
}

/// Runs one instruction through the function-calling loop, printing the
/// transcript as it grows.
async fn run_loop(
    engine: &Engine,
    backend: &dyn Backend,
    preamble: &str,
    instruction: &str,
    budget: u64,
) -> Result<Transcript> {
    print!("{}", render_header(preamble, instruction));
    let options = ConversationOptions {
        observer: Some(Arc::new(|event| print!("{}", event.render()))),
        ..ConversationOptions::default()
    };
    let descriptors = engine.registry().descriptors();
    let mut state = ConversationState::new(preamble, instruction, budget, descriptors, options)?;
    drive(&mut state, engine, backend).await;
    Ok(state.into_transcript())
}

fn describe_entry(entry: &ReportEntry) -> String {
    match entry {
        ReportEntry::Dispatched {
            step, task, future_id, attempt,
        } => format!("step {step} ({task}) dispatched as {future_id}, attempt {attempt}"),
        ReportEntry::Outcome(o) if o.is_ok() => format!("step {} ({}) ok", o.step_index, o.task),
        ReportEntry::Outcome(o) => format!("step {} ({}) failed: {}", o.step_index, o.task, o.failure_summary()),
        ReportEntry::EscalationRaised { step, escalation_id, .. } => {
            format!("step {step} escalated as {escalation_id}")
        }
        ReportEntry::EscalationAnswered {
            escalation_id, decision, ..
        } => format!("{escalation_id} answered: {}", serde_json::to_string(decision).unwrap_or_default()),
        ReportEntry::Remediation {
            step, remediation, decided_by,
        } => format!("step {step} remediation: {} ({decided_by:?})", remediation.kind()),
        ReportEntry::PlanModified { plan } => format!("plan modified: {}", plan.summary()),
    }
}

async fn run_plan(
    engine: &Engine,
    backend: Arc<dyn Backend>,
    instruction: &str,
    options: ExecutorOptions,
    stdin: StdinLines,
) -> Result<PlanReport> {
    let planning = make_plan_default(instruction, engine.registry(), backend.as_ref()).await?;
    for error in &planning.forwarded_errors {
        eprintln!("planner error forwarded: {error}");
    }
    println!("{}", planning.plan.summary());
    let (channel, rx) = escalation_channel();
    let prompter = tokio::spawn(prompt_escalations(rx, stdin));
    let observer: ReportObserver = Arc::new(|entry| println!("{}", describe_entry(entry)));
    let report = execute_plan(planning.plan, engine, backend, &channel, options, Some(observer)).await;
    drop(channel);
    let _ = prompter.await;
    match &report.status {
        PlanStatus::Completed => println!("PLAN COMPLETED"),
        PlanStatus::Aborted { reason, causes } => {
            println!("PLAN ABORTED: {reason}");
            for cause in causes {
                println!("  caused by: {cause}");
            }
        }
    }
    Ok(report)
}

fn stdin_lines() -> StdinLines {
    Arc::new(Mutex::new(BufReader::new(tokio::io::stdin()).lines()))
}

async fn cmd_run(
    manifest: &Path,
    instruction: &str,
    mode: Mode,
    settings: &RunSettings,
    out: Option<&Path>,
) -> Result<u8, Usage> {
    let registry = load_registry(manifest)?;
    let instruction = read_instruction(instruction).map_err(Usage)?;
    if instruction.trim().is_empty() {
        return Err(Usage(anyhow!("instruction must not be empty")));
    }
    let backend = make_backend(&settings.backend).map_err(Usage)?;
    let preamble = preamble(settings).map_err(Usage)?;
    let engine = make_engine(registry, settings).map_err(Usage)?;
    tracing::info!(run_id = engine.run_id(), "starting run");
    let ok = match mode {
        Mode::Loop => {
            let transcript = run_loop(&engine, backend.as_ref(), &preamble, &instruction, settings.budget)
                .await
                .map_err(Usage)?;
            if let Some(path) = out {
                write_json(path, &transcript).map_err(Usage)?;
            }
            let settled = settle(&engine).await;
            if let Some(reason) = transcript.abort_reason() {
                eprintln!("conversation aborted: {reason}");
            }
            transcript.is_done() && settled
        }
        Mode::Plan => {
            let report = match run_plan(&engine, backend, &instruction, executor_options(settings), stdin_lines()).await {
                Ok(report) => report,
                Err(err) => {
                    eprintln!("error: {err:#}");
                    return Ok(1);
                }
            };
            if let Some(path) = out {
                write_json(path, &report).map_err(Usage)?;
            }
            report.is_completed()
        }
    };
    Ok(if ok { 0 } else { 1 })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").with_context(|| format!("cannot write {}", path.display()))
}

async fn cmd_chat(manifest: &Path, settings: &RunSettings) -> Result<u8, Usage> {
    let registry = load_registry(manifest)?;
    let backend = make_backend(&settings.backend).map_err(Usage)?;
    let preamble = preamble(settings).map_err(Usage)?;
    let engine = make_engine(registry, settings).map_err(Usage)?;
    let stdin = stdin_lines();
    eprintln!("run {}; type an instruction, `/plan <text>` for plan mode, or `/quit`", engine.run_id());
    let mut failures = 0;
    loop {
        eprint!("> ");
        let line = stdin.lock().await.next_line().await.map_err(|e| Usage(e.into()))?;
        let Some(line) = line else { break };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "/quit" {
            break;
        }
        if let Some(text) = line.strip_prefix("/plan ") {
            match run_plan(&engine, backend.clone(), text, executor_options(settings), stdin.clone()).await {
                Ok(report) if report.is_completed() => {}
                Ok(_) => failures += 1,
                Err(err) => {
                    eprintln!("error: {err:#}");
                    failures += 1;
                }
            }
        } else {
            match run_loop(&engine, backend.as_ref(), &preamble, line, settings.budget).await {
                Ok(transcript) if transcript.is_done() => {}
                Ok(_) => failures += 1,
                Err(err) => {
                    eprintln!("error: {err:#}");
                    failures += 1;
                }
            }
        }
    }
    let settled = settle(&engine).await;
    Ok(if failures == 0 && settled { 0 } else { 1 })
}

fn cmd_replay(path: &Path) -> Result<u8, Usage> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Usage)?;
    let transcript: Transcript = serde_json::from_str(&text)
        .with_context(|| format!("{} is not a transcript", path.display()))
        .map_err(Usage)?;
    print!("{}", transcript.render());
    Ok(0)
}

async fn cmd_serve(
    manifests: &[PathBuf],
    addr: &str,
    backend: String,
    runs_root: PathBuf,
    seed_counter: u64,
) -> Result<u8, Usage> {
    let registries = manifests.iter().map(|m| load_registry(m)).collect::<Result<Vec<_>, _>>()?;
    make_backend(&backend).map_err(Usage)?;
    let factory: fcflow_service::BackendFactory = Arc::new(move || make_backend(&backend).map_err(|e| format!("{e:#}")));
    let mut config = ServiceConfig::new(runs_root, factory);
    config.token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    config.initial_counter = seed_counter;
    let service = Service::new(config, registries);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("cannot listen on {addr}"))
        .map_err(Usage)?;
    eprintln!("serving {} on http://{}", service.manifest_names().join(", "), listener.local_addr().map_err(|e| Usage(e.into()))?);
    fcflow_service::serve(listener, service).await.map_err(|e| Usage(e.into()))?;
    Ok(0)
}

async fn dispatch(cli: Cli) -> Result<u8, Usage> {
    match cli.command {
        Command::Validate { manifest } => {
            let registry = load_registry(&manifest)?;
            println!(
                "{}: {} task(s), {} function(s)",
                registry.name(),
                registry.len(),
                registry.descriptors().len()
            );
            Ok(0)
        }
        Command::Tasks { manifest, json } => {
            let registry = load_registry(&manifest)?;
            if json {
                let text = serde_json::to_string_pretty(&registry.descriptors()).map_err(|e| Usage(e.into()))?;
                println!("{text}");
            } else {
                for task in registry.tasks() {
                    println!("{}: {}", task.name, task.description);
                    for descriptor in registry.descriptor_pair(&task.name).map(|p| p.to_vec()).unwrap_or_default() {
                        println!("  {}({})", descriptor.name, descriptor.parameters.required.join(", "));
                    }
                }
            }
            Ok(0)
        }
        Command::Run {
            manifest,
            instruction,
            mode,
            settings,
            out,
        } => cmd_run(&manifest, &instruction, mode, &settings, out.as_deref()).await,
        Command::Chat { manifest, settings } => cmd_chat(&manifest, &settings).await,
        Command::Replay { transcript } => cmd_replay(&transcript),
        Command::Serve {
            manifests,
            addr,
            backend,
            runs_root,
            seed_counter,
        } => cmd_serve(&manifests, &addr, backend, runs_root, seed_counter).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("FCFLOW_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli).await {
        Ok(code) => ExitCode::from(code),
        Err(Usage(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
