//! Command-line front end for the learning-loop engine.
//!
//! Exit codes: 0 on success or convergence, 2 when the budget ran out,
//! 3 on a failed pipeline node, 1 for configuration or storage problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use alas_core::clock::{SystemClock, ThreadSleeper};
use alas_core::config::{Config, ProviderMode};
use alas_core::model::SessionState;
use alas_core::orchestrator::{
    exit_code, render_session_report, Engine, EngineError, RunOptions,
};
use alas_core::provider::http::{HttpProvider, PayloadSink};
use alas_core::provider::sim::{SimOptions, SimProvider, SimWorld};
use alas_core::provider::Provider;
use alas_core::storage::Store;

const HTTP_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Parser)]
#[command(name = "alas", version, about = "Continual-learning loop over a fine-tunable model provider")]
struct Cli {
    /// TOML config file; defaults apply when the file does not exist.
    #[arg(long, global = true, default_value = "alas.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new session for a domain and run it until it converges,
    /// exhausts its budget, or fails.
    Run {
        #[arg(long)]
        domain: String,
    },
    /// Pick up a checkpointed session where it left off.
    Resume {
        #[arg(long)]
        session: String,
    },
    /// Plan the curriculum, synthesize data and build datasets, but submit
    /// no fine-tune jobs. Artifacts remain valid for a later full run.
    DryRun {
        #[arg(long)]
        domain: String,
    },
    /// Print the iteration table and per-topic breakdown for a session.
    Report {
        #[arg(long)]
        session: String,
    },
    /// Run a full session against a world file with the simulated provider.
    Simulate {
        /// Path to a world JSON file.
        #[arg(long)]
        world: PathBuf,
        /// Session domain; defaults to the world's own domain.
        #[arg(long)]
        domain: Option<String>,
    },
}

type CliError = Box<dyn std::error::Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cli: Cli) -> Result<u8, CliError> {
    let config = load_config(&cli.config)?;
    match cli.command {
        Command::Run { domain } => run_new(config, &domain, false),
        Command::DryRun { domain } => run_new(config, &domain, true),
        Command::Resume { session } => resume(config, &session),
        Command::Report { session } => report(config, &session),
        Command::Simulate { world, domain } => simulate(config, &world, domain.as_deref()),
    }
}

fn load_config(path: &Path) -> Result<Config, CliError> {
    if path.exists() {
        Ok(Config::load(path)?)
    } else {
        tracing::info!(path = %path.display(), "config file not found, using defaults");
        Ok(Config::default())
    }
}

fn run_new(config: Config, domain: &str, dry_run: bool) -> Result<u8, CliError> {
    let root = PathBuf::from(&config.storage.root);
    let provider = build_provider(&config, &root, domain)?;
    let engine = make_engine(config, &root, provider, dry_run)?;
    let mut state = engine.start_session(domain)?;
    tracing::info!(session = %state.session_id, dry_run, "session started");
    let outcome = engine.run_session(&mut state);
    Ok(finish(&engine, &state, outcome))
}

fn resume(config: Config, session: &str) -> Result<u8, CliError> {
    let root = PathBuf::from(&config.storage.root);
    let domain = Store::open(&root)?.load_session(session)?.domain;
    let provider = build_provider(&config, &root, &domain)?;
    let engine = make_engine(config, &root, provider, false)?;
    let mut state = engine.resume_session(session)?;
    tracing::info!(session, status = ?state.status, "session resumed");
    let outcome = engine.run_session(&mut state);
    Ok(finish(&engine, &state, outcome))
}

fn report(config: Config, session: &str) -> Result<u8, CliError> {
    let store = Store::open(&config.storage.root)?;
    match store.load_session(session) {
        Ok(state) => {
            println!("{}", render_session_report(&store, &state)?);
            Ok(0)
        }
        Err(e) => {
            let known = store.list_sessions().unwrap_or_default();
            if known.is_empty() {
                Err(e.into())
            } else {
                Err(format!("{e}; available sessions: {}", known.join(", ")).into())
            }
        }
    }
}

fn simulate(mut config: Config, world_path: &Path, domain: Option<&str>) -> Result<u8, CliError> {
    config.provider.mode = ProviderMode::Simulated;
    let raw = std::fs::read_to_string(world_path)?;
    let world = SimWorld::from_json(&raw)?;
    let domain = domain.unwrap_or(&world.domain).to_string();
    let root = PathBuf::from(&config.storage.root);
    let provider = sim_provider(&config, &root, world)?;
    let engine = make_engine(config, &root, provider, false)?;
    let mut state = engine.start_session(&domain)?;
    tracing::info!(session = %state.session_id, world = %world_path.display(), "simulation started");
    let outcome = engine.run_session(&mut state);
    Ok(finish(&engine, &state, outcome))
}

fn make_engine(
    config: Config,
    root: &Path,
    provider: Arc<dyn Provider>,
    dry_run: bool,
) -> Result<Engine, CliError> {
    let store = Store::open(root)?;
    Ok(Engine::new(
        store,
        config,
        provider,
        Arc::new(SystemClock),
        Arc::new(ThreadSleeper),
        RunOptions { dry_run, ..RunOptions::default() },
    ))
}

fn build_provider(
    config: &Config,
    root: &Path,
    domain: &str,
) -> Result<Arc<dyn Provider>, CliError> {
    match config.provider.mode {
        ProviderMode::Simulated => {
            let world = match &config.simulation.world_path {
                Some(path) => SimWorld::from_json(&std::fs::read_to_string(path)?)?,
                None => SimWorld::grid(domain, 10, 10, config.seed),
            };
            sim_provider(config, root, world)
        }
        ProviderMode::Http => {
            let sink_store = Store::open(root)?;
            let sink: PayloadSink = Arc::new(move |line: &str| {
                if let Err(e) = sink_store.append_payload_log(line) {
                    tracing::warn!("payload log write failed: {e}");
                }
            });
            let p = &config.provider;
            let http = HttpProvider::new(&p.base_url, &p.api_key_env, HTTP_TIMEOUT)
                .with_payload_sink(sink);
            Ok(Arc::new(http))
        }
    }
}

fn sim_provider(
    config: &Config,
    root: &Path,
    world: SimWorld,
) -> Result<Arc<dyn Provider>, CliError> {
    let options = SimOptions {
        malformed_rate: config.simulation.malformed_rate,
        ..SimOptions::default()
    };
    let provider = SimProvider::persistent(world, options, root.join("sim/provider_state.json"))?;
    Ok(Arc::new(provider))
}

fn finish(engine: &Engine, state: &SessionState, outcome: Result<(), EngineError>) -> u8 {
    match render_session_report(engine.store(), state) {
        Ok(report) => println!("{report}"),
        Err(e) => eprintln!("report unavailable: {e}"),
    }
    match outcome {
        Ok(()) => exit_code(state.status) as u8,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                EngineError::Node { .. } | EngineError::InjectedCrash(_) => 3,
                _ => 1,
            }
        }
    }
}
