//! Command-line entry points: `run`, `serve` and `export`.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 backend
//! unavailable. Failures print one JSON line to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fmea_panel_core::engine::{Round, Session};
use fmea_panel_core::error::EngineError;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::banks::{export_fmea, ExportFormat};
use crate::config::{build_provider, load_file};
use crate::store::{drive_round, DriveError, SessionStore, StoreError};

#[derive(Debug, Parser)]
#[command(name = "fmea-panel", version, about = "Generate FMEA tables with a panel of LLM personas")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a session headlessly until it is finalized (or a given round).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Stop after completing this round (1-4).
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        until_round: Option<u8>,
        /// Also write the FMEA export here; `.json` selects JSON, anything else CSV.
        #[arg(long)]
        export: Option<PathBuf>,
        /// Overrides the config's data_dir.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Session id; defaults to one derived from the config bytes, so
        /// rerunning the same config resumes the same session.
        #[arg(long)]
        session: Option<String>,
    },
    /// Serve the REST API.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Export a stored session's FMEA rows (drafts included) to stdout or a file.
    Export {
        #[arg(long)]
        session: String,
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Takes data_dir from this config when --data-dir is absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug)]
pub enum Failure {
    Config(String),
    Backend(String),
    Other(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => 2,
            Failure::Backend(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Backend(_) => "backend_unavailable",
            Failure::Other(_) => "error",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Backend(m) | Failure::Other(m) => m,
        }
    }

    /// The machine-parsable line printed to stderr.
    pub fn to_json_line(&self) -> String {
        json!({"level": "ERROR", "error": self.kind(), "message": self.message(), "exit_code": self.exit_code()}).to_string()
    }
}

impl From<DriveError> for Failure {
    fn from(e: DriveError) -> Self {
        match e {
            DriveError::Engine(EngineError::Backend(b)) => Failure::Backend(b.to_string()),
            DriveError::Engine(e @ (EngineError::Config(_) | EngineError::Validation(_))) => Failure::Config(e.to_string()),
            other => Failure::Other(other.to_string()),
        }
    }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        Failure::Other(e.to_string())
    }
}

/// `run-` plus the first 12 hex digits of the config's SHA-256.
pub fn derived_session_id(config_bytes: &[u8]) -> String {
    let digest = Sha256::digest(config_bytes);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("run-{hex}")
}

fn format_for(path: &Path) -> ExportFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("json") => ExportFormat::Json,
        _ => ExportFormat::Csv,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Other(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn print_json(value: serde_json::Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{value}");
}

fn run(
    config_path: &Path,
    until_round: Option<u8>,
    export: Option<&Path>,
    data_dir: Option<&Path>,
    session_id: Option<String>,
) -> Result<(), Failure> {
    let (config, bytes, base) = load_file(config_path).map_err(|e| Failure::Config(e.to_string()))?;
    let prepared = config.prepare(&base).map_err(|e| Failure::Config(e.to_string()))?;
    for w in &prepared.ingest.warnings {
        tracing::warn!(warning = %w, "knowledge repository");
    }
    let data_dir = data_dir.map(Path::to_path_buf).unwrap_or_else(|| prepared.data_dir.clone());
    let session_id = session_id.unwrap_or_else(|| derived_session_id(&bytes));
    let completer = build_provider(&prepared.provider).map_err(|e| Failure::Config(e.to_string()))?;

    let (mut store, mut session) = if SessionStore::exists(&data_dir, &session_id) {
        let (store, session) = SessionStore::open(&data_dir, &session_id)?;
        for w in store.warnings() {
            tracing::warn!(warning = %w, "session banks");
        }
        tracing::info!(session_id = %session_id, round = session.round().as_str(), "resuming session");
        (store, session)
    } else {
        let session = Session::create(
            session_id.clone(),
            prepared.context,
            prepared.agents,
            prepared.templates,
            prepared.settings,
            &prepared.seed_questions,
        )
        .map_err(|e| Failure::Config(e.to_string()))?;
        let snapshot = serde_json::to_value(&config).map_err(|e| Failure::Other(e.to_string()))?;
        let store = SessionStore::create(&data_dir, &session, Some(&snapshot))?;
        tracing::info!(session_id = %session_id, oos = session.context().oos, "session created");
        (store, session)
    };

    let stop_after = until_round.unwrap_or(4);
    while let Some(n) = session.round().number().filter(|&n| n <= stop_after) {
        let report = drive_round(&mut session, &mut store, completer.as_ref(), &mut |_| {});
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                tracing::error!(round = n, error = %e, "round failed; session checkpointed");
                return Err(e.into());
            }
        };
        tracing::info!(
            round = report.round,
            processed = report.questions_processed,
            accepted = report.answers_accepted,
            rows = report.rows_emitted,
            "round completed"
        );
        print_json(json!({"round_report": report}));
    }

    store.write_exports(session.rows())?;
    if let Some(path) = export {
        write_file(path, &export_fmea(session.rows(), format_for(path)))?;
    }
    print_json(json!({
        "session_id": session.id(),
        "round": session.round().as_str(),
        "rows": session.rows().len(),
        "session_dir": store.dir(),
        "finalized": session.round() == Round::Finalized,
    }));
    Ok(())
}

fn serve(config_path: &Path, host: &str, port: u16, data_dir: Option<&Path>) -> Result<(), Failure> {
    let (config, _, base) = load_file(config_path).map_err(|e| Failure::Config(e.to_string()))?;
    let data_dir = match (data_dir, &config.data_dir) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) if d.is_absolute() => d.clone(),
        (None, Some(d)) => base.join(d),
        (None, None) => return Err(Failure::Config("data_dir: is required".into())),
    };
    let addr = format!("{host}:{port}");
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::Other(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Failure::Other(format!("{addr}: {e}")))?;
        let state = std::sync::Arc::new(crate::service::AppState::new(data_dir, base));
        let st = state.clone();
        let warnings = tokio::task::spawn_blocking(move || st.load_existing())
            .await
            .map_err(|e| Failure::Other(e.to_string()))?;
        for w in warnings {
            tracing::warn!(warning = %w, "loading sessions");
        }
        tracing::info!(%addr, "listening");
        crate::service::serve(listener, state).await.map_err(|e| Failure::Other(e.to_string()))
    })
}

fn export(
    session_id: &str,
    format: &str,
    data_dir: Option<&Path>,
    config: Option<&Path>,
    output: Option<&Path>,
) -> Result<(), Failure> {
    let format: ExportFormat = format.parse().map_err(Failure::Config)?;
    let data_dir = match (data_dir, config) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(c)) => {
            let (config, _, base) = load_file(c).map_err(|e| Failure::Config(e.to_string()))?;
            let d = config.data_dir.ok_or_else(|| Failure::Config("data_dir: is required".into()))?;
            if d.is_absolute() {
                d
            } else {
                base.join(d)
            }
        }
        (None, None) => return Err(Failure::Config("pass --data-dir or --config".into())),
    };
    let (store, session) = match SessionStore::open(&data_dir, session_id) {
        Err(StoreError::NotFound(id)) => return Err(Failure::Config(format!("session {id} not found"))),
        other => other?,
    };
    for w in store.warnings() {
        tracing::warn!(warning = %w, "session banks");
    }
    let bytes = export_fmea(session.rows(), format);
    match output {
        Some(path) => write_file(path, &bytes),
        None => std::io::stdout().lock().write_all(&bytes).map_err(|e| Failure::Other(e.to_string())),
    }
}

pub fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, until_round, export: out, data_dir, session } => {
            run(&config, until_round, out.as_deref(), data_dir.as_deref(), session)
        }
        Command::Serve { config, port, host, data_dir } => serve(&config, &host, port, data_dir.as_deref()),
        Command::Export { session, format, data_dir, config, output } => {
            export(&session, &format, data_dir.as_deref(), config.as_deref(), output.as_deref())
        }
    }
}

pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stderr).try_init();
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_entry() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging();
    match execute(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.to_json_line());
            f.exit_code()
        }
    }
}
