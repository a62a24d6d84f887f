//! On-disk layout of a session: `{data_dir}/{session_id}/` holding the four
//! banks, the config snapshot used to create it, and exports.
//!
//! `events.jsonl` is the source of truth. A session is loaded by replaying it;
//! the other banks are append-only projections of the same events and are
//! topped up on load if a crash left them one record behind.

use std::fs;
use std::path::{Path, PathBuf};

use fmea_panel_core::domain::Question;
use fmea_panel_core::engine::{Event, EventRecord, Session};
use fmea_panel_core::error::EngineError;
use fmea_panel_core::domain::{Answer, FmeaRow};
use serde::Deserialize;

use crate::banks::{export_fmea, BankError, BankFile, BankKind, BanksSnapshot, ExportFormat};

pub const CONFIG_SNAPSHOT: &str = "config.json";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("session {0} already exists")]
    Exists(String),
    #[error("session {0} not found")]
    NotFound(String),
    #[error("replay failed: {0}")]
    Replay(#[from] EngineError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub struct SessionStore {
    dir: PathBuf,
    questions: BankFile,
    answers: BankFile,
    fmea: BankFile,
    events: BankFile,
    warnings: Vec<String>,
}

pub fn session_dir(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join(session_id)
}

impl SessionStore {
    fn open_banks(dir: &Path) -> Result<Self, StoreError> {
        let mut warnings = Vec::new();
        let mut open = |kind: BankKind| -> Result<BankFile, StoreError> {
            let (bank, w) = BankFile::open(&dir.join(kind.file_name()), kind)?;
            warnings.extend(w);
            Ok(bank)
        };
        let questions = open(BankKind::Questions)?;
        let answers = open(BankKind::Answers)?;
        let fmea = open(BankKind::Fmea)?;
        let events = open(BankKind::Events)?;
        Ok(Self { dir: dir.to_path_buf(), questions, answers, fmea, events, warnings })
    }

    /// Creates the directory for a new session and persists its initial events.
    pub fn create(data_dir: &Path, session: &Session, config_snapshot: Option<&serde_json::Value>) -> Result<Self, StoreError> {
        let dir = session_dir(data_dir, session.id());
        if dir.join(BankKind::Events.file_name()).exists() {
            return Err(StoreError::Exists(session.id().into()));
        }
        fs::create_dir_all(&dir).map_err(|source| StoreError::Io { path: dir.clone(), source })?;
        if let Some(config) = config_snapshot {
            let path = dir.join(CONFIG_SNAPSHOT);
            let bytes = serde_json::to_vec_pretty(config).expect("json value serializes");
            fs::write(&path, bytes).map_err(|source| StoreError::Io { path, source })?;
        }
        let mut store = Self::open_banks(&dir)?;
        store.persist(session)?;
        Ok(store)
    }

    /// Loads a session by replaying its event log.
    pub fn open(data_dir: &Path, session_id: &str) -> Result<(Self, Session), StoreError> {
        let dir = session_dir(data_dir, session_id);
        if !dir.join(BankKind::Events.file_name()).is_file() {
            return Err(StoreError::NotFound(session_id.into()));
        }
        let mut store = Self::open_banks(&dir)?;
        let records = store
            .events
            .records()
            .iter()
            .map(EventRecord::deserialize)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| EngineError::Replay(e.to_string()))?;
        let session = Session::replay(records)?;
        store.reconcile(&session)?;
        Ok((store, session))
    }

    pub fn exists(data_dir: &Path, session_id: &str) -> bool {
        session_dir(data_dir, session_id).join(BankKind::Events.file_name()).is_file()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Warnings raised while loading the banks.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn config_snapshot(&self) -> Option<serde_json::Value> {
        let bytes = fs::read(self.dir.join(CONFIG_SNAPSHOT)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn project(&mut self, event: &Event) -> Result<(), StoreError> {
        match event {
            Event::QuestionAdded { question } if !self.questions.contains(&question.id) => {
                self.questions.append(question)?;
            }
            Event::AnswerRecorded { answer } if !self.answers.contains(&answer.id) => {
                self.answers.append(answer)?;
            }
            Event::RowEmitted { row } if !self.fmea.contains(&row.id) => {
                self.fmea.append(row)?;
            }
            _ => {}
        }
        Ok(())
    }

    fn reconcile(&mut self, session: &Session) -> Result<(), StoreError> {
        for record in session.events() {
            self.project(&record.event)?;
        }
        Ok(())
    }

    /// Appends every event not yet on disk, each followed by its projection.
    pub fn persist(&mut self, session: &Session) -> Result<usize, StoreError> {
        let written = self.events.len();
        let pending = &session.events()[written.min(session.events().len())..];
        for record in pending {
            self.events.append(record)?;
            self.project(&record.event)?;
        }
        Ok(pending.len())
    }

    pub fn persisted_events(&self) -> usize {
        self.events.len()
    }

    pub fn snapshot(&self) -> BanksSnapshot {
        BanksSnapshot {
            questions: self.questions.records().to_vec(),
            answers: self.answers.records().to_vec(),
            fmea: self.fmea.records().to_vec(),
            events: self.events.records().to_vec(),
        }
    }

    /// Writes `fmea.csv` and `fmea.json` into the session directory.
    pub fn write_exports(&self, rows: &[FmeaRow]) -> Result<(), StoreError> {
        for format in [ExportFormat::Csv, ExportFormat::Json] {
            let path = self.dir.join(format!("fmea.{}", format.extension()));
            fs::write(&path, export_fmea(rows, format)).map_err(|source| StoreError::Io { path, source })?;
        }
        Ok(())
    }
}

/// Current (folded) records of a bank, in append order.
pub fn folded_records(session: &Session, kind: BankKind) -> Vec<serde_json::Value> {
    fn to_values<T: serde::Serialize>(items: &[T]) -> Vec<serde_json::Value> {
        items.iter().map(|i| serde_json::to_value(i).expect("records serialize")).collect()
    }
    match kind {
        BankKind::Questions => to_values::<Question>(session.questions()),
        BankKind::Answers => to_values::<Answer>(session.answers()),
        BankKind::Fmea => to_values::<FmeaRow>(session.rows()),
        BankKind::Events => to_values::<EventRecord>(session.events()),
    }
}


#[derive(Debug, thiserror::Error)]
pub enum DriveError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Runs the current round to completion, persisting after every step so an
/// interrupted round resumes where it stopped. `on_step` sees the session
/// after each persisted step.
pub fn drive_round(
    session: &mut Session,
    store: &mut SessionStore,
    completer: &(dyn fmea_panel_core::llm::Completer + Send + Sync),
    on_step: &mut dyn FnMut(&Session),
) -> Result<fmea_panel_core::engine::RoundReport, DriveError> {
    let classifier = fmea_panel_core::gate::HeuristicClassifier { cutoff: session.settings().classifier_cutoff };
    loop {
        let step = session.process_next(completer);
        store.persist(session)?;
        on_step(session);
        if step?.is_none() {
            break;
        }
    }
    let report = session.advance_round(completer, &classifier);
    store.persist(session)?;
    on_step(session);
    Ok(report?)
}
