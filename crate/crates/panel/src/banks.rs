//! Append-only JSON-lines banks and FMEA exports.
//!
//! Every line is one JSON object. A final line without its newline is the
//! trace of an interrupted write: loading drops it with a warning and cuts
//! the file back to the last complete record.

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fmea_panel_core::domain::{Answer, FmeaRow, Question};
use fmea_panel_core::engine::EventRecord;
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankKind {
    Questions,
    Answers,
    Fmea,
    Events,
}

impl BankKind {
    pub const ALL: [BankKind; 4] = [BankKind::Questions, BankKind::Answers, BankKind::Fmea, BankKind::Events];

    pub fn as_str(self) -> &'static str {
        match self {
            BankKind::Questions => "questions",
            BankKind::Answers => "answers",
            BankKind::Fmea => "fmea",
            BankKind::Events => "events",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }

    /// Id of a record: `id` for the data banks, `seq` for events.
    fn record_id(self, record: &Value) -> Option<String> {
        match self {
            BankKind::Events => record.get("seq").and_then(Value::as_u64).map(|s| s.to_string()),
            _ => record.get("id").and_then(Value::as_str).map(str::to_string),
        }
    }

    fn check_schema(self, record: &Value) -> Result<(), String> {
        let r = match self {
            BankKind::Questions => Question::deserialize(record).map(|_| ()),
            BankKind::Answers => Answer::deserialize(record).map(|_| ()),
            BankKind::Fmea => FmeaRow::deserialize(record).map(|_| ()),
            BankKind::Events => EventRecord::deserialize(record).map(|_| ()),
        };
        r.map_err(|e| e.to_string())
    }
}

impl FromStr for BankKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BankKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown bank kind `{s}` (expected questions, answers, fmea or events)"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BankError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error("invalid {kind} record: {message}")]
    Validation { kind: &'static str, message: String },
}

pub struct BankFile {
    path: PathBuf,
    kind: BankKind,
    file: File,
    records: Vec<Value>,
    ids: HashSet<String>,
}

impl BankFile {
    /// Opens (creating if needed) and loads a bank. Returns the warnings raised
    /// while loading.
    pub fn open(path: &Path, kind: BankKind) -> Result<(Self, Vec<String>), BankError> {
        let io = |source| BankError::Io { path: path.to_path_buf(), source };
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io(e)),
        };
        let mut warnings = Vec::new();
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        let mut good_len = 0;
        let mut line_no = 0;
        let mut rest = &bytes[..];
        while !rest.is_empty() {
            line_no += 1;
            let (line, complete) = match rest.iter().position(|&b| b == b'\n') {
                Some(i) => (&rest[..i], true),
                None => (rest, false),
            };
            let consumed = line.len() + usize::from(complete);
            let blank = line.iter().all(u8::is_ascii_whitespace);
            // the newline commits a record; anything after the last one is a fragment
            if !complete {
                if !blank {
                    warnings.push(format!(
                        "{}: ignoring incomplete final record at line {line_no} ({} bytes)",
                        path.display(),
                        line.len()
                    ));
                }
                break;
            }
            if !blank {
                let value = serde_json::from_slice::<Value>(line).map_err(|e| BankError::Corrupt {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?;
                let id = kind.record_id(&value).ok_or_else(|| BankError::Corrupt {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: "record has no id".into(),
                })?;
                if !ids.insert(id.clone()) {
                    return Err(BankError::Corrupt {
                        path: path.to_path_buf(),
                        line: line_no,
                        message: format!("duplicate id {id}"),
                    });
                }
                records.push(value);
            }
            good_len += consumed;
            rest = &rest[consumed..];
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if good_len < bytes.len() {
            file.set_len(good_len as u64).map_err(io)?;
        }
        Ok((Self { path: path.to_path_buf(), kind, file, records, ids }, warnings))
    }

    pub fn kind(&self) -> BankKind {
        self.kind
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[Value] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    /// Validates, writes and syncs one record; returns its id.
    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<String, BankError> {
        let invalid = |message: String| BankError::Validation { kind: self.kind.as_str(), message };
        let value = serde_json::to_value(record).map_err(|e| invalid(e.to_string()))?;
        self.kind.check_schema(&value).map_err(invalid)?;
        let id = self.kind.record_id(&value).ok_or_else(|| invalid("record has no id".into()))?;
        if self.ids.contains(&id) {
            return Err(invalid(format!("duplicate id {id}")));
        }
        let mut line = serde_json::to_vec(&value).map_err(|e| invalid(e.to_string()))?;
        line.push(b'\n');
        let io = |source| BankError::Io { path: self.path.clone(), source };
        self.file.write_all(&line).map_err(io)?;
        self.file.flush().map_err(io)?;
        self.file.sync_data().map_err(io)?;
        self.ids.insert(id.clone());
        self.records.push(value);
        Ok(id)
    }
}

/// Point-in-time copy of the four banks of a session.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BanksSnapshot {
    pub questions: Vec<Value>,
    pub answers: Vec<Value>,
    pub fmea: Vec<Value>,
    pub events: Vec<Value>,
}

impl BanksSnapshot {
    pub fn get(&self, kind: BankKind) -> &[Value] {
        match kind {
            BankKind::Questions => &self.questions,
            BankKind::Answers => &self.answers,
            BankKind::Fmea => &self.fmea,
            BankKind::Events => &self.events,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn content_type(self) -> &'static str {
        match self {
            ExportFormat::Csv => "text/csv; charset=utf-8",
            ExportFormat::Json => "application/json",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(format!("unknown export format `{other}` (expected csv or json)")),
        }
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "asset_class",
    "component",
    "failure_mode",
    "cause",
    "effect",
    "recommended_action",
    "severity",
    "occurrence",
    "detection",
    "rpn",
    "review_status",
];

/// Rows ordered by rpn descending, then id ascending.
pub fn export_order(rows: &[FmeaRow]) -> Vec<&FmeaRow> {
    let mut sorted: Vec<&FmeaRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.rpn.cmp(&a.rpn).then_with(|| a.id.cmp(&b.id)));
    sorted
}

pub fn export_fmea(rows: &[FmeaRow], format: ExportFormat) -> Vec<u8> {
    let sorted = export_order(rows);
    match format {
        ExportFormat::Csv => {
            let mut writer = csv::WriterBuilder::new()
                .terminator(csv::Terminator::CRLF)
                .quote_style(csv::QuoteStyle::Necessary)
                .from_writer(Vec::new());
            writer.write_record(CSV_HEADER).expect("in-memory write");
            for r in sorted {
                writer
                    .write_record([
                        r.asset_class.as_str(),
                        r.component.as_str(),
                        r.failure_mode.as_str(),
                        r.cause.as_str(),
                        r.effect.as_str(),
                        r.recommended_action.as_str(),
                        &r.severity.to_string(),
                        &r.occurrence.to_string(),
                        &r.detection.to_string(),
                        &r.rpn.to_string(),
                        r.review_status.as_str(),
                    ])
                    .expect("in-memory write");
            }
            writer.into_inner().expect("in-memory flush")
        }
        ExportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(&sorted).expect("rows serialize");
            out.push(b'\n');
            out
        }
    }
}
