//! Loading the knowledge repository: front-matter documents and failure
//! history CSV files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fmea_panel_core::domain::normalize_asset_class;
use fmea_panel_core::retrieval::{KnowledgeEntry, KnowledgeIndex};
use serde::Deserialize;
use walkdir::WalkDir;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("knowledge repository {path} is not a readable directory: {reason}")]
    Unreadable { path: PathBuf, reason: String },
}

/// What happened while building an index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub documents: usize,
    pub history_records: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct HistoryRecord {
    asset_class: String,
    component: String,
    failure_mode: String,
    date: String,
    #[serde(default)]
    note: String,
}

struct FrontMatter {
    id: String,
    asset_classes: Vec<String>,
    title: Option<String>,
    body: String,
}

fn parse_front_matter(text: &str) -> Result<FrontMatter, String> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("---") {
        return Err("missing front-matter block".into());
    }
    let mut fields = BTreeMap::new();
    let mut closed = false;
    for line in lines.by_ref() {
        if line.trim() == "---" {
            closed = true;
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once(':').ok_or_else(|| format!("front-matter line `{line}` has no `:`"))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    if !closed {
        return Err("front-matter block is not closed".into());
    }
    let id = fields.remove("id").filter(|v| !v.is_empty()).ok_or("front-matter has no `id:`")?;
    let asset_classes: Vec<String> = fields
        .remove("asset_classes")
        .ok_or("front-matter has no `asset_classes:`")?
        .split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect();
    if asset_classes.is_empty() {
        return Err("`asset_classes:` is empty".into());
    }
    let body: Vec<&str> = lines.collect();
    Ok(FrontMatter { id, asset_classes, title: fields.remove("title"), body: body.join("\n").trim().to_string() })
}

fn first_heading(body: &str) -> Option<String> {
    body.lines().find_map(|l| l.strip_prefix('#').map(|h| h.trim_start_matches('#').trim().to_string()))
}

fn relative(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/")
}

fn load_document(index: &mut KnowledgeIndex, root: &Path, path: &Path, report: &mut IngestReport) {
    let rel = relative(root, path);
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            report.warnings.push(format!("{rel}: unreadable ({e}), skipped"));
            return;
        }
    };
    let fm = match parse_front_matter(&text) {
        Ok(fm) => fm,
        Err(e) => {
            report.warnings.push(format!("{rel}: {e}, skipped"));
            return;
        }
    };
    let title = fm.title.or_else(|| first_heading(&fm.body)).unwrap_or_else(|| fm.id.clone());
    let entry =
        KnowledgeEntry { doc_id: fm.id, asset_class_tags: fm.asset_classes, title, body: fm.body, source_path: rel.clone() };
    match index.insert(entry) {
        Ok(()) => report.documents += 1,
        Err(e) => report.warnings.push(format!("{rel}: {}, skipped", e.message)),
    }
}

fn load_history(index: &mut KnowledgeIndex, root: &Path, path: &Path, report: &mut IngestReport) {
    let rel = relative(root, path);
    let mut reader = match csv::Reader::from_path(path) {
        Ok(r) => r,
        Err(e) => {
            report.warnings.push(format!("{rel}: unreadable ({e}), skipped"));
            return;
        }
    };
    // one synthesized snippet per asset class, records in file order
    let mut by_asset: BTreeMap<String, Vec<HistoryRecord>> = BTreeMap::new();
    for (i, record) in reader.deserialize::<HistoryRecord>().enumerate() {
        match record {
            Ok(r) => match normalize_asset_class(&r.asset_class) {
                Ok(asset) => by_asset.entry(asset).or_default().push(r),
                Err(_) => report.warnings.push(format!("{rel}: record {} has no asset_class, skipped", i + 1)),
            },
            Err(e) => report.warnings.push(format!("{rel}: record {}: {e}, skipped", i + 1)),
        }
    }
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    for (asset, records) in by_asset {
        let mut body = String::new();
        for r in &records {
            body.push_str(&format!("- {} {}: {}", r.date.trim(), r.component.trim(), r.failure_mode.trim()));
            if !r.note.trim().is_empty() {
                body.push_str(&format!(" ({})", r.note.trim()));
            }
            body.push('\n');
        }
        let entry = KnowledgeEntry {
            doc_id: format!("history:{stem}:{asset}"),
            asset_class_tags: vec![asset.clone()],
            title: format!("Failure history: {asset}"),
            body: body.trim_end().to_string(),
            source_path: rel.clone(),
        };
        match index.insert(entry) {
            Ok(()) => report.history_records += records.len(),
            Err(e) => report.warnings.push(format!("{rel}: {}, skipped", e.message)),
        }
    }
}

/// Builds an index from every `.md`/`.txt` document and `.csv` history file
/// under `root`, visited in path order.
pub fn ingest_repository(root: &Path) -> Result<(KnowledgeIndex, IngestReport), IngestError> {
    let unreadable = |reason: String| IngestError::Unreadable { path: root.to_path_buf(), reason };
    let meta = fs::metadata(root).map_err(|e| unreadable(e.to_string()))?;
    if !meta.is_dir() {
        return Err(unreadable("not a directory".into()));
    }
    let mut index = KnowledgeIndex::default();
    let mut report = IngestReport::default();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                report.warnings.push(format!("walk error: {e}"));
                continue;
            }
        };
        if !entry.file_type().is_file() {
            continue;
        }
        let path = entry.path();
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("md" | "markdown" | "txt") => load_document(&mut index, root, path, &mut report),
            Some("csv") => load_history(&mut index, root, path, &mut report),
            _ => {}
        }
    }
    index.built_at = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    Ok((index, report))
}
