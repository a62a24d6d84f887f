//! Layout of the user messages sent to personas.
//!
//! ```text
//! [ROUND] R2_in_context
//! [ASSET] Pump - Vertical Close-Coupled
//! [OOS] false
//! [PARAMETERS]
//! - rated_flow: 120 m3/h
//!
//! ## CONTEXT
//! ### Seal failures (docs/seals.md)
//! ...
//! ## QUESTION
//! ...
//! ```
//!
//! Sections are introduced by `## NAME` lines. Embedded free text (snippets,
//! exemplar answers) has any line starting with `#` indented by one space so
//! it cannot open a section.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

pub const SECTION_CONTEXT: &str = "CONTEXT";
pub const SECTION_EXEMPLARS: &str = "EXEMPLARS";
pub const SECTION_FEEDBACK: &str = "SME FEEDBACK";
pub const SECTION_QUESTION: &str = "QUESTION";
pub const SECTION_FORMAT: &str = "FORMAT";
pub const SECTION_ANSWER: &str = "ANSWER";
pub const SECTION_ANSWERS: &str = "ANSWERS";
pub const SECTION_TASK: &str = "TASK";

pub const EXEMPLAR_PREFIX: &str = "### EXEMPLAR ";
pub const ANSWER_PREFIX: &str = "### ANSWER ";

/// Parsed structured header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Header {
    pub round: Option<String>,
    pub asset: Option<String>,
    pub oos: Option<bool>,
    pub parameters: BTreeMap<String, String>,
}

pub fn render_header(round: &str, asset: &str, oos: bool, parameters: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    out.push_str("[ROUND] ");
    out.push_str(round);
    out.push_str("\n[ASSET] ");
    out.push_str(asset);
    out.push_str(if oos { "\n[OOS] true\n" } else { "\n[OOS] false\n" });
    if !parameters.is_empty() {
        out.push_str("[PARAMETERS]\n");
        for (k, v) in parameters {
            out.push_str("- ");
            out.push_str(k);
            out.push_str(": ");
            out.push_str(v);
            out.push('\n');
        }
    }
    out.push('\n');
    out
}

pub fn parse_header(text: &str) -> Header {
    let mut header = Header::default();
    let mut in_params = false;
    for line in text.lines() {
        if line.starts_with("## ") {
            break;
        }
        if let Some(v) = line.strip_prefix("[ROUND] ") {
            header.round = Some(v.trim().into());
        } else if let Some(v) = line.strip_prefix("[ASSET] ") {
            header.asset = Some(v.trim().into());
        } else if let Some(v) = line.strip_prefix("[OOS] ") {
            header.oos = Some(v.trim() == "true");
        } else if line == "[PARAMETERS]" {
            in_params = true;
        } else if in_params {
            match line.strip_prefix("- ").and_then(|kv| kv.split_once(": ")) {
                Some((k, v)) => {
                    header.parameters.insert(k.into(), v.into());
                }
                None => in_params = false,
            }
        }
    }
    header
}

/// Indents lines that would otherwise read as headings.
pub fn embed(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    for (i, line) in text.trim_end().lines().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        if line.starts_with('#') {
            out.push(' ');
        }
        out.push_str(line);
    }
    out
}

/// Appends `## NAME` followed by `body`.
pub fn push_section(out: &mut String, name: &str, body: &str) {
    out.push_str("## ");
    out.push_str(name);
    out.push('\n');
    out.push_str(body.trim_end());
    out.push_str("\n\n");
}

/// Body of the first `## NAME` section, trimmed.
pub fn section<'a>(text: &'a str, name: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut start = None;
    for line in text.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        if let Some(s) = start {
            if bare.starts_with("## ") {
                return Some(text[s..offset].trim());
            }
        } else if bare.strip_prefix("## ") == Some(name) {
            start = Some(offset + line.len());
        }
        offset += line.len();
    }
    start.map(|s| text[s..].trim())
}

/// Whether a `## NAME` section exists.
pub fn has_section(text: &str, name: &str) -> bool {
    text.lines().any(|l| l.strip_prefix("## ") == Some(name))
}

fn labelled_blocks<'a>(body: &'a str, prefix: &str) -> Vec<(&'a str, &'a str)> {
    let mut out: Vec<(&str, &str)> = Vec::new();
    let mut current: Option<(&str, usize)> = None;
    let mut offset = 0;
    for line in body.split_inclusive('\n') {
        let bare = line.trim_end_matches(['\n', '\r']);
        if let Some(label) = bare.strip_prefix(prefix) {
            if let Some((l, s)) = current.take() {
                out.push((l, body[s..offset].trim()));
            }
            current = Some((label.trim(), offset + line.len()));
        }
        offset += line.len();
    }
    if let Some((l, s)) = current {
        out.push((l, body[s..].trim()));
    }
    out
}

/// `(label, body)` for every `### EXEMPLAR` entry.
pub fn exemplar_blocks(text: &str) -> Vec<(&str, &str)> {
    section(text, SECTION_EXEMPLARS).map(|b| labelled_blocks(b, EXEMPLAR_PREFIX)).unwrap_or_default()
}

/// `(label, body)` for every `### ANSWER` entry of the answers section.
pub fn answer_sections(text: &str) -> Vec<(&str, &str)> {
    section(text, SECTION_ANSWERS).map(|b| labelled_blocks(b, ANSWER_PREFIX)).unwrap_or_default()
}
