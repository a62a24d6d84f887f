//! The machine-readable FMEA block embedded in persona replies.
//!
//! ~~~text
//! ```fmea
//! FMEA:
//! mode|cause|effect|action|S|O|D
//! Seal leakage|Dry running|Fluid loss|Fit dry-run protection|7|5|4
//! ```
//! ~~~
//!
//! The block starts at a line reading `FMEA:`. The fence is optional, as is the
//! literal column header line. Rows continue until a blank line, a closing
//! fence or the end of the text. A row may carry a leading component column
//! (eight fields); otherwise the component is inferred from the wording.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub const BLOCK_MARKER: &str = "FMEA:";
pub const HEADER_LINE: &str = "mode|cause|effect|action|S|O|D";

/// Component keywords recognized when a row has no explicit component column,
/// paired with the component name they imply.
pub const COMPONENT_KEYWORDS: &[(&str, &str)] = &[
    ("seal", "Mechanical seal"),
    ("bearing", "Bearings"),
    ("impeller", "Impeller"),
    ("cavitation", "Impeller"),
    ("coupling", "Shaft coupling"),
    ("shaft", "Shaft"),
    ("winding", "Motor"),
    ("motor", "Motor"),
    ("casing", "Casing"),
    ("wear ring", "Casing"),
    ("tube", "Tubes"),
    ("burner", "Burner"),
    ("flame", "Burner"),
    ("refractory", "Refractory"),
    ("safety valve", "Safety valve"),
    ("valve", "Valves"),
    ("feedwater", "Feedwater system"),
    ("compressor", "Compressor"),
    ("condenser", "Condenser"),
    ("evaporator", "Evaporator"),
    ("refrigerant", "Refrigerant circuit"),
    ("sensor", "Instrumentation"),
    ("lubrica", "Lubrication system"),
    ("fastener", "Fasteners"),
    ("housing", "Housing"),
];

/// One parsed row of a block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRow {
    pub component: String,
    pub failure_mode: String,
    pub cause: String,
    pub effect: String,
    pub recommended_action: String,
    pub severity: u8,
    pub occurrence: u8,
    pub detection: u8,
}

impl BlockRow {
    /// The seven-column line for this row.
    pub fn to_line(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.failure_mode, self.cause, self.effect, self.recommended_action, self.severity, self.occurrence,
            self.detection
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BlockError {
    #[error("no `FMEA:` block found")]
    Missing,
    #[error("FMEA block has no rows")]
    Empty,
    #[error("FMEA block line {line}: {reason}")]
    BadLine { line: usize, reason: String },
}

pub fn infer_component(text: &str) -> String {
    let lower = text.to_lowercase();
    COMPONENT_KEYWORDS
        .iter()
        .find(|(kw, _)| lower.contains(kw))
        .map(|(_, c)| c.to_string())
        .unwrap_or_else(|| "Assembly".to_string())
}

fn rating(field: &str, raw: &str, line: usize) -> Result<u8, BlockError> {
    match raw.trim().parse::<u8>() {
        Ok(v) if (1..=10).contains(&v) => Ok(v),
        _ => Err(BlockError::BadLine { line, reason: format!("{field} must be an integer in 1..=10, got `{}`", raw.trim()) }),
    }
}

fn parse_row(line: &str, line_no: usize) -> Result<BlockRow, BlockError> {
    let fields: Vec<&str> = line.split('|').map(str::trim).collect();
    let (component, rest) = match fields.len() {
        7 => (None, &fields[..]),
        8 => (Some(fields[0]), &fields[1..]),
        n => {
            return Err(BlockError::BadLine { line: line_no, reason: format!("expected 7 or 8 fields, got {n}") })
        }
    };
    let names = ["mode", "cause", "effect", "action"];
    for (name, value) in names.iter().zip(rest) {
        if value.is_empty() {
            return Err(BlockError::BadLine { line: line_no, reason: format!("{name} is empty") });
        }
    }
    let component = match component {
        Some(c) if !c.is_empty() => c.to_string(),
        _ => infer_component(&format!("{} {}", rest[0], rest[1])),
    };
    Ok(BlockRow {
        component,
        failure_mode: rest[0].to_string(),
        cause: rest[1].to_string(),
        effect: rest[2].to_string(),
        recommended_action: rest[3].to_string(),
        severity: rating("S", rest[4], line_no)?,
        occurrence: rating("O", rest[5], line_no)?,
        detection: rating("D", rest[6], line_no)?,
    })
}

/// Parses every block in `text`. Prose around and between blocks is ignored.
pub fn parse_blocks(text: &str) -> Result<Vec<BlockRow>, BlockError> {
    let mut rows = Vec::new();
    let mut found = false;
    let mut in_block = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if !in_block {
            if line == BLOCK_MARKER {
                found = true;
                in_block = true;
            }
            continue;
        }
        if line.is_empty() || line.starts_with("```") {
            in_block = false;
            continue;
        }
        if line.eq_ignore_ascii_case(HEADER_LINE) {
            continue;
        }
        if line == BLOCK_MARKER {
            continue;
        }
        rows.push(parse_row(line, i + 1)?);
    }
    if !found {
        return Err(BlockError::Missing);
    }
    if rows.is_empty() {
        return Err(BlockError::Empty);
    }
    Ok(rows)
}

/// Renders rows as a fenced block with the header line.
pub fn render_block(rows: &[BlockRow]) -> String {
    let mut out = String::from("```fmea\n");
    out.push_str(BLOCK_MARKER);
    out.push('\n');
    out.push_str(HEADER_LINE);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    out.push_str("```\n");
    out
}
