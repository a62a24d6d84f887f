//! Shared domain types: personas, bank records, FMEA rows, asset context and
//! routing templates.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ValidationError;

/// Persona role. The five built-in roles plus any custom name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Facilitator,
    ReliabilityEngineer,
    QualityEngineer,
    SmeValidator,
    Summarizer,
    Custom(String),
}

impl Role {
    pub fn as_str(&self) -> &str {
        match self {
            Role::Facilitator => "Facilitator",
            Role::ReliabilityEngineer => "ReliabilityEngineer",
            Role::QualityEngineer => "QualityEngineer",
            Role::SmeValidator => "SmeValidator",
            Role::Summarizer => "Summarizer",
            Role::Custom(name) => name,
        }
    }

    /// Human-readable title, as it appears in system messages.
    pub fn display_name(&self) -> &str {
        match self {
            Role::Facilitator => "Facilitator",
            Role::ReliabilityEngineer => "Reliability Engineer",
            Role::QualityEngineer => "Quality Engineer",
            Role::SmeValidator => "SME Validator",
            Role::Summarizer => "Summarizer",
            Role::Custom(name) => name,
        }
    }

    /// Facilitator and Summarizer orchestrate the panel and never answer questions.
    pub fn is_orchestrator(&self) -> bool {
        matches!(self, Role::Facilitator | Role::Summarizer)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = ValidationError;

    /// Known role names match case-insensitively, ignoring spaces, `_` and `-`.
    /// Anything else becomes `Custom`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return Err(ValidationError::new("role", "must not be empty"));
        }
        let folded: String = trimmed
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-'))
            .flat_map(char::to_lowercase)
            .collect();
        Ok(match folded.as_str() {
            "facilitator" => Role::Facilitator,
            "reliabilityengineer" => Role::ReliabilityEngineer,
            "qualityengineer" => Role::QualityEngineer,
            "smevalidator" => Role::SmeValidator,
            "summarizer" => Role::Summarizer,
            _ => Role::Custom(trimmed.to_string()),
        })
    }
}

impl Serialize for Role {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Role {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A persona: role, skill keywords and the system message that steers it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub role: Role,
    pub skills: Vec<String>,
    pub system_message: String,
    pub registration_index: u32,
}

impl Agent {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.role.as_str().trim().is_empty() {
            return Err(ValidationError::new("role", "must not be empty"));
        }
        if self.skills.is_empty() && !self.role.is_orchestrator() {
            return Err(ValidationError::new(
                "skills",
                format!("only Facilitator and Summarizer may have no skills ({})", self.role),
            ));
        }
        if self.system_message.trim().is_empty() {
            return Err(ValidationError::new("system_message", "must not be empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrigin {
    SeedBank,
    FollowupMined,
    SmeRequeue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionStatus {
    Pending,
    Assigned,
    Answered,
    FilteredUseless,
    FilteredDuplicate,
}

impl QuestionStatus {
    pub fn is_filtered(self) -> bool {
        matches!(self, QuestionStatus::FilteredUseless | QuestionStatus::FilteredDuplicate)
    }
}

/// SME note attached to a re-queued question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmeFeedback {
    pub row_id: String,
    pub comment: String,
    /// The rejected row rendered as a single `mode|cause|effect|action|S|O|D` line.
    pub rejected_row: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub origin: QuestionOrigin,
    pub round_created: u8,
    pub status: QuestionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<SmeFeedback>,
}

impl Question {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must not be empty"));
        }
        if self.text.trim().is_empty() {
            return Err(ValidationError::new("text", "must not be empty"));
        }
        if !(1..=4).contains(&self.round_created) {
            return Err(ValidationError::new("round_created", "must be in 1..=4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerStatus {
    Accepted,
    /// Reply still lacked a parseable FMEA block after the repair re-prompt.
    NeedsReview,
    FilteredDuplicate,
    /// Dropped because its question was filtered.
    FilteredTransitive,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub id: String,
    pub question_id: String,
    pub persona_role: Role,
    pub text: String,
    pub round: u8,
    pub exemplar_ids: Vec<String>,
    pub status: AnswerStatus,
}

impl Answer {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("id", "must not be empty"));
        }
        if self.question_id.is_empty() {
            return Err(ValidationError::new("question_id", "must not be empty"));
        }
        if self.text.trim().is_empty() {
            return Err(ValidationError::new("text", "must not be empty"));
        }
        if !(1..=4).contains(&self.round) {
            return Err(ValidationError::new("round", "must be in 1..=4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    Draft,
    Approved,
    Rejected,
    Edited,
}

impl ReviewStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ReviewStatus::Draft => "draft",
            ReviewStatus::Approved => "approved",
            ReviewStatus::Rejected => "rejected",
            ReviewStatus::Edited => "edited",
        }
    }
}

/// One failure-mode line of the generated table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FmeaRow {
    pub id: String,
    pub asset_class: String,
    pub component: String,
    pub failure_mode: String,
    pub cause: String,
    pub effect: String,
    pub recommended_action: String,
    pub severity: u8,
    pub occurrence: u8,
    pub detection: u8,
    pub rpn: u16,
    pub review_status: ReviewStatus,
    #[serde(default)]
    pub sme_comment: Option<String>,
    /// Questions whose answers produced this row, oldest first.
    #[serde(default)]
    pub source_question_ids: Vec<String>,
}

impl FmeaRow {
    /// Key used to detect duplicate rows: normalized mode, cause and effect.
    pub fn merge_key(&self) -> (String, String, String) {
        (
            normalize_phrase(&self.failure_mode),
            normalize_phrase(&self.cause),
            normalize_phrase(&self.effect),
        )
    }
}

fn normalize_phrase(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Risk priority number: severity × occurrence × detection, each rated 1..=10.
pub fn compute_rpn(severity: u8, occurrence: u8, detection: u8) -> Result<u16, ValidationError> {
    for (field, value) in [("severity", severity), ("occurrence", occurrence), ("detection", detection)] {
        if !(1..=10).contains(&value) {
            return Err(ValidationError::new(field, format!("must be in 1..=10, got {value}")));
        }
    }
    Ok(u16::from(severity) * u16::from(occurrence) * u16::from(detection))
}

/// Trims the ends and collapses internal whitespace runs to one space.
/// Case and punctuation are preserved.
pub fn normalize_asset_class(raw: &str) -> Result<String, ValidationError> {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    if out.is_empty() {
        return Err(ValidationError::new("asset_class", "must not be empty or whitespace"));
    }
    Ok(out)
}

/// Lists every broken `FmeaRow` invariant. Empty means the row is valid.
pub fn validate_fmea_row(row: &FmeaRow) -> Vec<String> {
    let mut violations = Vec::new();
    if row.id.is_empty() {
        violations.push("id must not be empty".to_string());
    }
    let ratings = [("severity", row.severity), ("occurrence", row.occurrence), ("detection", row.detection)];
    let mut ratings_ok = true;
    for (field, value) in ratings {
        if !(1..=10).contains(&value) {
            ratings_ok = false;
            violations.push(format!("{field} out of range 1..=10"));
        }
    }
    if !(1..=1000).contains(&row.rpn) {
        violations.push("rpn out of range 1..=1000".to_string());
    }
    if ratings_ok
        && u32::from(row.rpn)
            != u32::from(row.severity) * u32::from(row.occurrence) * u32::from(row.detection)
    {
        violations.push("rpn mismatch".to_string());
    }
    if row.review_status == ReviewStatus::Rejected
        && row.sme_comment.as_deref().is_none_or(|c| c.trim().is_empty())
    {
        violations.push("rejected row requires sme_comment".to_string());
    }
    if row.review_status == ReviewStatus::Approved {
        let narrative = [
            ("asset_class", &row.asset_class),
            ("component", &row.component),
            ("failure_mode", &row.failure_mode),
            ("cause", &row.cause),
            ("effect", &row.effect),
            ("recommended_action", &row.recommended_action),
        ];
        for (field, value) in narrative {
            if value.trim().is_empty() {
                violations.push(format!("{field} must not be empty on an approved row"));
            }
        }
    }
    violations
}

/// A retrieved knowledge snippet.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snippet {
    pub source_path: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssetContext {
    pub asset_class: String,
    pub parameters: BTreeMap<String, String>,
    pub snippets: Vec<Snippet>,
    /// Out-of-scope asset: nothing in the knowledge repository matched.
    pub oos: bool,
}

/// Routing guideline binding question patterns to persona bonuses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTemplate {
    pub id: String,
    #[serde(default)]
    pub match_patterns: Vec<String>,
    #[serde(default)]
    pub role_preferences: BTreeMap<Role, f64>,
    #[serde(default)]
    pub guideline_text: String,
    #[serde(default)]
    pub default: bool,
}

impl RoutingTemplate {
    pub fn bonus_for(&self, role: &Role) -> f64 {
        self.role_preferences.get(role).copied().unwrap_or(0.0)
    }
}

/// Deterministic, lexicographically sortable identifiers: a kind prefix and a
/// zero-padded sequence number.
pub fn sequential_id(prefix: &str, n: u64) -> String {
    format!("{prefix}{n:06}")
}
