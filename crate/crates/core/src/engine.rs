//! The panel session: a four-phase round schedule around the
//! select → assign → respond → summarize loop.
//!
//! A [`Session`] is event sourced. Every mutation is an [`Event`] appended to
//! the session log and folded into the in-memory state by one `apply`
//! function, so [`Session::replay`] rebuilds a session exactly from its log.
//! Nothing in the log depends on wall-clock time; with the mock provider two
//! runs over the same inputs produce identical logs.
//!
//! Round phases apply to the whole session. At each round boundary the
//! questions that were answered (and not filtered) are reopened so that the
//! next phase asks them again under its own prompting regime:
//!
//! * R1, zero-shot: header and question only.
//! * R2, in-context: adds the retrieved context snippets.
//! * R3, chain of interaction: every accepted answer is mined for follow-up
//!   questions, which wait for the gate and are first asked in R4.
//! * R4, few-shot: adds `k` exemplar answers sampled from earlier rounds.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::domain::{
    compute_rpn, sequential_id, validate_fmea_row, Agent, Answer, AnswerStatus, AssetContext, FmeaRow, Question,
    QuestionOrigin, QuestionStatus, ReviewStatus, Role, SmeFeedback,
};
use crate::error::{EngineError, ValidationError};
use crate::fmea_block::{parse_blocks, BlockRow};
use crate::gate::{gate_round, GateInput, GateReport, GateThresholds, UsefulnessClassifier};
use crate::llm::{ChatMessage, Completer, CompletionRequest};
use crate::prompt::{self, embed, push_section, render_header};
use crate::routing::{LexicalRouter, PersonaRouter, RoutingDecision, RoutingWeights, TemplateSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Round {
    #[serde(rename = "R1_zero_shot")]
    R1ZeroShot,
    #[serde(rename = "R2_in_context")]
    R2InContext,
    #[serde(rename = "R3_chain_of_interaction")]
    R3ChainOfInteraction,
    #[serde(rename = "R4_few_shot")]
    R4FewShot,
    #[serde(rename = "finalized")]
    Finalized,
}

impl Round {
    pub fn number(self) -> Option<u8> {
        match self {
            Round::R1ZeroShot => Some(1),
            Round::R2InContext => Some(2),
            Round::R3ChainOfInteraction => Some(3),
            Round::R4FewShot => Some(4),
            Round::Finalized => None,
        }
    }

    pub fn next(self) -> Round {
        match self {
            Round::R1ZeroShot => Round::R2InContext,
            Round::R2InContext => Round::R3ChainOfInteraction,
            Round::R3ChainOfInteraction => Round::R4FewShot,
            Round::R4FewShot | Round::Finalized => Round::Finalized,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Round::R1ZeroShot => "R1_zero_shot",
            Round::R2InContext => "R2_in_context",
            Round::R3ChainOfInteraction => "R3_chain_of_interaction",
            Round::R4FewShot => "R4_few_shot",
            Round::Finalized => "finalized",
        }
    }
}

pub const DEFAULT_FOLLOWUPS_PER_ANSWER: usize = 2;
pub const DEFAULT_FOLLOWUP_CAP: usize = 20;
pub const DEFAULT_FEWSHOT_K: usize = 3;

/// Words whose presence (as a substring of the lowercased question) marks a
/// question as row-eliciting, so its answer must carry an FMEA block.
pub const DEFAULT_ROW_CUES: &[&str] =
    &["fail", "cause", "effect", "risk", "fault", "wear", "leak", "damage", "degrad", "symptom"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSettings {
    pub thresholds: GateThresholds,
    pub classifier_cutoff: f64,
    pub followups_per_answer: usize,
    pub followup_cap: usize,
    pub fewshot_k: usize,
    pub routing: RoutingWeights,
    pub model_name: String,
    pub max_tokens: u32,
    /// Sampling temperature for rounds 1 to 4.
    pub temperatures: [f64; 4],
    pub rng_seed: u64,
    pub row_cues: Vec<String>,
}

impl EngineSettings {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            thresholds: GateThresholds::default(),
            classifier_cutoff: crate::gate::DEFAULT_CLASSIFIER_CUTOFF,
            followups_per_answer: DEFAULT_FOLLOWUPS_PER_ANSWER,
            followup_cap: DEFAULT_FOLLOWUP_CAP,
            fewshot_k: DEFAULT_FEWSHOT_K,
            routing: RoutingWeights::default(),
            model_name: "mock".into(),
            max_tokens: 1024,
            temperatures: [0.0; 4],
            rng_seed,
            row_cues: DEFAULT_ROW_CUES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.thresholds.theta_q) {
            return Err(ValidationError::new("thresholds.theta_q", "must be in (0, 1]"));
        }
        if !in_unit(self.thresholds.theta_a) {
            return Err(ValidationError::new("thresholds.theta_a", "must be in (0, 1]"));
        }
        if !in_unit(self.classifier_cutoff) {
            return Err(ValidationError::new("thresholds.classifier_cutoff", "must be in (0, 1]"));
        }
        if self.thresholds.max_n == 0 {
            return Err(ValidationError::new("thresholds.max_n", "must be at least 1"));
        }
        if self.max_tokens == 0 {
            return Err(ValidationError::new("max_tokens", "must be positive"));
        }
        if self.temperatures.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(ValidationError::new("temperatures", "must be finite and >= 0"));
        }
        let w = self.routing;
        if [w.skill, w.context, w.bonus].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(ValidationError::new("routing", "weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// What a completion request was for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Purpose {
    Answer { question_id: String },
    Repair { question_id: String },
    Followups { answer_id: String },
    Summary { round: u8 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewKind {
    Approve,
    Reject,
    Edit,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u8,
    pub questions_processed: usize,
    pub answers_accepted: usize,
    pub questions_filtered_useless: usize,
    pub items_filtered_duplicate: usize,
    pub followups_added: usize,
    pub rows_emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u8,
    pub summary: String,
    pub row_ids: Vec<String>,
    /// Rows folded into another row with the same mode, cause and effect.
    pub merged_rows: usize,
    /// The summarizer reply had no parseable block; rows come straight from the answers.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session_id: String,
        context: AssetContext,
        agents: Vec<Agent>,
        templates: TemplateSet,
        settings: EngineSettings,
    },
    QuestionAdded {
        question: Question,
    },
    QuestionRouted {
        decision: RoutingDecision,
    },
    CompletionRequested {
        purpose: Purpose,
        request: CompletionRequest,
    },
    CompletionFailed {
        purpose: Purpose,
        error: String,
    },
    RepairRequested {
        question_id: String,
        parse_error: String,
    },
    AnswerRecorded {
        answer: Answer,
    },
    FollowupsMined {
        answer_id: String,
        question_ids: Vec<String>,
        truncated: bool,
    },
    FollowupMiningFailed {
        answer_id: String,
        error: String,
    },
    GateCompleted {
        report: GateReport,
    },
    RowEmitted {
        row: FmeaRow,
    },
    RoundSummarized {
        summary: RoundSummary,
    },
    RowReviewed {
        action: ReviewKind,
        row: FmeaRow,
        #[serde(default)]
        requeued_question_id: Option<String>,
    },
    RoundCompleted {
        report: RoundReport,
    },
    QuestionsReopened {
        question_ids: Vec<String>,
    },
    SessionFinalized {
        rows: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub round: Round,
    #[serde(flatten)]
    pub event: Event,
}

/// Field replacements for an SME edit.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RowEdits {
    pub component: Option<String>,
    pub failure_mode: Option<String>,
    pub cause: Option<String>,
    pub effect: Option<String>,
    pub recommended_action: Option<String>,
    pub severity: Option<u8>,
    pub occurrence: Option<u8>,
    pub detection: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReviewAction {
    Approve,
    Reject { comment: String },
    Edit { edits: RowEdits, comment: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReviewOutcome {
    pub row: FmeaRow,
    pub requeued_question_id: Option<String>,
    /// False when the action was a no-op (approving an approved row).
    pub changed: bool,
}

/// Uniform sample of `min(k, ids.len())` ids without replacement, in sampled
/// order. Each `stream` gives an independent sequence for the same seed.
pub fn sample_ids(ids: &[String], k: usize, seed: u64, stream: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut pool: Vec<&String> = ids.iter().collect();
    let take = k.min(pool.len());
    for i in 0..take {
        let span = (pool.len() - i) as u64;
        // rejection sampling keeps the draw exactly uniform
        let zone = u64::MAX - (u64::MAX % span);
        let draw = loop {
            let v = rng.next_u64();
            if v < zone {
                break v % span;
            }
        };
        pool.swap(i, i + draw as usize);
    }
    pool.into_iter().take(take).cloned().collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

const FOLLOWUP_PREFIX: &str = "FOLLOWUP:";

fn format_instructions() -> &'static str {
    "End your reply with a fenced block whose first line is `FMEA:`, followed by one line per failure mode \
     in the form `mode|cause|effect|action|S|O|D`, where S, O and D are integer ratings from 1 to 10."
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    id: String,
    round: Round,
    context: AssetContext,
    agents: Vec<Agent>,
    templates: TemplateSet,
    settings: EngineSettings,
    questions: Vec<Question>,
    answers: Vec<Answer>,
    rows: Vec<FmeaRow>,
    summaries: Vec<RoundSummary>,
    gate_reports: Vec<GateReport>,
    reports: Vec<RoundReport>,
    events: Vec<EventRecord>,
    requests_issued: u64,
    followups_total: usize,
}

fn validate_panel(agents: &[Agent]) -> Result<(), EngineError> {
    let mut roles = BTreeSet::new();
    let mut indices = BTreeSet::new();
    for agent in agents {
        agent.validate().map_err(|e| ValidationError::new(format!("personas.{}.{}", agent.role, e.field), e.message))?;
        if !roles.insert(agent.role.clone()) {
            return Err(EngineError::Config(format!("persona role {} is registered twice", agent.role)));
        }
        if !indices.insert(agent.registration_index) {
            return Err(EngineError::Config(format!(
                "registration index {} is used twice",
                agent.registration_index
            )));
        }
    }
    for required in [Role::Facilitator, Role::Summarizer] {
        if !roles.contains(&required) {
            return Err(EngineError::Config(format!("the panel needs a {} persona", required.display_name())));
        }
    }
    if !agents.iter().any(|a| !a.role.is_orchestrator()) {
        return Err(EngineError::Config("the panel needs at least one answering persona".into()));
    }
    Ok(())
}

impl Session {
    /// Starts a session in R1 with the seed question bank.
    pub fn create(
        session_id: impl Into<String>,
        context: AssetContext,
        agents: Vec<Agent>,
        templates: TemplateSet,
        settings: EngineSettings,
        seed_questions: &[String],
    ) -> Result<Self, EngineError> {
        let session_id = session_id.into();
        if session_id.trim().is_empty() {
            return Err(ValidationError::new("session_id", "must not be empty").into());
        }
        validate_panel(&agents)?;
        settings.validate()?;
        let created = Event::SessionCreated { session_id, context, agents, templates, settings };
        let mut session = Self::from_created(&created)?;
        session.events.push(EventRecord { seq: 1, round: Round::R1ZeroShot, event: created });
        for text in seed_questions.iter().map(|t| t.trim()).filter(|t| !t.is_empty()) {
            let question = session.new_question(text.into(), QuestionOrigin::SeedBank, None);
            session.record(Event::QuestionAdded { question })?;
        }
        Ok(session)
    }

    fn from_created(event: &Event) -> Result<Self, EngineError> {
        let Event::SessionCreated { session_id, context, agents, templates, settings } = event else {
            return Err(EngineError::Replay("log must start with session_created".into()));
        };
        Ok(Self {
            id: session_id.clone(),
            round: Round::R1ZeroShot,
            context: context.clone(),
            agents: agents.clone(),
            templates: templates.clone(),
            settings: settings.clone(),
            questions: Vec::new(),
            answers: Vec::new(),
            rows: Vec::new(),
            summaries: Vec::new(),
            gate_reports: Vec::new(),
            reports: Vec::new(),
            events: Vec::new(),
            requests_issued: 0,
            followups_total: 0,
        })
    }

    /// Rebuilds a session from its event log.
    pub fn replay(records: impl IntoIterator<Item = EventRecord>) -> Result<Self, EngineError> {
        let mut records = records.into_iter();
        let first = records.next().ok_or_else(|| EngineError::Replay("empty event log".into()))?;
        let mut session = Self::from_created(&first.event)?;
        session.events.push(first);
        for record in records {
            let expected = session.events.len() as u64 + 1;
            if record.seq != expected {
                return Err(EngineError::Replay(format!("expected seq {expected}, found {}", record.seq)));
            }
            if record.round != session.round {
                return Err(EngineError::Replay(format!(
                    "event {} stamped {} while the session is in {}",
                    record.seq,
                    record.round.as_str(),
                    session.round.as_str()
                )));
            }
            session.apply(&record.event)?;
            session.events.push(record);
        }
        Ok(session)
    }

    fn record(&mut self, event: Event) -> Result<(), EngineError> {
        let round = self.round;
        self.apply(&event)?;
        let seq = self.events.len() as u64 + 1;
        self.events.push(EventRecord { seq, round, event });
        Ok(())
    }

    fn apply(&mut self, event: &Event) -> Result<(), EngineError> {
        match event {
            Event::SessionCreated { .. } => {
                return Err(EngineError::Replay("session_created may only open the log".into()));
            }
            Event::QuestionAdded { question } => {
                if self.questions.iter().any(|q| q.id == question.id) {
                    return Err(EngineError::Replay(format!("duplicate question id {}", question.id)));
                }
                self.questions.push(question.clone());
            }
            Event::QuestionRouted { decision } => {
                let q = self.question_mut(&decision.question_id)?;
                if q.status == QuestionStatus::Pending {
                    q.status = QuestionStatus::Assigned;
                }
            }
            Event::CompletionRequested { .. } => self.requests_issued += 1,
            Event::CompletionFailed { .. }
            | Event::RepairRequested { .. }
            | Event::FollowupMiningFailed { .. }
            | Event::SessionFinalized { .. } => {}
            Event::AnswerRecorded { answer } => {
                if self.answers.iter().any(|a| a.id == answer.id) {
                    return Err(EngineError::Replay(format!("duplicate answer id {}", answer.id)));
                }
                self.question_mut(&answer.question_id)?.status = QuestionStatus::Answered;
                self.answers.push(answer.clone());
            }
            Event::FollowupsMined { question_ids, .. } => self.followups_total += question_ids.len(),
            Event::GateCompleted { report } => {
                for drop in &report.useless_dropped {
                    self.question_mut(&drop.question_id)?.status = QuestionStatus::FilteredUseless;
                }
                for drop in &report.duplicates_dropped {
                    if let Some(q) = self.questions.iter_mut().find(|q| q.id == drop.id) {
                        q.status = QuestionStatus::FilteredDuplicate;
                    } else if let Some(a) = self.answers.iter_mut().find(|a| a.id == drop.id) {
                        a.status = AnswerStatus::FilteredDuplicate;
                    } else {
                        return Err(EngineError::Replay(format!("gate dropped unknown item {}", drop.id)));
                    }
                }
                for drop in &report.transitive_dropped {
                    self.answer_mut(&drop.answer_id)?.status = AnswerStatus::FilteredTransitive;
                }
                self.gate_reports.push(report.clone());
            }
            Event::RowEmitted { row } => {
                if self.rows.iter().any(|r| r.id == row.id) {
                    return Err(EngineError::Replay(format!("duplicate row id {}", row.id)));
                }
                self.rows.push(row.clone());
            }
            Event::RoundSummarized { summary } => self.summaries.push(summary.clone()),
            Event::RowReviewed { row, .. } => {
                let slot = self
                    .rows
                    .iter_mut()
                    .find(|r| r.id == row.id)
                    .ok_or_else(|| EngineError::Replay(format!("review of unknown row {}", row.id)))?;
                *slot = row.clone();
            }
            Event::RoundCompleted { report } => {
                if Some(report.round) != self.round.number() {
                    return Err(EngineError::Replay(format!("round {} completed out of order", report.round)));
                }
                self.reports.push(report.clone());
                self.round = self.round.next();
            }
            Event::QuestionsReopened { question_ids } => {
                for id in question_ids {
                    self.question_mut(id)?.status = QuestionStatus::Pending;
                }
            }
        }
        Ok(())
    }

    fn question_mut(&mut self, id: &str) -> Result<&mut Question, EngineError> {
        self.questions
            .iter_mut()
            .find(|q| q.id == id)
            .ok_or_else(|| EngineError::NotFound(format!("question {id}")))
    }

    fn answer_mut(&mut self, id: &str) -> Result<&mut Answer, EngineError> {
        self.answers
            .iter_mut()
            .find(|a| a.id == id)
            .ok_or_else(|| EngineError::NotFound(format!("answer {id}")))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn round(&self) -> Round {
        self.round
    }

    pub fn context(&self) -> &AssetContext {
        &self.context
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn answers(&self) -> &[Answer] {
        &self.answers
    }

    pub fn rows(&self) -> &[FmeaRow] {
        &self.rows
    }

    pub fn summaries(&self) -> &[RoundSummary] {
        &self.summaries
    }

    pub fn gate_reports(&self) -> &[GateReport] {
        &self.gate_reports
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn question(&self, id: &str) -> Option<&Question> {
        self.questions.iter().find(|q| q.id == id)
    }

    pub fn answer(&self, id: &str) -> Option<&Answer> {
        self.answers.iter().find(|a| a.id == id)
    }

    pub fn row(&self, id: &str) -> Option<&FmeaRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    pub fn followups_total(&self) -> usize {
        self.followups_total
    }

    fn round_no(&self) -> Result<u8, EngineError> {
        self.round.number().ok_or(EngineError::Finalized)
    }

    fn agent(&self, role: &Role) -> Result<&Agent, EngineError> {
        self.agents
            .iter()
            .find(|a| &a.role == role)
            .ok_or_else(|| EngineError::Config(format!("no {} persona", role.display_name())))
    }

    fn new_question(&self, text: String, origin: QuestionOrigin, feedback: Option<SmeFeedback>) -> Question {
        Question {
            id: sequential_id("q", self.questions.len() as u64 + 1),
            text,
            origin,
            round_created: self.round.number().unwrap_or(4),
            status: QuestionStatus::Pending,
            feedback,
        }
    }

    fn next_request_seed(&self) -> u64 {
        splitmix64(self.settings.rng_seed ^ splitmix64(self.requests_issued + 1))
    }

    /// Follow-ups wait for the gate of the round that mined them.
    fn eligible(&self, q: &Question) -> bool {
        let Some(round) = self.round.number() else { return false };
        matches!(q.status, QuestionStatus::Pending | QuestionStatus::Assigned)
            && q.round_created <= round
            && !(q.origin == QuestionOrigin::FollowupMined && q.round_created == round)
    }

    /// Ids of questions still to be processed in the current round.
    pub fn pending_ids(&self) -> Vec<String> {
        self.questions.iter().filter(|q| self.eligible(q)).map(|q| q.id.clone()).collect()
    }

    /// Oldest question still to be processed this round. A question left
    /// `assigned` by an interrupted attempt is offered again.
    pub fn select_question(&self) -> Option<&Question> {
        self.questions.iter().find(|q| self.eligible(q))
    }

    pub fn is_row_eliciting(&self, question: &Question) -> bool {
        let text = question.text.to_lowercase();
        self.settings.row_cues.iter().any(|cue| text.contains(cue.as_str()))
    }

    fn header(&self) -> String {
        render_header(self.round.as_str(), &self.context.asset_class, self.context.oos, &self.context.parameters)
    }

    /// Prompt for the persona chosen by `decision`. Context snippets appear
    /// from R2 on and exemplars only in R4.
    pub fn build_prompt(&self, question: &Question, decision: &RoutingDecision, exemplar_ids: &[String]) -> Result<CompletionRequest, EngineError> {
        let round = self.round_no()?;
        let agent = self.agent(&decision.chosen_role)?;
        let template = self.templates.get(&decision.template_id).unwrap_or_else(|| self.templates.default_template());

        let mut system = agent.system_message.trim_end().to_string();
        if !template.guideline_text.trim().is_empty() {
            system.push_str("\n\n");
            system.push_str(template.guideline_text.trim());
        }

        let mut user = self.header();
        if round >= 2 && !self.context.snippets.is_empty() {
            let mut body = String::new();
            for s in &self.context.snippets {
                body.push_str(&format!("### {} ({})\n{}\n", s.title, s.source_path, embed(&s.text)));
            }
            push_section(&mut user, prompt::SECTION_CONTEXT, &body);
        }
        if round == 4 && !exemplar_ids.is_empty() {
            let mut body = String::new();
            for (i, id) in exemplar_ids.iter().enumerate() {
                let answer = self.answer(id).ok_or_else(|| EngineError::NotFound(format!("answer {id}")))?;
                let asked = self.question(&answer.question_id).map_or("", |q| q.text.as_str());
                body.push_str(&format!(
                    "{}{} ({})\nQuestion: {}\nAnswer:\n{}\n",
                    prompt::EXEMPLAR_PREFIX,
                    i + 1,
                    id,
                    asked,
                    embed(&answer.text)
                ));
            }
            push_section(&mut user, prompt::SECTION_EXEMPLARS, &body);
        }
        if let Some(fb) = &question.feedback {
            push_section(
                &mut user,
                prompt::SECTION_FEEDBACK,
                &format!("Row {} was rejected by the SME.\nComment: {}\nRejected row: {}", fb.row_id, fb.comment, fb.rejected_row),
            );
        }
        push_section(&mut user, prompt::SECTION_QUESTION, &question.text);
        if self.is_row_eliciting(question) {
            push_section(&mut user, prompt::SECTION_FORMAT, format_instructions());
        }

        Ok(CompletionRequest {
            messages: alloc::vec![ChatMessage::system(system), ChatMessage::user(user)],
            temperature: self.settings.temperatures[usize::from(round - 1)],
            max_tokens: self.settings.max_tokens,
            model_name: self.settings.model_name.clone(),
            request_seed: None,
        })
    }

    fn send<C: Completer + ?Sized>(&mut self, completer: &C, purpose: Purpose, mut request: CompletionRequest) -> Result<String, EngineError> {
        request.request_seed = Some(self.next_request_seed());
        self.record(Event::CompletionRequested { purpose: purpose.clone(), request: request.clone() })?;
        match completer.complete(&request) {
            Ok(result) => Ok(result.text),
            Err(e) => {
                self.record(Event::CompletionFailed { purpose, error: e.to_string() })?;
                Err(EngineError::Backend(e))
            }
        }
    }

    /// Accepted answers from earlier rounds, the pool for few-shot exemplars.
    fn exemplar_pool(&self) -> Vec<String> {
        let round = self.round.number().unwrap_or(5);
        self.answers
            .iter()
            .filter(|a| a.round < round && a.status == AnswerStatus::Accepted)
            .map(|a| a.id.clone())
            .collect()
    }

    /// Samples `min(k, pool)` exemplar answer ids. Each answer recorded in the
    /// round draws from its own random stream, so the sample is reproducible
    /// after replay.
    pub fn sample_fewshot(&self, k: usize) -> Vec<String> {
        let round = self.round.number().unwrap_or(5);
        let drawn = self.answers.iter().filter(|a| a.round == round).count() as u64;
        sample_ids(&self.exemplar_pool(), k, self.settings.rng_seed, 1 + drawn)
    }

    /// Routes, prompts and records the answer for one question. An answer that
    /// must carry an FMEA block but does not gets one repair re-prompt; a
    /// second failure stores it as needing review.
    pub fn generate_response<C: Completer + ?Sized>(
        &mut self,
        completer: &C,
        question_id: &str,
        decision: &RoutingDecision,
    ) -> Result<String, EngineError> {
        let round = self.round_no()?;
        let question = self.question(question_id).cloned().ok_or_else(|| EngineError::NotFound(format!("question {question_id}")))?;
        let exemplars = if round == 4 { self.sample_fewshot(self.settings.fewshot_k) } else { Vec::new() };
        let request = self.build_prompt(&question, decision, &exemplars)?;
        let purpose = Purpose::Answer { question_id: question.id.clone() };
        let mut reply = self.send(completer, purpose, request.clone())?;

        let mut status = AnswerStatus::Accepted;
        let needs_block = self.is_row_eliciting(&question);
        let check = |text: &str| -> Result<(), String> {
            if text.trim().is_empty() {
                return Err("empty reply".into());
            }
            if needs_block {
                parse_blocks(text).map(|_| ()).map_err(|e| e.to_string())
            } else {
                Ok(())
            }
        };
        if let Err(parse_error) = check(&reply) {
            self.record(Event::RepairRequested { question_id: question.id.clone(), parse_error: parse_error.clone() })?;
            let mut repair = request;
            repair.messages.push(ChatMessage::assistant(reply.clone()));
            repair.messages.push(ChatMessage::user(format!(
                "Your previous reply could not be used ({parse_error}). Answer again. {}",
                format_instructions()
            )));
            let second = self.send(completer, Purpose::Repair { question_id: question.id.clone() }, repair)?;
            if check(&second).is_err() {
                status = AnswerStatus::NeedsReview;
            }
            if !second.trim().is_empty() {
                reply = second;
            }
        }
        if reply.trim().is_empty() {
            reply = "(empty reply)".into();
        }

        let answer = Answer {
            id: sequential_id("a", self.answers.len() as u64 + 1),
            question_id: question.id.clone(),
            persona_role: decision.chosen_role.clone(),
            text: reply,
            round,
            exemplar_ids: exemplars,
            status,
        };
        let id = answer.id.clone();
        self.record(Event::AnswerRecorded { answer })?;
        Ok(id)
    }

    /// Asks the Facilitator for follow-up questions grounded in one answer.
    /// Only active in R3; the session-wide cap truncates hard. Backend
    /// failures are logged and yield no follow-ups.
    pub fn mine_followups<C: Completer + ?Sized>(&mut self, completer: &C, answer_id: &str) -> Result<Vec<String>, EngineError> {
        if self.round != Round::R3ChainOfInteraction {
            return Ok(Vec::new());
        }
        let remaining = self.settings.followup_cap.saturating_sub(self.followups_total);
        let wanted = self.settings.followups_per_answer.min(remaining);
        if wanted == 0 {
            return Ok(Vec::new());
        }
        let answer = self.answer(answer_id).cloned().ok_or_else(|| EngineError::NotFound(format!("answer {answer_id}")))?;
        let facilitator = self.agent(&Role::Facilitator)?;

        let mut user = self.header();
        push_section(&mut user, prompt::SECTION_ANSWER, &embed(&answer.text));
        push_section(
            &mut user,
            prompt::SECTION_TASK,
            &format!(
                "Propose up to {wanted} follow-up questions that probe this answer further. \
                 Write each on its own line starting with `{FOLLOWUP_PREFIX}`."
            ),
        );
        let request = CompletionRequest {
            messages: alloc::vec![ChatMessage::system(facilitator.system_message.clone()), ChatMessage::user(user)],
            temperature: self.settings.temperatures[2],
            max_tokens: self.settings.max_tokens,
            model_name: self.settings.model_name.clone(),
            request_seed: None,
        };
        let reply = match self.send(completer, Purpose::Followups { answer_id: answer_id.into() }, request) {
            Ok(reply) => reply,
            Err(EngineError::Backend(e)) => {
                self.record(Event::FollowupMiningFailed { answer_id: answer_id.into(), error: e.to_string() })?;
                return Ok(Vec::new());
            }
            Err(e) => return Err(e),
        };
        let proposed: Vec<String> = reply
            .lines()
            .filter_map(|l| l.trim().strip_prefix(FOLLOWUP_PREFIX))
            .map(|q| q.trim().to_string())
            .filter(|q| !q.is_empty())
            .collect();
        let truncated = proposed.len() > wanted;
        let mut ids = Vec::new();
        for text in proposed.into_iter().take(wanted) {
            let question = self.new_question(text, QuestionOrigin::FollowupMined, None);
            ids.push(question.id.clone());
            self.record(Event::QuestionAdded { question })?;
        }
        self.record(Event::FollowupsMined { answer_id: answer_id.into(), question_ids: ids.clone(), truncated })?;
        Ok(ids)
    }

    /// Runs steps one to three for the next eligible question and, in R3, mines
    /// follow-ups from the answer. Returns the answer id, or `None` when the
    /// round has nothing left to process.
    pub fn process_next<C: Completer + ?Sized>(&mut self, completer: &C) -> Result<Option<String>, EngineError> {
        self.round_no()?;
        let Some(question) = self.select_question().cloned() else { return Ok(None) };
        let router = LexicalRouter { weights: self.settings.routing };
        let decision = router.assign(&question, &self.agents, &self.context, &self.templates)?;
        self.record(Event::QuestionRouted { decision: decision.clone() })?;
        let answer_id = self.generate_response(completer, &question.id, &decision)?;
        if self.round == Round::R3ChainOfInteraction
            && self.answer(&answer_id).is_some_and(|a| a.status == AnswerStatus::Accepted)
        {
            self.mine_followups(completer, &answer_id)?;
        }
        Ok(Some(answer_id))
    }

    fn answer_rows(&self, answer: &Answer) -> Vec<BlockRow> {
        parse_blocks(&answer.text).unwrap_or_default()
    }

    fn to_fmea_row(&self, index: usize, row: &BlockRow, sources: Vec<String>) -> Result<FmeaRow, EngineError> {
        Ok(FmeaRow {
            id: sequential_id("fr", (self.rows.len() + index + 1) as u64),
            asset_class: self.context.asset_class.clone(),
            component: row.component.clone(),
            failure_mode: row.failure_mode.clone(),
            cause: row.cause.clone(),
            effect: row.effect.clone(),
            recommended_action: row.recommended_action.clone(),
            severity: row.severity,
            occurrence: row.occurrence,
            detection: row.detection,
            rpn: compute_rpn(row.severity, row.occurrence, row.detection)?,
            review_status: ReviewStatus::Draft,
            sme_comment: None,
            source_question_ids: sources,
        })
    }

    /// The Summarizer condenses the round's accepted answers and emits the
    /// consolidated rows. Rows sharing mode, cause and effect are merged,
    /// keeping the highest severity. If the summary carries no usable block
    /// the answers' own rows are emitted unmerged.
    pub fn summarize_round<C: Completer + ?Sized>(&mut self, completer: &C) -> Result<RoundSummary, EngineError> {
        let round = self.round_no()?;
        let accepted: Vec<Answer> =
            self.answers.iter().filter(|a| a.round == round && a.status == AnswerStatus::Accepted).cloned().collect();
        if accepted.is_empty() {
            let summary = RoundSummary {
                round,
                summary: String::new(),
                row_ids: Vec::new(),
                merged_rows: 0,
                fallback: false,
                parse_error: None,
            };
            self.record(Event::RoundSummarized { summary: summary.clone() })?;
            return Ok(summary);
        }

        let summarizer = self.agent(&Role::Summarizer)?;
        let mut body = String::new();
        for a in &accepted {
            body.push_str(&format!(
                "{}{} ({}) to {}\n{}\n",
                prompt::ANSWER_PREFIX,
                a.id,
                a.persona_role,
                a.question_id,
                embed(&a.text)
            ));
        }
        let mut user = self.header();
        push_section(&mut user, prompt::SECTION_ANSWERS, &body);
        push_section(
            &mut user,
            prompt::SECTION_TASK,
            &format!(
                "Summarize the answers above into a concise, actionable overview that cites each answer id. {}",
                format_instructions()
            ),
        );
        let request = CompletionRequest {
            messages: alloc::vec![ChatMessage::system(summarizer.system_message.clone()), ChatMessage::user(user)],
            temperature: self.settings.temperatures[usize::from(round - 1)],
            max_tokens: self.settings.max_tokens,
            model_name: self.settings.model_name.clone(),
            request_seed: None,
        };
        let reply = self.send(completer, Purpose::Summary { round }, request)?;

        let per_answer: Vec<(String, Vec<BlockRow>)> =
            accepted.iter().map(|a| (a.question_id.clone(), self.answer_rows(a))).collect();
        let mut emitted: Vec<(BlockRow, Vec<String>)> = Vec::new();
        let mut merged_rows = 0;
        let (fallback, parse_error) = match parse_blocks(&reply) {
            Ok(rows) => {
                for row in rows {
                    let key = (normalize(&row.failure_mode), normalize(&row.cause), normalize(&row.effect));
                    let mut sources: Vec<String> = Vec::new();
                    for (qid, rows) in &per_answer {
                        let hit = rows.iter().any(|r| {
                            (normalize(&r.failure_mode), normalize(&r.cause), normalize(&r.effect)) == key
                        });
                        if hit && !sources.contains(qid) {
                            sources.push(qid.clone());
                        }
                    }
                    if let Some((existing, existing_sources)) = emitted.iter_mut().find(|(r, _)| {
                        (normalize(&r.failure_mode), normalize(&r.cause), normalize(&r.effect)) == key
                    }) {
                        existing.severity = existing.severity.max(row.severity);
                        for s in sources {
                            if !existing_sources.contains(&s) {
                                existing_sources.push(s);
                            }
                        }
                        merged_rows += 1;
                    } else {
                        emitted.push((row, sources));
                    }
                }
                (false, None)
            }
            Err(e) => {
                for (qid, rows) in &per_answer {
                    for row in rows {
                        emitted.push((row.clone(), alloc::vec![qid.clone()]));
                    }
                }
                (true, Some(e.to_string()))
            }
        };

        let rows: Vec<FmeaRow> = emitted
            .iter()
            .enumerate()
            .map(|(i, (row, sources))| self.to_fmea_row(i, row, sources.clone()))
            .collect::<Result<_, _>>()?;
        let row_ids: Vec<String> = rows.iter().map(|r| r.id.clone()).collect();
        for row in rows {
            self.record(Event::RowEmitted { row })?;
        }
        let summary = RoundSummary { round, summary: reply, row_ids, merged_rows, fallback, parse_error };
        self.record(Event::RoundSummarized { summary: summary.clone() })?;
        Ok(summary)
    }

    /// Closes the current round: quality gate, summary, report, and the move to
    /// the next phase. Gate and summary are skipped if an interrupted earlier
    /// attempt already completed them.
    pub fn advance_round<C: Completer + ?Sized>(
        &mut self,
        completer: &C,
        classifier: &dyn UsefulnessClassifier,
    ) -> Result<RoundReport, EngineError> {
        let round = self.round_no()?;
        let pending = self.pending_ids();
        if !pending.is_empty() {
            return Err(EngineError::PendingQuestions(pending));
        }

        if !self.gate_reports.iter().any(|g| g.round == round) {
            let new_questions: Vec<Question> =
                self.questions.iter().filter(|q| q.round_created == round).cloned().collect();
            let new_answers: Vec<Answer> = self.answers.iter().filter(|a| a.round == round).cloned().collect();
            let prior_questions: Vec<Question> = self
                .questions
                .iter()
                .filter(|q| q.round_created < round && !q.status.is_filtered())
                .cloned()
                .collect();
            let prior_answers: Vec<Answer> = self
                .answers
                .iter()
                .filter(|a| a.round < round && a.status == AnswerStatus::Accepted)
                .cloned()
                .collect();
            let input = GateInput {
                round,
                new_questions: &new_questions,
                new_answers: &new_answers,
                prior_questions: &prior_questions,
                prior_answers: &prior_answers,
            };
            let report = gate_round(&input, &self.settings.thresholds, classifier, &self.context);
            self.record(Event::GateCompleted { report })?;
        }

        if !self.summaries.iter().any(|s| s.round == round) {
            self.summarize_round(completer)?;
        }

        let gate = self.gate_reports.iter().find(|g| g.round == round).cloned().unwrap_or_default();
        let summary = self.summaries.iter().find(|s| s.round == round);
        let report = RoundReport {
            round,
            questions_processed: self.answers.iter().filter(|a| a.round == round).count(),
            answers_accepted: self
                .answers
                .iter()
                .filter(|a| a.round == round && a.status == AnswerStatus::Accepted)
                .count(),
            questions_filtered_useless: gate.useless_dropped.len(),
            items_filtered_duplicate: gate.duplicates_dropped.len(),
            followups_added: self
                .questions
                .iter()
                .filter(|q| q.origin == QuestionOrigin::FollowupMined && q.round_created == round)
                .count(),
            rows_emitted: summary.map_or(0, |s| s.row_ids.len()),
        };
        self.record(Event::RoundCompleted { report: report.clone() })?;

        if self.round == Round::Finalized {
            self.record(Event::SessionFinalized { rows: self.rows.len() })?;
        } else {
            let reopen: Vec<String> = self
                .questions
                .iter()
                .filter(|q| q.status == QuestionStatus::Answered)
                .map(|q| q.id.clone())
                .collect();
            if !reopen.is_empty() {
                self.record(Event::QuestionsReopened { question_ids: reopen })?;
            }
        }
        Ok(report)
    }

    /// Processes every eligible question of the current round, then advances.
    pub fn run_round<C: Completer + ?Sized>(
        &mut self,
        completer: &C,
        classifier: &dyn UsefulnessClassifier,
    ) -> Result<RoundReport, EngineError> {
        self.round_no()?;
        while self.process_next(completer)?.is_some() {}
        self.advance_round(completer, classifier)
    }

    /// Applies an SME review. Rejecting requires a comment and re-queues the
    /// eliciting question, annotated with the feedback, into the active round.
    /// Approving an approved row changes nothing.
    pub fn incorporate_feedback(&mut self, row_id: &str, action: ReviewAction) -> Result<ReviewOutcome, EngineError> {
        let current = self.row(row_id).cloned().ok_or_else(|| EngineError::NotFound(format!("row {row_id}")))?;
        if self.round == Round::Finalized && !matches!(action, ReviewAction::Approve) {
            return Err(EngineError::Finalized);
        }
        let mut row = current.clone();
        let mut requeued = None;
        let kind = match action {
            ReviewAction::Approve => {
                if current.review_status == ReviewStatus::Approved {
                    return Ok(ReviewOutcome { row: current, requeued_question_id: None, changed: false });
                }
                row.review_status = ReviewStatus::Approved;
                ReviewKind::Approve
            }
            ReviewAction::Reject { comment } => {
                let comment = comment.trim().to_string();
                if comment.is_empty() {
                    return Err(ValidationError::new("comment", "a comment is required to reject a row").into());
                }
                row.review_status = ReviewStatus::Rejected;
                row.sme_comment = Some(comment.clone());
                let original = current
                    .source_question_ids
                    .iter()
                    .find_map(|id| self.question(id))
                    .map(|q| q.text.clone())
                    .unwrap_or_else(|| {
                        format!(
                            "What is the most plausible cause and effect of {} on the {}?",
                            current.failure_mode, current.asset_class
                        )
                    });
                let rejected_row = BlockRow {
                    component: current.component.clone(),
                    failure_mode: current.failure_mode.clone(),
                    cause: current.cause.clone(),
                    effect: current.effect.clone(),
                    recommended_action: current.recommended_action.clone(),
                    severity: current.severity,
                    occurrence: current.occurrence,
                    detection: current.detection,
                }
                .to_line();
                let question = self.new_question(
                    format!("{original} [SME feedback on {row_id}: {comment}]"),
                    QuestionOrigin::SmeRequeue,
                    Some(SmeFeedback { row_id: row_id.into(), comment, rejected_row }),
                );
                requeued = Some(question.id.clone());
                self.record(Event::QuestionAdded { question })?;
                ReviewKind::Reject
            }
            ReviewAction::Edit { edits, comment } => {
                let text_fields = [
                    (&mut row.component, edits.component),
                    (&mut row.failure_mode, edits.failure_mode),
                    (&mut row.cause, edits.cause),
                    (&mut row.effect, edits.effect),
                    (&mut row.recommended_action, edits.recommended_action),
                ];
                for (slot, value) in text_fields {
                    if let Some(v) = value {
                        *slot = v;
                    }
                }
                row.severity = edits.severity.unwrap_or(row.severity);
                row.occurrence = edits.occurrence.unwrap_or(row.occurrence);
                row.detection = edits.detection.unwrap_or(row.detection);
                row.rpn = compute_rpn(row.severity, row.occurrence, row.detection)?;
                row.review_status = ReviewStatus::Edited;
                if let Some(c) = comment.filter(|c| !c.trim().is_empty()) {
                    row.sme_comment = Some(c);
                }
                ReviewKind::Edit
            }
        };
        let violations = validate_fmea_row(&row);
        if !violations.is_empty() {
            return Err(ValidationError::new("row", violations.join("; ")).into());
        }
        self.record(Event::RowReviewed { action: kind, row: row.clone(), requeued_question_id: requeued.clone() })?;
        Ok(ReviewOutcome { row, requeued_question_id: requeued, changed: true })
    }
}

fn normalize(s: &str) -> String {
    let mut out = String::new();
    for w in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&w.to_lowercase());
    }
    out
}
