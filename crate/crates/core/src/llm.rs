//! Chat-completion contract and the deterministic mock provider.
//!
//! The engine talks to any backend through [`Completer`]. The mock renders
//! persona-shaped replies from a fixed failure catalog so that whole sessions
//! can run offline and replay byte-for-byte.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::domain::Role;
use crate::error::{GatewayError, ValidationError};
use crate::fmea_block::{parse_blocks, render_block, BlockRow, COMPONENT_KEYWORDS};
use crate::prompt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
    #[serde(default)]
    pub request_seed: Option<u64>,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), ValidationError> {
        match self.messages.first() {
            None => return Err(ValidationError::new("messages", "must not be empty")),
            Some(m) if m.role != ChatRole::System => {
                return Err(ValidationError::new("messages", "first message must be the system message"))
            }
            _ => {}
        }
        for (i, m) in self.messages.iter().enumerate() {
            if m.role != ChatRole::Assistant && m.content.trim().is_empty() {
                return Err(ValidationError::new(format!("messages[{i}].content"), "must not be empty"));
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ValidationError::new("temperature", "must be finite and >= 0"));
        }
        if self.max_tokens == 0 {
            return Err(ValidationError::new("max_tokens", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub provider: ProviderKind,
    pub latency_ms: u64,
    pub raw_finish_reason: String,
}

/// A chat-completion backend.
pub trait Completer {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

impl<T: Completer + ?Sized> Completer for &T {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: Completer + ?Sized> Completer for Box<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        (**self).complete(request)
    }
}

/// Offline provider: the reply is a pure function of the messages and seed.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockProvider;

impl Completer for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate().map_err(|e| GatewayError::RequestRejected { status: 400, body: e.to_string() })?;
        Ok(CompletionResult {
            text: mock_render(&request.messages, request.request_seed.unwrap_or(0)),
            provider: ProviderKind::Mock,
            latency_ms: 0,
            raw_finish_reason: "stop".into(),
        })
    }
}

struct CatalogEntry {
    component: &'static str,
    mode: &'static str,
    cause: &'static str,
    alt_cause: &'static str,
    effect: &'static str,
    action: &'static str,
    ratings: (u8, u8, u8),
}

const fn entry(
    component: &'static str,
    mode: &'static str,
    cause: &'static str,
    alt_cause: &'static str,
    effect: &'static str,
    action: &'static str,
    ratings: (u8, u8, u8),
) -> CatalogEntry {
    CatalogEntry { component, mode, cause, alt_cause, effect, action, ratings }
}

const PUMP: &[CatalogEntry] = &[
    entry("Mechanical seal", "Seal leakage", "Worn seal faces from dry running", "Thermal shock of the seal faces during hot restarts", "Process fluid loss and reduced discharge pressure", "Fit dry-run protection and a seal flush plan", (7, 5, 4)),
    entry("Bearings", "Bearing wear", "Lubricant starvation", "Contaminated grease from a failed bearing isolator", "Rising vibration and motor overload", "Add vibration monitoring and a regreasing schedule", (6, 5, 3)),
    entry("Impeller", "Cavitation damage", "Insufficient NPSH available at low suction level", "Operating far right of the best efficiency point", "Loss of head and flow with impeller erosion", "Raise suction level alarms and verify NPSH margin", (7, 4, 5)),
    entry("Shaft coupling", "Coupling misalignment", "Soft foot left after installation", "Pipe strain transferred to the pump casing", "Premature bearing and seal failure", "Laser-align after every intervention", (5, 4, 4)),
    entry("Motor", "Motor winding insulation failure", "Sustained overload and overheating", "Moisture ingress during idle periods", "Pump trip and unplanned downtime", "Trend winding temperature and insulation resistance", (8, 3, 4)),
    entry("Casing", "Wear ring clearance growth", "Abrasive solids in the pumped fluid", "Shaft deflection at low flow", "Internal recirculation and lower efficiency", "Measure clearances at each overhaul", (4, 5, 6)),
];

const BOILER: &[CatalogEntry] = &[
    entry("Tubes", "Tube rupture", "Overheating under scale deposits", "Oxygen pitting from poor deaeration", "Forced outage and steam loss", "Tighten water chemistry control and inspect tubes", (9, 3, 5)),
    entry("Burner", "Flame failure", "Fouled igniter", "Unstable fuel pressure", "Boiler trip and loss of steam supply", "Clean igniters and test flame scanners", (6, 4, 3)),
    entry("Safety valve", "Safety valve fails to lift", "Corrosion seizing the valve disc", "Incorrect set pressure after maintenance", "Overpressure hazard", "Lift-test valves on a fixed interval", (10, 2, 6)),
    entry("Refractory", "Refractory cracking", "Thermal cycling on frequent starts", "Poor dry-out after repair", "Casing hot spots and heat loss", "Limit ramp rates and survey casing temperature", (5, 4, 4)),
    entry("Feedwater system", "Low water level", "Feedwater pump trip", "Level transmitter drift", "Tube overheating and possible damage", "Test low-level cutouts and calibrate transmitters", (9, 3, 3)),
];

const CHILLER: &[CatalogEntry] = &[
    entry("Compressor", "Compressor bearing failure", "Oil dilution by refrigerant", "Extended short cycling", "Loss of cooling capacity", "Monitor oil temperature and pressure differential", (8, 3, 5)),
    entry("Condenser", "Condenser tube fouling", "Poor cooling water treatment", "Debris carried from the cooling tower", "High head pressure and efficiency loss", "Track approach temperature and brush tubes", (5, 6, 4)),
    entry("Refrigerant circuit", "Refrigerant leak", "Vibration-induced joint fatigue", "Corroded brazed joints", "Low suction pressure and capacity loss", "Run leak detection and check charge", (6, 4, 5)),
    entry("Evaporator", "Evaporator tube freeze", "Low chilled water flow", "Failed flow switch", "Tube rupture and water in the refrigerant circuit", "Interlock flow switches and test low-temperature cutouts", (9, 2, 4)),
    entry("Valves", "Expansion valve hunting", "Sensing bulb poorly attached", "Oversized valve for the load", "Unstable superheat and liquid floodback", "Secure bulbs and verify valve sizing", (5, 4, 5)),
];

const GENERIC: &[CatalogEntry] = &[
    entry("Housing", "Housing crack", "Fatigue under cyclic load", "Impact damage during handling", "Loss of containment", "Inspect welds and mounting points", (7, 3, 5)),
    entry("Fasteners", "Fastener loosening", "Vibration without locking features", "Incorrect torque at assembly", "Misalignment and secondary damage", "Torque-check fasteners and add locking", (5, 4, 4)),
    entry("Instrumentation", "Sensor drift", "Aging of the sensing element", "Electrical noise on signal cables", "Control errors and missed alarms", "Calibrate sensors on a fixed schedule", (5, 5, 6)),
    entry("Lubrication system", "Lubricant degradation", "Overheating of the oil", "Water contamination", "Accelerated wear of moving parts", "Sample oil and trend its condition", (6, 4, 4)),
];

fn catalog_for(asset: &str) -> &'static [CatalogEntry] {
    let lower = asset.to_lowercase();
    if lower.contains("pump") {
        PUMP
    } else if lower.contains("boiler") {
        BOILER
    } else if lower.contains("chiller") || lower.contains("compressor") || lower.contains("hvac") {
        CHILLER
    } else {
        GENERIC
    }
}

fn fnv1a(bytes: &[u8], mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn messages_hash(messages: &[ChatMessage]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325;
    for m in messages {
        let tag: &[u8] = match m.role {
            ChatRole::System => b"s",
            ChatRole::User => b"u",
            ChatRole::Assistant => b"a",
        };
        h = fnv1a(tag, h);
        h = fnv1a(m.content.as_bytes(), h);
        h = fnv1a(&[0], h);
    }
    h
}

fn pick(rng: &mut ChaCha8Rng, len: usize) -> usize {
    (rng.next_u64() % len as u64) as usize
}

/// Persona named earliest in the system message.
fn detect_role(system: &str) -> Option<Role> {
    [
        Role::ReliabilityEngineer,
        Role::QualityEngineer,
        Role::SmeValidator,
        Role::Summarizer,
        Role::Facilitator,
    ]
    .into_iter()
    .filter_map(|r| system.find(r.display_name()).map(|pos| (pos, r)))
    .min_by_key(|(pos, _)| *pos)
    .map(|(_, r)| r)
}

fn round_phrase(round: Option<&str>) -> &'static str {
    match round {
        Some("R1_zero_shot") => "Baseline assessment without reference material",
        Some("R2_in_context") => "Drawing on the retrieved maintenance records",
        Some("R3_chain_of_interaction") => "Building on the panel's earlier answers",
        Some("R4_few_shot") => "Following the pattern of the worked examples",
        _ => "Assessment",
    }
}

fn to_row(e: &CatalogEntry, revised: bool) -> BlockRow {
    BlockRow {
        component: e.component.into(),
        failure_mode: e.mode.into(),
        cause: if revised { e.alt_cause.into() } else { e.cause.into() },
        effect: e.effect.into(),
        recommended_action: e.action.into(),
        severity: e.ratings.0,
        occurrence: e.ratings.1,
        detection: e.ratings.2,
    }
}

fn lower_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_lowercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Catalog entries ranked by how many of their words appear in `text`;
/// returns the best-overlapping indices, or every index when nothing overlaps.
fn relevant_entries(catalog: &[CatalogEntry], text: &str) -> Vec<usize> {
    let lower = text.to_lowercase();
    let overlap = |e: &CatalogEntry| {
        let words = format!("{} {}", e.component, e.mode).to_lowercase();
        words
            .split_whitespace()
            .filter(|w| w.len() > 3 && lower.contains(*w))
            .count()
    };
    let best = catalog.iter().map(overlap).max().unwrap_or(0);
    if best == 0 {
        (0..catalog.len()).collect()
    } else {
        (0..catalog.len()).filter(|&i| overlap(&catalog[i]) == best).collect()
    }
}

/// Renders a mock reply. The persona is taken from the system message, the
/// round and asset from the structured prompt header, and every choice comes
/// from a generator seeded by `seed` and the message contents.
pub fn mock_render(messages: &[ChatMessage], seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ messages_hash(messages));
    let system = messages.iter().find(|m| m.role == ChatRole::System).map_or("", |m| m.content.as_str());
    let user = messages.iter().rev().find(|m| m.role == ChatRole::User).map_or("", |m| m.content.as_str());
    let first_user = messages.iter().find(|m| m.role == ChatRole::User).map_or("", |m| m.content.as_str());
    let header = prompt::parse_header(first_user);
    let asset = header.asset.as_deref().unwrap_or("asset");
    let phrase = round_phrase(header.round.as_deref());
    let catalog = catalog_for(asset);

    match detect_role(system) {
        Some(Role::Facilitator) if prompt::section(user, prompt::SECTION_TASK).is_some() => {
            render_followups(&mut rng, asset, user)
        }
        Some(Role::Summarizer) => render_summary(asset, header.round.as_deref(), user),
        role => render_answer(&mut rng, role, asset, phrase, catalog, first_user),
    }
}

fn render_answer(
    rng: &mut ChaCha8Rng,
    role: Option<Role>,
    asset: &str,
    phrase: &str,
    catalog: &[CatalogEntry],
    user: &str,
) -> String {
    let question = prompt::section(user, prompt::SECTION_QUESTION).unwrap_or(user);
    let feedback = prompt::section(user, prompt::SECTION_FEEDBACK);

    // A rejected row comes back with the same failure mode and a revised cause.
    let revised = feedback.and_then(|f| catalog.iter().position(|e| f.contains(e.mode)));
    let candidates = relevant_entries(catalog, question);
    let primary = revised.unwrap_or_else(|| candidates[pick(rng, candidates.len())]);
    let secondary = {
        let others: Vec<usize> = (0..catalog.len()).filter(|&i| i != primary).collect();
        others[pick(rng, others.len())]
    };
    let p = &catalog[primary];
    let s = &catalog[secondary];
    let cause = if revised.is_some() { p.alt_cause } else { p.cause };
    let opener = ["In short", "On balance", "From the evidence at hand"][pick(rng, 3)];

    let mut rows = alloc::vec![to_row(p, revised.is_some())];
    let prose = match role {
        Some(Role::ReliabilityEngineer) => {
            rows.push(to_row(s, false));
            format!(
                "{phrase}. {opener}, as Reliability Engineer for the {asset}, the dominant mechanism is {} at the {}: {} leads to {}.\n\
                 Failure mode for the {asset}: {} ({}).\n\
                 A secondary mechanism worth tracking is {}, driven by {}.",
                lower_first(p.mode), lower_first(p.component), lower_first(cause), lower_first(p.effect),
                p.mode, lower_first(p.component), lower_first(s.mode), lower_first(s.cause)
            )
        }
        Some(Role::QualityEngineer) => format!(
            "{phrase}. {opener}, the quality review for the {asset} finds the {} entry consistent with {}. \
             Detection is rated {} given current inspection coverage. Recommended control: {}.",
            lower_first(p.mode), lower_first(cause), p.ratings.2, lower_first(p.action)
        ),
        Some(Role::SmeValidator) => format!(
            "{phrase}. {opener}, field validation for the {asset} confirms {} at the {} as a credible failure mode; \
             in service it shows up as {}. Operators should {}.",
            lower_first(p.mode), lower_first(p.component), lower_first(p.effect), lower_first(p.action)
        ),
        _ => format!(
            "{phrase}. {opener}, regarding the {asset}: {} ({}) leading to {}.",
            lower_first(p.mode), lower_first(cause), lower_first(p.effect)
        ),
    };
    let note = if revised.is_some() { "\nRevised after SME review." } else { "" };
    format!("{prose}{note}\n\n{}", render_block(&rows))
}

fn render_followups(rng: &mut ChaCha8Rng, asset: &str, user: &str) -> String {
    let answer = prompt::section(user, prompt::SECTION_ANSWER).unwrap_or("").to_lowercase();
    let mut subjects: Vec<&str> = Vec::new();
    for (kw, _) in COMPONENT_KEYWORDS {
        if answer.contains(kw) && !subjects.iter().any(|s| s.contains(kw) || kw.contains(s)) {
            subjects.push(kw);
        }
    }
    if subjects.is_empty() {
        subjects.push("critical component");
    }
    let templates = [
        "What early symptoms indicate {s} degradation on the {a}?",
        "Which maintenance tasks most reduce the likelihood of {s} failure on the {a}?",
        "How should {s} condition be monitored on the {a} between overhauls?",
    ];
    let offset = pick(rng, templates.len());
    let mut out = String::from("Proposed follow-up questions:\n");
    for (i, subject) in subjects.iter().take(3).enumerate() {
        let t = templates[(offset + i) % templates.len()];
        out.push_str("FOLLOWUP: ");
        out.push_str(&t.replace("{s}", subject).replace("{a}", asset));
        out.push('\n');
    }
    out
}

fn render_summary(asset: &str, round: Option<&str>, user: &str) -> String {
    let answers = prompt::answer_sections(user);
    let mut out = format!(
        "Round summary for the {asset} ({}): {} answers reviewed.\n",
        round.unwrap_or("round"),
        answers.len()
    );
    let mut rows: Vec<BlockRow> = Vec::new();
    for (label, body) in &answers {
        let parsed = parse_blocks(body).unwrap_or_default();
        let modes: Vec<String> = parsed.iter().map(|r| lower_first(&r.failure_mode)).collect();
        let gist = if modes.is_empty() { "no tabulated failure modes".to_string() } else { modes.join(", ") };
        out.push_str(&format!("- {label}: {gist}\n"));
        for row in parsed {
            if !rows.iter().any(|r| r.to_line() == row.to_line()) {
                rows.push(row);
            }
        }
    }
    if rows.is_empty() {
        out.push_str("No consolidated rows.\n");
        return out;
    }
    out.push_str("\nConsolidated rows:\n\n");
    out.push_str(&render_block(&rows));
    out
}
