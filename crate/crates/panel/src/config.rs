//! YAML session configuration.
//!
//! Relative paths resolve against the directory holding the config file (or,
//! for sessions created over REST, the server's config directory). An
//! annotated example lives in `fixtures/pump/session.yaml`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fmea_panel_core::domain::{Agent, AssetContext, Role, RoutingTemplate};
use fmea_panel_core::engine::EngineSettings;
use fmea_panel_core::error::GatewayError;
use fmea_panel_core::gate::GateThresholds;
use fmea_panel_core::llm::{Completer, MockProvider};
use fmea_panel_core::metrics::DEFAULT_MAX_N;
use fmea_panel_core::retrieval::{discover_context, DEFAULT_TOP_K};
use fmea_panel_core::routing::{RoutingWeights, TemplateSet};
use serde::{Deserialize, Serialize};

use crate::gateway::{HttpProvider, HttpSettings};
use crate::ingest::{ingest_repository, IngestReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.message)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

impl ConfigError {
    pub fn fields(&self) -> Vec<FieldError> {
        match self {
            ConfigError::Invalid(f) => f.clone(),
            ConfigError::Read { path, reason } => {
                vec![FieldError { field: "config".into(), message: format!("{}: {reason}", path.display()) }]
            }
            ConfigError::Parse(m) => vec![FieldError { field: "config".into(), message: m.clone() }],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonaConfig {
    pub role: String,
    #[serde(default)]
    pub skills: Vec<String>,
    pub system_message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsConfig {
    pub theta_q: Option<f64>,
    pub theta_a: Option<f64>,
    pub classifier_cutoff: Option<f64>,
    #[serde(default)]
    pub max_n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundsConfig {
    #[serde(default = "default_followups")]
    pub followups_per_answer: usize,
    #[serde(default = "default_cap")]
    pub followup_cap: usize,
    #[serde(default = "default_k")]
    pub fewshot_k: usize,
    #[serde(default)]
    pub temperatures: [f64; 4],
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_followups() -> usize {
    fmea_panel_core::engine::DEFAULT_FOLLOWUPS_PER_ANSWER
}

fn default_cap() -> usize {
    fmea_panel_core::engine::DEFAULT_FOLLOWUP_CAP
}

fn default_k() -> usize {
    fmea_panel_core::engine::DEFAULT_FEWSHOT_K
}

fn default_max_tokens() -> u32 {
    1024
}

fn default_top_k() -> usize {
    DEFAULT_TOP_K
}

impl Default for RoundsConfig {
    fn default() -> Self {
        Self {
            followups_per_answer: default_followups(),
            followup_cap: default_cap(),
            fewshot_k: default_k(),
            temperatures: [0.0; 4],
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderConfig {
    Mock,
    Http {
        #[serde(default)]
        base_url: Option<String>,
        model: String,
        #[serde(default)]
        timeout_secs: Option<u64>,
        #[serde(default)]
        backoff_base_ms: Option<u64>,
        #[serde(default)]
        jitter: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub asset_class: Option<String>,
    #[serde(default)]
    pub parameters: BTreeMap<String, String>,
    pub seed_question_bank: Option<PathBuf>,
    pub knowledge_repo: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub personas: Vec<PersonaConfig>,
    pub thresholds: Option<ThresholdsConfig>,
    #[serde(default)]
    pub rounds: RoundsConfig,
    #[serde(default)]
    pub routing: Option<RoutingWeights>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    pub rng_seed: Option<u64>,
    pub provider: Option<ProviderConfig>,
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplatesFile {
    templates: Vec<RoutingTemplate>,
}

/// Everything needed to start a session.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub context: AssetContext,
    pub agents: Vec<Agent>,
    pub templates: TemplateSet,
    pub settings: EngineSettings,
    pub seed_questions: Vec<String>,
    pub ingest: IngestReport,
    pub provider: ProviderConfig,
    pub data_dir: PathBuf,
}

pub fn parse_yaml(text: &str) -> Result<SessionConfig, ConfigError> {
    serde_yaml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Reads a config file; returns it with its raw bytes and base directory.
pub fn load_file(path: &Path) -> Result<(SessionConfig, Vec<u8>, PathBuf), ConfigError> {
    let bytes = fs::read(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), reason: e.to_string() })?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let config = parse_yaml(&text)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((config, bytes, base))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// One question per line; blank lines and `#` comments are skipped.
pub fn read_seed_bank(path: &Path) -> std::io::Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

struct Errors(Vec<FieldError>);

impl Errors {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(FieldError { field: field.into(), message: message.into() });
    }
}

fn unit_interval(errors: &mut Errors, field: &str, value: Option<f64>) -> f64 {
    match value {
        None => {
            errors.push(field, "is required");
            0.0
        }
        Some(v) if !(v > 0.0 && v <= 1.0) => {
            errors.push(field, format!("must be in (0, 1], got {v}"));
            v
        }
        Some(v) => v,
    }
}

impl SessionConfig {
    /// Validates every field, checks referenced paths, ingests the knowledge
    /// repository and builds the panel. All field errors are reported at once.
    pub fn prepare(&self, base: &Path) -> Result<Prepared, ConfigError> {
        let mut errors = Errors(Vec::new());

        let asset_class = match self.asset_class.as_deref().map(str::trim) {
            Some(a) if !a.is_empty() => a.to_string(),
            _ => {
                errors.push("asset_class", "is required");
                String::new()
            }
        };

        let mut existing = |field: &str, p: &Option<PathBuf>, want_dir: bool| -> Option<PathBuf> {
            let Some(p) = p else {
                errors.push(field, "is required");
                return None;
            };
            let full = resolve(base, p);
            let ok = if want_dir { full.is_dir() } else { full.is_file() };
            if !ok {
                errors.push(field, format!("{} does not exist", full.display()));
                return None;
            }
            Some(full)
        };
        let seed_path = existing("seed_question_bank", &self.seed_question_bank, false);
        let repo_path = existing("knowledge_repo", &self.knowledge_repo, true);
        let templates_path = existing("templates", &self.templates, false);

        let thresholds = match &self.thresholds {
            None => {
                errors.push("thresholds", "is required");
                GateThresholds::default()
            }
            Some(t) => {
                let theta_q = unit_interval(&mut errors, "thresholds.theta_q", t.theta_q);
                let theta_a = unit_interval(&mut errors, "thresholds.theta_a", t.theta_a);
                let max_n = t.max_n.unwrap_or(DEFAULT_MAX_N);
                if max_n == 0 {
                    errors.push("thresholds.max_n", "must be at least 1");
                }
                GateThresholds { theta_q, theta_a, max_n }
            }
        };
        let cutoff = self.thresholds.as_ref().map_or(0.0, |t| {
            unit_interval(&mut errors, "thresholds.classifier_cutoff", t.classifier_cutoff)
        });

        let r = &self.rounds;
        if r.temperatures.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            errors.push("rounds.temperatures", "must be finite and >= 0");
        }
        if r.max_tokens == 0 {
            errors.push("rounds.max_tokens", "must be positive");
        }
        if self.top_k == 0 {
            errors.push("top_k", "must be at least 1");
        }
        let routing = self.routing.unwrap_or_default();
        if [routing.skill, routing.context, routing.bonus].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            errors.push("routing", "weights must be finite and >= 0");
        }
        let rng_seed = self.rng_seed.unwrap_or_else(|| {
            errors.push("rng_seed", "is required");
            0
        });
        let provider = self.provider.clone().unwrap_or_else(|| {
            errors.push("provider", "is required");
            ProviderConfig::Mock
        });
        if let ProviderConfig::Http { model, .. } = &provider {
            if model.trim().is_empty() {
                errors.push("provider.model", "must not be empty");
            }
        }
        let data_dir = match &self.data_dir {
            Some(d) => resolve(base, d),
            None => {
                errors.push("data_dir", "is required");
                PathBuf::new()
            }
        };

        let mut agents = Vec::new();
        if self.personas.is_empty() {
            errors.push("personas", "at least one persona is required");
        }
        for (i, p) in self.personas.iter().enumerate() {
            let role: Role = match p.role.parse() {
                Ok(r) => r,
                Err(e) => {
                    let e: fmea_panel_core::error::ValidationError = e;
                    errors.push(format!("personas[{i}].role"), e.message);
                    continue;
                }
            };
            let agent = Agent {
                role,
                skills: p.skills.clone(),
                system_message: p.system_message.clone(),
                registration_index: i as u32,
            };
            if let Err(e) = agent.validate() {
                errors.push(format!("personas[{i}].{}", e.field), e.message);
            }
            if agents.iter().any(|a: &Agent| a.role == agent.role) {
                errors.push(format!("personas[{i}].role"), format!("{} is listed twice", agent.role));
            }
            agents.push(agent);
        }
        for required in [Role::Facilitator, Role::Summarizer] {
            if !self.personas.is_empty() && !agents.iter().any(|a| a.role == required) {
                errors.push("personas", format!("a {} persona is required", required.display_name()));
            }
        }
        if !self.personas.is_empty() && !agents.iter().any(|a| !a.role.is_orchestrator()) {
            errors.push("personas", "at least one answering persona is required");
        }

        let templates = templates_path.and_then(|p| {
            let parsed = fs::read_to_string(&p)
                .map_err(|e| e.to_string())
                .and_then(|t| serde_yaml::from_str::<TemplatesFile>(&t).map_err(|e| e.to_string()))
                .and_then(|f| TemplateSet::new(f.templates).map_err(|e| e.to_string()));
            parsed.map_err(|e| errors.push("templates", e)).ok()
        });

        let seed_questions = seed_path.and_then(|p| match read_seed_bank(&p) {
            Ok(q) if q.is_empty() => {
                errors.push("seed_question_bank", "contains no questions");
                None
            }
            Ok(q) => Some(q),
            Err(e) => {
                errors.push("seed_question_bank", e.to_string());
                None
            }
        });

        let ingested = repo_path.and_then(|p| ingest_repository(&p).map_err(|e| errors.push("knowledge_repo", e.to_string())).ok());

        if !errors.0.is_empty() {
            return Err(ConfigError::Invalid(errors.0));
        }
        let (index, ingest) = ingested.expect("checked above");
        let context = discover_context(&asset_class, &self.parameters, &index, self.top_k)
            .map_err(|e| ConfigError::Invalid(vec![FieldError { field: e.field, message: e.message }]))?;

        let mut settings = EngineSettings::new(rng_seed);
        settings.thresholds = thresholds;
        settings.classifier_cutoff = cutoff;
        settings.followups_per_answer = r.followups_per_answer;
        settings.followup_cap = r.followup_cap;
        settings.fewshot_k = r.fewshot_k;
        settings.routing = routing;
        settings.temperatures = r.temperatures;
        settings.max_tokens = r.max_tokens;
        settings.model_name = match &provider {
            ProviderConfig::Mock => "mock".into(),
            ProviderConfig::Http { model, .. } => model.clone(),
        };

        Ok(Prepared {
            context,
            agents,
            templates: templates.expect("checked above"),
            settings,
            seed_questions: seed_questions.expect("checked above"),
            ingest,
            provider,
            data_dir,
        })
    }
}

pub type SharedCompleter = Arc<dyn Completer + Send + Sync>;

pub fn build_provider(config: &ProviderConfig) -> Result<SharedCompleter, GatewayError> {
    Ok(match config {
        ProviderConfig::Mock => Arc::new(MockProvider),
        ProviderConfig::Http { base_url, timeout_secs, backoff_base_ms, jitter, .. } => {
            let mut settings = HttpSettings::from_env(base_url.as_deref())?;
            if let Some(t) = timeout_secs {
                settings.timeout = Duration::from_secs(*t);
            }
            if let Some(b) = backoff_base_ms {
                settings.backoff_base = Duration::from_millis(*b);
            }
            if let Some(j) = jitter {
                settings.jitter = *j;
            }
            Arc::new(HttpProvider::new(settings))
        }
    })
}
