//! Template-guided persona assignment.
//!
//! Every candidate persona gets a lexical score
//! `skill · J(question, skills) + context · J(question, snippet titles) + bonus · preference`
//! and the question goes to the highest scorer. Scores within a relative
//! `1e-9` of each other count as tied; ties go to the lowest registration
//! index.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Agent, AssetContext, Question, Role, RoutingTemplate};
use crate::error::EngineError;
use crate::metrics::{jaccard, token_set};
use crate::retrieval::snippet_title_tokens;

const TIE_TOLERANCE: f64 = 1e-9;

/// Validated template set: unique ids, sorted ascending, exactly one default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSet {
    templates: Vec<RoutingTemplate>,
}

impl TemplateSet {
    pub fn new(mut templates: Vec<RoutingTemplate>) -> Result<Self, EngineError> {
        let defaults = templates.iter().filter(|t| t.default).count();
        if defaults != 1 {
            return Err(EngineError::Config(format!(
                "routing templates need exactly one default, found {defaults}"
            )));
        }
        templates.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in templates.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(EngineError::Config(format!("duplicate template id {}", pair[0].id)));
            }
        }
        for t in &mut templates {
            if t.id.trim().is_empty() {
                return Err(EngineError::Config("template id must not be empty".into()));
            }
            t.match_patterns = t
                .match_patterns
                .iter()
                .map(|p| p.trim().to_lowercase())
                .filter(|p| !p.is_empty())
                .collect();
            if t.match_patterns.is_empty() && !t.default {
                return Err(EngineError::Config(format!(
                    "template {} has no match patterns and is not the default",
                    t.id
                )));
            }
            if let Some((role, w)) = t.role_preferences.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
                return Err(EngineError::Config(format!(
                    "template {}: preference for {role} must be finite and >= 0, got {w}",
                    t.id
                )));
            }
        }
        Ok(Self { templates })
    }

    pub fn templates(&self) -> &[RoutingTemplate] {
        &self.templates
    }

    pub fn default_template(&self) -> &RoutingTemplate {
        self.templates.iter().find(|t| t.default).expect("validated at construction")
    }

    pub fn get(&self, id: &str) -> Option<&RoutingTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }
}

/// First template by id whose pattern occurs in the lowercased question,
/// otherwise the default.
pub fn select_template<'a>(question: &Question, templates: &'a TemplateSet) -> &'a RoutingTemplate {
    let text = question.text.to_lowercase();
    templates
        .templates()
        .iter()
        .find(|t| t.match_patterns.iter().any(|p| text.contains(p.as_str())))
        .unwrap_or_else(|| templates.default_template())
}

/// Multipliers of the three score components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingWeights {
    pub skill: f64,
    pub context: f64,
    pub bonus: f64,
}

impl Default for RoutingWeights {
    fn default() -> Self {
        Self { skill: 1.0, context: 0.5, bonus: 1.0 }
    }
}

impl RoutingWeights {
    pub fn scaled(self, factor: f64) -> Self {
        Self { skill: self.skill * factor, context: self.context * factor, bonus: self.bonus * factor }
    }
}

fn skill_tokens(agent: &Agent) -> BTreeSet<String> {
    agent.skills.iter().flat_map(|s| token_set(s)).collect()
}

pub fn score_persona(question: &Question, agent: &Agent, context: &AssetContext, template: &RoutingTemplate) -> f64 {
    score_persona_weighted(question, agent, context, template, RoutingWeights::default())
}

pub fn score_persona_weighted(
    question: &Question,
    agent: &Agent,
    context: &AssetContext,
    template: &RoutingTemplate,
    weights: RoutingWeights,
) -> f64 {
    let q = token_set(&question.text);
    let skill = jaccard(&q, &skill_tokens(agent));
    let ctx = jaccard(&q, &snippet_title_tokens(context));
    weights.skill * skill + weights.context * ctx + weights.bonus * template.bonus_for(&agent.role)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub question_id: String,
    pub chosen_role: Role,
    pub scores: BTreeMap<Role, f64>,
    pub template_id: String,
    pub tie_break_applied: bool,
}

fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs())
}

/// Routes a question to one persona.
pub trait PersonaRouter {
    fn assign(
        &self,
        question: &Question,
        agents: &[Agent],
        context: &AssetContext,
        templates: &TemplateSet,
    ) -> Result<RoutingDecision, EngineError>;
}

/// The lexical router described in the module docs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LexicalRouter {
    pub weights: RoutingWeights,
}

impl PersonaRouter for LexicalRouter {
    fn assign(
        &self,
        question: &Question,
        agents: &[Agent],
        context: &AssetContext,
        templates: &TemplateSet,
    ) -> Result<RoutingDecision, EngineError> {
        let template = select_template(question, templates);
        let mut candidates: Vec<&Agent> = agents.iter().filter(|a| !a.role.is_orchestrator()).collect();
        if candidates.is_empty() {
            return Err(EngineError::Config("no answering personas configured".into()));
        }
        candidates.sort_by_key(|a| a.registration_index);

        let scored: Vec<(&Agent, f64)> = candidates
            .iter()
            .map(|a| (*a, score_persona_weighted(question, a, context, template, self.weights)))
            .collect();
        let max = scored.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let top: Vec<&Agent> = scored.iter().filter(|(_, s)| tied(*s, max)).map(|(a, _)| *a).collect();
        let chosen = top[0];

        Ok(RoutingDecision {
            question_id: question.id.clone(),
            chosen_role: chosen.role.clone(),
            scores: scored.iter().map(|(a, s)| (a.role.clone(), *s)).collect(),
            template_id: template.id.clone(),
            tie_break_applied: top.len() > 1,
        })
    }
}

pub fn assign(
    question: &Question,
    agents: &[Agent],
    context: &AssetContext,
    templates: &TemplateSet,
) -> Result<RoutingDecision, EngineError> {
    LexicalRouter::default().assign(question, agents, context, templates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{QuestionOrigin, QuestionStatus, Snippet};
    use alloc::string::ToString;
    use alloc::vec;

    fn question(text: &str) -> Question {
        Question {
            id: "q000001".into(),
            text: text.into(),
            origin: QuestionOrigin::SeedBank,
            round_created: 1,
            status: QuestionStatus::Pending,
            feedback: None,
        }
    }

    fn agent(role: Role, skills: &[&str], idx: u32) -> Agent {
        Agent {
            role,
            skills: skills.iter().map(|s| s.to_string()).collect(),
            system_message: "persona".into(),
            registration_index: idx,
        }
    }

    fn template(id: &str, patterns: &[&str], default: bool) -> RoutingTemplate {
        RoutingTemplate {
            id: id.into(),
            match_patterns: patterns.iter().map(|s| s.to_string()).collect(),
            role_preferences: BTreeMap::new(),
            guideline_text: String::new(),
            default,
        }
    }

    fn empty_context() -> AssetContext {
        AssetContext { asset_class: "Pump".into(), parameters: BTreeMap::new(), snippets: vec![], oos: true }
    }

    #[test]
    fn template_selection() {
        let set = TemplateSet::new(vec![
            template("t-default", &[], true),
            template("t-modes", &["failure mode"], false),
            template("t-alpha", &["seal"], false),
        ])
        .unwrap();
        assert_eq!(select_template(&question("What failure modes affect the bearing?"), &set).id, "t-modes");
        assert_eq!(select_template(&question("How often is it inspected?"), &set).id, "t-default");
        // both match: lower id wins
        assert_eq!(select_template(&question("What Failure Mode hits the seal?"), &set).id, "t-alpha");
    }

    #[test]
    fn template_set_validation() {
        assert!(TemplateSet::new(vec![template("a", &["x"], false)]).is_err());
        assert!(TemplateSet::new(vec![template("a", &[], true), template("b", &[], true)]).is_err());
        assert!(TemplateSet::new(vec![template("a", &[], true), template("b", &[], false)]).is_err());
        let mut neg = template("a", &[], true);
        neg.role_preferences.insert(Role::QualityEngineer, -1.0);
        assert!(TemplateSet::new(vec![neg]).is_err());
    }

    #[test]
    fn score_examples() {
        let t = template("d", &[], true);
        let q = question("pump seal wear");
        let exact = agent(Role::ReliabilityEngineer, &["pump", "seal", "wear"], 0);
        assert_eq!(score_persona(&q, &exact, &empty_context(), &t), 1.0);

        let none = agent(Role::Custom("Analyst".into()), &[], 1);
        assert_eq!(score_persona(&q, &none, &empty_context(), &t), 0.0);

        let mut bonus = template("b", &["failure"], false);
        bonus.role_preferences.insert(Role::ReliabilityEngineer, 0.3);
        let q6 = question("which failure mode hits this seal");
        assert_eq!(token_set(&q6.text).len(), 6);
        let re = agent(Role::ReliabilityEngineer, &["failure", "mode", "vibration", "lubrication"], 0);
        let s = score_persona(&q6, &re, &empty_context(), &bonus);
        assert!((s - (2.0 / 8.0 + 0.3)).abs() < 1e-12, "{s}");
        assert!((s - 0.55).abs() < 1e-12);
    }

    #[test]
    fn context_titles_contribute_half_weight() {
        let t = template("d", &[], true);
        let ctx = AssetContext {
            asset_class: "Pump".into(),
            parameters: BTreeMap::new(),
            snippets: vec![Snippet { source_path: "a.md".into(), title: "seal wear".into(), text: "..".into() }],
            oos: false,
        };
        let a = agent(Role::QualityEngineer, &["zzz"], 0);
        assert_eq!(score_persona(&question("seal wear"), &a, &ctx, &t), 0.5);
    }

    #[test]
    fn assign_examples() {
        let set = TemplateSet::new(vec![template("d", &[], true)]).unwrap();
        let ctx = empty_context();

        let only = vec![agent(Role::SmeValidator, &["zzz"], 4)];
        let d = assign(&question("anything"), &only, &ctx, &set).unwrap();
        assert_eq!(d.chosen_role, Role::SmeValidator);
        assert!(!d.tie_break_applied);

        let tie = vec![agent(Role::QualityEngineer, &["x"], 2), agent(Role::ReliabilityEngineer, &["y"], 1)];
        let d = assign(&question("seal"), &tie, &ctx, &set).unwrap();
        assert_eq!(d.chosen_role, Role::ReliabilityEngineer);
        assert!(d.tie_break_applied);

        let panel = vec![
            agent(Role::Facilitator, &[], 0),
            agent(Role::ReliabilityEngineer, &["failure", "mode", "vibration", "lubrication"], 1),
            agent(Role::QualityEngineer, &["inspection"], 2),
            agent(Role::SmeValidator, &["field"], 3),
            agent(Role::Summarizer, &[], 4),
        ];
        let mut t = template("b", &["failure"], false);
        t.role_preferences.insert(Role::ReliabilityEngineer, 0.3);
        t.role_preferences.insert(Role::QualityEngineer, 0.2);
        t.role_preferences.insert(Role::SmeValidator, 0.1);
        let set = TemplateSet::new(vec![template("a-default", &[], true), t]).unwrap();
        let d = assign(&question("which failure mode hits this seal"), &panel, &ctx, &set).unwrap();
        assert_eq!(d.chosen_role, Role::ReliabilityEngineer);
        assert_eq!(d.scores.len(), 3);
        assert!((d.scores[&Role::QualityEngineer] - 0.2).abs() < 1e-12);
        assert!((d.scores[&Role::SmeValidator] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn orchestrators_only_is_config_error() {
        let set = TemplateSet::new(vec![template("d", &[], true)]).unwrap();
        let agents = vec![agent(Role::Facilitator, &[], 0), agent(Role::Summarizer, &[], 1)];
        assert!(matches!(
            assign(&question("x"), &agents, &empty_context(), &set),
            Err(EngineError::Config(_))
        ));
    }
}
