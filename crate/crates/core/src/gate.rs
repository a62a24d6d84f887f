//! End-of-round quality gate: usefulness classification of new questions and
//! self-BLEU deduplication of new questions and answers.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{Answer, AnswerStatus, AssetContext, Question, QuestionOrigin};
use crate::metrics::{dedup_against, token_set, tokenize};
use crate::retrieval::snippet_title_tokens;

pub const DEFAULT_CLASSIFIER_CUTOFF: f64 = 0.5;

const INTERROGATIVES: &[&str] = &["what", "why", "how", "which", "when"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub useful: bool,
    pub score: f64,
    pub reasons: Vec<String>,
}

/// Plug-in point for the usefulness classifier.
pub trait UsefulnessClassifier {
    fn classify(&self, question: &Question, context: &AssetContext) -> Result<Classification, String>;
}

/// Default scorer: +0.4 for at least four tokens, +0.3 for an interrogative
/// cue, +0.3 for sharing a token with the asset class or snippet titles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeuristicClassifier {
    pub cutoff: f64,
}

impl Default for HeuristicClassifier {
    fn default() -> Self {
        Self { cutoff: DEFAULT_CLASSIFIER_CUTOFF }
    }
}

impl UsefulnessClassifier for HeuristicClassifier {
    fn classify(&self, question: &Question, context: &AssetContext) -> Result<Classification, String> {
        let tokens = tokenize(&question.text);
        // tenths, so the sums are exact
        let mut tenths = 0u8;
        let mut reasons = Vec::new();

        if tokens.len() >= 4 {
            tenths += 4;
        } else {
            reasons.push("fewer than 4 tokens".to_string());
        }
        let interrogative = question.text.trim_end().ends_with('?')
            || tokens.iter().any(|t| INTERROGATIVES.contains(&t.as_str()));
        if interrogative {
            tenths += 3;
        } else {
            reasons.push("no interrogative cue".to_string());
        }
        let mut anchors = token_set(&context.asset_class);
        anchors.extend(snippet_title_tokens(context));
        if tokens.iter().any(|t| anchors.contains(t)) {
            tenths += 3;
        } else {
            reasons.push("no overlap with asset class or context".to_string());
        }

        let score = f64::from(tenths) / 10.0;
        Ok(Classification { useful: score >= self.cutoff, score, reasons })
    }
}

pub fn classify_useful(question: &Question, context: &AssetContext) -> Classification {
    HeuristicClassifier::default()
        .classify(question, context)
        .expect("heuristic classifier is infallible")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UselessDrop {
    pub question_id: String,
    pub classifier_score: f64,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicateDrop {
    pub id: String,
    pub duplicate_of: String,
    pub self_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitiveDrop {
    pub answer_id: String,
    pub question_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KeptCounts {
    pub questions: usize,
    pub answers: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GateReport {
    pub round: u8,
    pub useless_dropped: Vec<UselessDrop>,
    pub duplicates_dropped: Vec<DuplicateDrop>,
    pub transitive_dropped: Vec<TransitiveDrop>,
    pub kept_counts: KeptCounts,
    /// Classifier failures; the affected questions were kept.
    pub warnings: Vec<String>,
}

impl GateReport {
    pub fn is_empty(&self) -> bool {
        self.useless_dropped.is_empty() && self.duplicates_dropped.is_empty() && self.transitive_dropped.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub theta_q: f64,
    pub theta_a: f64,
    pub max_n: usize,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self { theta_q: 0.8, theta_a: 0.8, max_n: 4 }
    }
}

/// Items the gate sees for one round.
pub struct GateInput<'a> {
    pub round: u8,
    pub new_questions: &'a [Question],
    pub new_answers: &'a [Answer],
    /// Kept questions from earlier rounds.
    pub prior_questions: &'a [Question],
    /// Kept answers from earlier rounds.
    pub prior_answers: &'a [Answer],
}

fn exempt_question(q: &Question) -> bool {
    q.origin == QuestionOrigin::SmeRequeue
}

/// Runs the gate stages in order: usefulness, question dedup, answer dedup.
/// Answers to dropped questions are dropped transitively. Items already
/// filtered are ignored, so a second run over the same round finds nothing.
/// Questions re-queued by an SME, and their answers, bypass the filters.
pub fn gate_round(
    input: &GateInput<'_>,
    thresholds: &GateThresholds,
    classifier: &dyn UsefulnessClassifier,
    context: &AssetContext,
) -> GateReport {
    let mut report = GateReport { round: input.round, ..GateReport::default() };
    let mut dropped_questions: BTreeSet<&str> = BTreeSet::new();

    let live_questions: Vec<&Question> = input.new_questions.iter().filter(|q| !q.status.is_filtered()).collect();
    let mut dedup_candidates: Vec<(String, String)> = Vec::new();
    let mut kept_questions = 0;
    for q in &live_questions {
        if exempt_question(q) {
            kept_questions += 1;
            continue;
        }
        match classifier.classify(q, context) {
            Ok(c) if !c.useful => {
                dropped_questions.insert(&q.id);
                report.useless_dropped.push(UselessDrop {
                    question_id: q.id.clone(),
                    classifier_score: c.score,
                    reasons: c.reasons,
                });
                continue;
            }
            Ok(_) => {}
            Err(e) => report.warnings.push(alloc::format!("classifier failed on {}: {e}; kept", q.id)),
        }
        dedup_candidates.push((q.id.clone(), q.text.clone()));
    }

    let prior_q: Vec<(String, String)> =
        input.prior_questions.iter().map(|q| (q.id.clone(), q.text.clone())).collect();
    let q_outcome = dedup_against(&prior_q, &dedup_candidates, thresholds.theta_q, thresholds.max_n);
    kept_questions += q_outcome.kept.len();
    for d in q_outcome.dropped {
        if let Some(q) = live_questions.iter().find(|q| q.id == d.id) {
            dropped_questions.insert(&q.id);
        }
        report.duplicates_dropped.push(DuplicateDrop { id: d.id, duplicate_of: d.duplicate_of, self_bleu: d.self_bleu });
    }

    let exempt_ids: BTreeSet<&str> =
        input.new_questions.iter().filter(|q| exempt_question(q)).map(|q| q.id.as_str()).collect();
    let live_answers: Vec<&Answer> = input
        .new_answers
        .iter()
        .filter(|a| matches!(a.status, AnswerStatus::Accepted | AnswerStatus::NeedsReview))
        .collect();
    let mut answer_candidates: Vec<(String, String)> = Vec::new();
    let mut kept_answers = 0;
    for a in &live_answers {
        if dropped_questions.contains(a.question_id.as_str()) {
            report.transitive_dropped.push(TransitiveDrop { answer_id: a.id.clone(), question_id: a.question_id.clone() });
        } else if a.status == AnswerStatus::NeedsReview || exempt_ids.contains(a.question_id.as_str()) {
            kept_answers += 1;
        } else {
            answer_candidates.push((a.id.clone(), a.text.clone()));
        }
    }
    let prior_a: Vec<(String, String)> = input
        .prior_answers
        .iter()
        .filter(|a| a.status == AnswerStatus::Accepted)
        .map(|a| (a.id.clone(), a.text.clone()))
        .collect();
    let a_outcome = dedup_against(&prior_a, &answer_candidates, thresholds.theta_a, thresholds.max_n);
    kept_answers += a_outcome.kept.len();
    report.duplicates_dropped.extend(
        a_outcome
            .dropped
            .into_iter()
            .map(|d| DuplicateDrop { id: d.id, duplicate_of: d.duplicate_of, self_bleu: d.self_bleu }),
    );

    report.kept_counts = KeptCounts { questions: kept_questions, answers: kept_answers };
    report
}
