//! Acceptance suite. Runs every criterion with the mock provider, prints one
//! PASS or FAIL line each and exits non-zero if any failed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;
#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use fmea_panel::banks::{BankFile, BankKind};
use fmea_panel::store::SessionStore;
use fmea_panel_core::domain::{Agent, AssetContext, Question, QuestionOrigin, QuestionStatus, Role, RoutingTemplate, Snippet};
use fmea_panel_core::metrics::{bleu, dedup, self_bleu_scores, tokenize, BleuWeights};
use fmea_panel_core::routing::{LexicalRouter, PersonaRouter, RoutingWeights, TemplateSet};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

const BLEU_TOLERANCE: f64 = 1e-9;
const BLEU_IDENTITY_CASES: usize = 1_000;
const BLEU_CORPORA: usize = 200;
const BLEU_MAX_SENTENCES: usize = 20;
const BLEU_MAX_VOCAB: usize = 10;
const BLEU_MAX_LEN: usize = 8;
const BLEU_BUDGET: Duration = Duration::from_secs(10);

const DEDUP_CORPORA: usize = 100;
const DEDUP_ITEMS: usize = 100;
const DEDUP_GROUPS: usize = 5;
const DEDUP_THETA: f64 = 0.8;
const DEDUP_BUDGET: Duration = Duration::from_secs(30);

const ROUTING_TRIPLES: usize = 1_000;

const FIXTURE_QUESTIONS: usize = 12;
const FIXTURE_SEED: u64 = 42;
const FEWSHOT_K: usize = 3;
const FOLLOWUP_CAP: usize = 20;

const CSV_HEADER: &str =
    "asset_class,component,failure_mode,cause,effect,recommended_action,severity,occurrence,detection,rpn,review_status";

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn words(rng: &mut StdRng, vocab: usize, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
}

fn bleu_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(1);
    for _ in 0..BLEU_IDENTITY_CASES {
        let len = rng.random_range(1..=20);
        let x = words(&mut rng, 50, len);
        let max_n = rng.random_range(1..=4);
        let v = bleu(&x, std::slice::from_ref(&x), max_n, &BleuWeights::Uniform).map_err(|e| e.to_string())?.value;
        ensure!(v == 1.0, "bleu(x,[x]) = {v} for {x:?}");
    }

    let cand = tokenize("the pump seal leaks");
    let reference = tokenize("the pump seal leaks badly");
    let worked = bleu(&cand, &[reference], 4, &BleuWeights::Uniform).map_err(|e| e.to_string())?.value;
    let expected = (-0.25f64).exp();
    ensure!((worked - expected).abs() <= BLEU_TOLERANCE, "worked case {worked} vs {expected}");

    let mut comparisons = 0usize;
    for _ in 0..BLEU_CORPORA {
        let vocab = rng.random_range(1..=BLEU_MAX_VOCAB);
        let n_sent = rng.random_range(2..=BLEU_MAX_SENTENCES);
        let corpus: Vec<Vec<String>> = (0..n_sent)
            .map(|_| {
                let len = rng.random_range(1..=BLEU_MAX_LEN);
                words(&mut rng, vocab, len)
            })
            .collect();
        for max_n in 1..=4 {
            let ours = self_bleu_scores(&corpus, max_n);
            let theirs = oracle::self_bleu(&corpus, max_n);
            for (i, (a, b)) in ours.iter().zip(&theirs).enumerate() {
                ensure!((a - b).abs() <= BLEU_TOLERANCE, "self-BLEU item {i} n={max_n}: {a} vs oracle {b} in {corpus:?}");
                comparisons += 1;
            }
            for i in 0..corpus.len() {
                let j = (i + 1) % corpus.len();
                let a = bleu(&corpus[i], &[corpus[j].clone()], max_n, &BleuWeights::Uniform).map_err(|e| e.to_string())?.value;
                let b = oracle::bleu(&corpus[i], &[corpus[j].clone()], max_n);
                ensure!((a - b).abs() <= BLEU_TOLERANCE, "pair ({i},{j}) n={max_n}: {a} vs oracle {b}");
                comparisons += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < BLEU_BUDGET, "took {elapsed:?}, budget {BLEU_BUDGET:?}");
    Ok(format!(
        "{BLEU_IDENTITY_CASES} identity cases, worked case {worked:.12}, {comparisons} oracle comparisons over {BLEU_CORPORA} corpora, {elapsed:.2?}"
    ))
}

fn dedup_properties() -> Outcome {
    let start = Instant::now();
    let mut in_library = Duration::ZERO;
    let mut rng = StdRng::seed_from_u64(2);
    let mut planted_total = 0;
    for corpus_no in 0..DEDUP_CORPORA {
        // Background sentences draw from a large vocabulary so they almost
        // never share 4-grams; planted members are exact copies or the base
        // with one extra trailing token.
        let n_planted: Vec<usize> = (0..DEDUP_GROUPS).map(|_| rng.random_range(2..=4)).collect();
        let background = DEDUP_ITEMS - n_planted.iter().sum::<usize>();
        let mut texts: Vec<(Option<usize>, String)> = Vec::with_capacity(DEDUP_ITEMS);
        for _ in 0..background {
            let len = rng.random_range(8..=16);
            texts.push((None, words(&mut rng, 5_000, len).join(" ")));
        }
        for (g, &n) in n_planted.iter().enumerate() {
            let len = rng.random_range(12..=16);
            let base = words(&mut rng, 5_000, len).join(" ");
            for m in 0..n {
                let text = if m > 0 && rng.random_bool(0.5) { format!("{base} extra{m}") } else { base.clone() };
                texts.push((Some(g), text));
            }
        }
        texts.shuffle(&mut rng);
        planted_total += n_planted.iter().sum::<usize>();

        let items: Vec<(String, String)> = texts.iter().enumerate().map(|(i, (_, t))| (format!("i{i:03}"), t.clone())).collect();
        let t = Instant::now();
        let out = dedup(&items, DEDUP_THETA, 4);
        in_library += t.elapsed();

        let kept: BTreeSet<&str> = out.kept.iter().map(String::as_str).collect();
        for g in 0..DEDUP_GROUPS {
            let survivors = items.iter().zip(&texts).filter(|((id, _), (grp, _))| *grp == Some(g) && kept.contains(id.as_str())).count();
            ensure!(survivors == 1, "corpus {corpus_no}: group {g} has {survivors} survivors");
        }
        let lost_background = items.iter().zip(&texts).filter(|((id, _), (grp, _))| grp.is_none() && !kept.contains(id.as_str())).count();
        ensure!(lost_background == 0, "corpus {corpus_no}: {lost_background} background items dropped");

        let token_lists: Vec<Vec<String>> = items.iter().map(|(_, t)| tokenize(t)).collect();
        let oracle_kept: Vec<String> = oracle::dedup(&token_lists, DEDUP_THETA, 4).into_iter().map(|i| items[i].0.clone()).collect();
        ensure!(oracle_kept == out.kept, "corpus {corpus_no}: kept set differs from oracle");

        let survivors: Vec<(String, String)> = items.iter().filter(|(id, _)| kept.contains(id.as_str())).cloned().collect();
        let t = Instant::now();
        let again = dedup(&survivors, DEDUP_THETA, 4);
        in_library += t.elapsed();
        ensure!(again.kept == out.kept && again.dropped.is_empty(), "corpus {corpus_no}: not idempotent");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < DEDUP_BUDGET, "took {elapsed:?} ({in_library:?} in dedup), budget {DEDUP_BUDGET:?}");
    Ok(format!(
        "{DEDUP_CORPORA} corpora of {DEDUP_ITEMS} items, {planted_total} planted items in {DEDUP_GROUPS} groups each, theta {DEDUP_THETA}, {elapsed:.2?} ({in_library:.2?} in dedup)"
    ))
}

fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

fn routing_invariants() -> Outcome {
    let mut rng = StdRng::seed_from_u64(3);
    let vocab = ["seal", "leak", "bearing", "wear", "vibration", "detect", "field", "motor"];
    let pick = |rng: &mut StdRng, lo: usize, hi: usize| -> Vec<String> {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| vocab[rng.random_range(0..vocab.len())].to_string()).collect()
    };
    let mut ties = 0;
    for case in 0..ROUTING_TRIPLES {
        let question = Question {
            id: "q000001".into(),
            text: pick(&mut rng, 1, 5).join(" "),
            origin: QuestionOrigin::SeedBank,
            round_created: 1,
            status: QuestionStatus::Pending,
            feedback: None,
        };
        let mut roles = vec![
            Role::ReliabilityEngineer,
            Role::QualityEngineer,
            Role::SmeValidator,
            Role::Custom("Operator".into()),
            Role::Custom("Planner".into()),
        ];
        roles.shuffle(&mut rng);
        roles.truncate(rng.random_range(1..=roles.len()));
        let mut indices: Vec<u32> = (0..20).collect();
        indices.shuffle(&mut rng);
        let mut agents: Vec<Agent> = roles
            .iter()
            .zip(&indices)
            .map(|(role, &idx)| Agent {
                role: role.clone(),
                // Few skills from a small vocabulary, so equal scores are common.
                skills: pick(&mut rng, 0, 2),
                system_message: "answer".into(),
                registration_index: idx,
            })
            .collect();
        agents.push(Agent { role: Role::Facilitator, skills: vec![], system_message: "f".into(), registration_index: indices[18] });
        agents.push(Agent { role: Role::Summarizer, skills: vec![], system_message: "s".into(), registration_index: indices[19] });
        agents.shuffle(&mut rng);

        let mut prefs: BTreeMap<Role, f64> = BTreeMap::new();
        for r in &roles {
            if rng.random_bool(0.4) {
                prefs.insert(r.clone(), [0.5, 1.0][rng.random_range(0..2)]);
            }
        }
        let template = RoutingTemplate {
            id: "t".into(),
            match_patterns: vec![],
            role_preferences: prefs.clone(),
            guideline_text: String::new(),
            default: true,
        };
        let templates = TemplateSet::new(vec![template]).map_err(|e| e.to_string())?;
        let context = AssetContext {
            asset_class: "Pump".into(),
            parameters: BTreeMap::new(),
            snippets: vec![Snippet { source_path: "a.md".into(), title: pick(&mut rng, 1, 3).join(" "), text: String::new() }],
            oos: false,
        };

        let router = LexicalRouter { weights: RoutingWeights::default() };
        let a = router.assign(&question, &agents, &context, &templates).map_err(|e| e.to_string())?;
        let b = router.assign(&question, &agents, &context, &templates).map_err(|e| e.to_string())?;
        ensure!(a == b, "case {case}: not deterministic");
        let mut reordered = agents.clone();
        reordered.reverse();
        let r = router.assign(&question, &reordered, &context, &templates).map_err(|e| e.to_string())?;
        ensure!(r.chosen_role == a.chosen_role, "case {case}: depends on slice order");
        for factor in [1e-3, 0.37, 2.0, 1e3] {
            let scaled = LexicalRouter { weights: RoutingWeights::default().scaled(factor) };
            let c = scaled.assign(&question, &agents, &context, &templates).map_err(|e| e.to_string())?;
            ensure!(c.chosen_role == a.chosen_role, "case {case}: argmax changed under scale {factor}");
        }

        // Independent scoring: skill overlap + 0.5 title overlap + template bonus.
        let q: BTreeSet<&str> = question.text.split_whitespace().collect();
        let titles: BTreeSet<&str> = context.snippets[0].title.split_whitespace().collect();
        let scored: Vec<(&Agent, f64)> = agents
            .iter()
            .filter(|ag| !matches!(ag.role, Role::Facilitator | Role::Summarizer))
            .map(|ag| {
                let skills: BTreeSet<&str> = ag.skills.iter().map(String::as_str).collect();
                (ag, jaccard(&q, &skills) + 0.5 * jaccard(&q, &titles) + prefs.get(&ag.role).copied().unwrap_or(0.0))
            })
            .collect();
        let max = scored.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<&Agent> = scored.iter().filter(|(_, s)| (s - max).abs() <= 1e-9).map(|(ag, _)| *ag).collect();
        let expected = tied.iter().min_by_key(|ag| ag.registration_index).unwrap();
        ensure!(
            expected.role == a.chosen_role,
            "case {case}: chose {:?}, expected {:?} (lowest index among {} tied)",
            a.chosen_role,
            expected.role,
            tied.len()
        );
        ensure!(a.tie_break_applied == (tied.len() > 1), "case {case}: tie flag {}", a.tie_break_applied);
        if tied.len() > 1 {
            ties += 1;
        }
    }
    ensure!(ties > 0, "no ties generated; tie-break untested");
    Ok(format!("{ROUTING_TRIPLES} triples, {ties} with tied maxima, 4 scale factors each"))
}

fn read_events(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn user_message(event: &Value) -> &str {
    event["request"]["messages"]
        .as_array()
        .unwrap()
        .iter()
        .find(|m| m["role"] == "user")
        .and_then(|m| m["content"].as_str())
        .unwrap_or("")
}

fn has_section(text: &str, name: &str) -> bool {
    text.lines().any(|l| l == format!("## {name}"))
}

fn exemplar_count(text: &str) -> usize {
    let mut inside = false;
    let mut count = 0;
    for line in text.lines() {
        if let Some(name) = line.strip_prefix("## ") {
            inside = name == "EXEMPLARS";
        } else if inside && line.starts_with("### EXEMPLAR ") {
            count += 1;
        }
    }
    count
}

fn round_schedule() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let session = common::run_fixture(dir.path());
    let events = read_events(&session.join("events.jsonl"));

    let created = &events[0];
    ensure!(created["type"] == "session_created", "first event is {}", created["type"]);
    ensure!(created["settings"]["rng_seed"] == FIXTURE_SEED, "seed {}", created["settings"]["rng_seed"]);
    ensure!(created["settings"]["fewshot_k"] == FEWSHOT_K, "k {}", created["settings"]["fewshot_k"]);
    ensure!(created["settings"]["followup_cap"] == FOLLOWUP_CAP, "cap {}", created["settings"]["followup_cap"]);
    let seeds = events.iter().filter(|e| e["type"] == "question_added" && e["question"]["origin"] == "seed_bank").count();
    ensure!(seeds == FIXTURE_QUESTIONS, "{seeds} seed questions");

    let completed: Vec<u64> = events.iter().filter(|e| e["type"] == "round_completed").map(|e| e["report"]["round"].as_u64().unwrap()).collect();
    ensure!(completed == [1, 2, 3, 4], "rounds completed {completed:?}");
    let finals = events.iter().filter(|e| e["type"] == "session_finalized").count();
    ensure!(finals == 1 && events.last().unwrap()["type"] == "session_finalized", "finalization events {finals}");

    let prompts: Vec<&Value> = events.iter().filter(|e| e["type"] == "completion_requested").collect();
    let r1: Vec<&&Value> = prompts.iter().filter(|e| e["round"] == "R1_zero_shot").collect();
    ensure!(!r1.is_empty(), "no R1 prompts");
    for e in &r1 {
        let text = user_message(e);
        ensure!(!has_section(text, "CONTEXT") && !has_section(text, "EXEMPLARS"), "R1 prompt with context: {text}");
    }
    let r4: Vec<&&Value> =
        prompts.iter().filter(|e| e["round"] == "R4_few_shot" && e["purpose"]["kind"] == "answer").collect();
    ensure!(!r4.is_empty(), "no R4 answer prompts");
    for e in &r4 {
        let n = exemplar_count(user_message(e));
        ensure!(n == FEWSHOT_K, "R4 prompt with {n} exemplars");
    }
    let followups = events.iter().filter(|e| e["type"] == "question_added" && e["question"]["origin"] == "followup_mined").count();
    ensure!(followups <= FOLLOWUP_CAP, "{followups} follow-ups, cap {FOLLOWUP_CAP}");
    ensure!(followups > 0, "no follow-ups mined");
    Ok(format!(
        "R1..R4 once each, {} R1 prompts without context, {} R4 prompts with {FEWSHOT_K} exemplars, {followups} follow-ups (cap {FOLLOWUP_CAP})",
        r1.len(),
        r4.len()
    ))
}

fn replay_determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = common::fixture_config();
    let mut dirs = Vec::new();
    for d in [&a, &b] {
        let out = common::run_cli(&["run", "--config", cfg.to_str().unwrap(), "--data-dir", d.path().to_str().unwrap()]);
        ensure!(out.status.success(), "run failed: {}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
        let last: Value = serde_json::from_str(stdout.lines().last().unwrap_or("{}")).map_err(|e| e.to_string())?;
        dirs.push(d.path().join(last["session_id"].as_str().unwrap_or("")));
    }
    let mut sizes = Vec::new();
    for f in ["events.jsonl", "fmea.csv"] {
        let x = std::fs::read(dirs[0].join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(dirs[1].join(f)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{f} differs between runs");
        sizes.push(format!("{f} {} bytes", x.len()));
    }
    Ok(format!("identical {}", sizes.join(", ")))
}

fn sme_loop() -> Outcome {
    let server = common::Server::start();
    let id = server.create(&common::fixture_body());
    server.advance(&id);
    let questions_before = server.banks(&id, "questions");
    let rows = server.banks(&id, "fmea");
    let target = rows.first().ok_or("no rows after R1")?;
    let rid = target["id"].as_str().unwrap().to_string();
    let comment = "Cause is misalignment, not dry running";

    let resp = server.post(&format!("/sessions/{id}/rows/{rid}/review"), &json!({"action": "reject", "comment": comment}));
    ensure!(resp.status().as_u16() == 200, "reject returned {}", resp.status());
    let v: Value = resp.json().map_err(|e| e.to_string())?;
    ensure!(v["row"]["review_status"] == "rejected", "row status {}", v["row"]["review_status"]);
    let qid = v["requeued_question_id"].as_str().ok_or("no requeued_question_id")?.to_string();

    let questions_after = server.banks(&id, "questions");
    ensure!(questions_after.len() == questions_before.len() + 1, "{} new questions", questions_after.len() - questions_before.len());
    let requeued: Vec<&Value> = questions_after.iter().filter(|q| q["origin"] == "sme_requeue").collect();
    ensure!(requeued.len() == 1 && requeued[0]["id"] == qid.as_str(), "requeued questions {requeued:?}");
    ensure!(requeued[0]["text"].as_str().unwrap_or("").contains(comment), "comment missing from question text");
    ensure!(requeued[0]["feedback"]["comment"] == comment, "feedback {}", requeued[0]["feedback"]);

    let report = server.advance(&id);
    let answers = server.banks(&id, "answers");
    let answered: Vec<&Value> = answers.iter().filter(|a| a["question_id"] == qid.as_str()).collect();
    ensure!(answered.len() == 1 && answered[0]["round"] == 2, "answers to requeued question {answered:?}");
    let rows = server.banks(&id, "fmea");
    let replacement = rows
        .iter()
        .find(|r| r["id"] != rid.as_str() && r["source_question_ids"].as_array().is_some_and(|s| s.contains(&json!(qid))))
        .ok_or("no replacement row")?;
    ensure!(replacement["review_status"] == "draft", "replacement status {}", replacement["review_status"]);
    Ok(format!(
        "reject {rid} requeued {qid}, answered in round {}, replacement draft {}",
        report["round"], replacement["id"]
    ))
}

fn crash_tolerance() -> Outcome {
    let source = tempfile::tempdir().map_err(|e| e.to_string())?;
    let session = common::run_fixture(source.path());
    let mut details = Vec::new();
    for kind in BankKind::ALL {
        let records: Vec<Value> = std::fs::read_to_string(session.join(kind.file_name()))
            .map_err(|e| e.to_string())?
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let path = dir.path().join(kind.file_name());
        let (mut bank, warnings) = BankFile::open(&path, kind).map_err(|e| e.to_string())?;
        ensure!(warnings.is_empty(), "fresh bank warned");
        for r in &records {
            bank.append(r).map_err(|e| e.to_string())?;
        }
        let appends = records.len();
        drop(bank);

        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let last_start = bytes[..bytes.len() - 1].iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        let cut = last_start + (bytes.len() - last_start) / 2;
        std::fs::write(&path, &bytes[..cut]).map_err(|e| e.to_string())?;

        let (bank, warnings) = BankFile::open(&path, kind).map_err(|e| e.to_string())?;
        ensure!(warnings.len() == 1, "{}: {} warnings", kind.as_str(), warnings.len());
        ensure!(bank.len() == appends - 1, "{}: {} records after {appends} appends", kind.as_str(), bank.len());
        details.push(format!("{} {}/{appends}", kind.as_str(), bank.len()));
    }

    // The whole session reopens from a torn event log, one event short.
    let events_path = session.join("events.jsonl");
    let total = std::fs::read_to_string(&events_path).map_err(|e| e.to_string())?.lines().count();
    let bytes = std::fs::read(&events_path).map_err(|e| e.to_string())?;
    std::fs::write(&events_path, &bytes[..bytes.len() - 7]).map_err(|e| e.to_string())?;
    let (store, reopened) = SessionStore::open(source.path(), "fixture").map_err(|e| e.to_string())?;
    ensure!(reopened.events().len() == total - 1, "session has {} of {total} events", reopened.events().len());
    ensure!(!store.warnings().is_empty(), "no warning for torn event log");
    details.push(format!("session events {}/{total}", reopened.events().len()));
    Ok(details.join(", "))
}

/// Strict RFC 4180 reader: CRLF record ends, quoted fields with doubled
/// quotes, bare fields free of quotes, commas and line breaks, equal field
/// counts, final CRLF.
fn rfc4180_parse(text: &str) -> Result<Vec<Vec<String>>, String> {
    let b = text.as_bytes();
    let mut records = Vec::new();
    let mut i = 0;
    if b.is_empty() {
        return Err("empty".into());
    }
    while i < b.len() {
        let mut record = Vec::new();
        loop {
            let mut field = Vec::new();
            if b.get(i) == Some(&b'"') {
                i += 1;
                loop {
                    match b.get(i) {
                        None => return Err("unterminated quote".into()),
                        Some(b'"') if b.get(i + 1) == Some(&b'"') => {
                            field.push(b'"');
                            i += 2;
                        }
                        Some(b'"') => {
                            i += 1;
                            break;
                        }
                        Some(&c) => {
                            field.push(c);
                            i += 1;
                        }
                    }
                }
            } else {
                while let Some(&c) = b.get(i) {
                    if c == b',' || c == b'\r' {
                        break;
                    }
                    if c == b'"' || c == b'\n' {
                        return Err(format!("bare field contains {:?} at byte {i}", c as char));
                    }
                    field.push(c);
                    i += 1;
                }
            }
            record.push(String::from_utf8(field).map_err(|e| e.to_string())?);
            match (b.get(i), b.get(i + 1)) {
                (Some(b','), _) => i += 1,
                (Some(b'\r'), Some(b'\n')) => {
                    i += 2;
                    break;
                }
                (None, _) => return Err("missing final CRLF".into()),
                (Some(&c), _) => return Err(format!("unexpected {:?} after field at byte {i}", c as char)),
            }
        }
        if let Some(first) = records.first() {
            let first: &Vec<String> = first;
            if first.len() != record.len() {
                return Err(format!("record {} has {} fields, header {}", records.len(), record.len(), first.len()));
            }
        }
        records.push(record);
    }
    Ok(records)
}

fn export_contract() -> Outcome {
    // Stop before finalization so the row can still be edited.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = common::fixture_config();
    let out = common::run_cli(&[
        "run", "--config", cfg.to_str().unwrap(), "--data-dir", dir.path().to_str().unwrap(),
        "--session", "fixture", "--until-round", "3",
    ]);
    ensure!(out.status.success(), "run failed: {}", String::from_utf8_lossy(&out.stderr));
    let addr = fmea_panel::service::spawn("127.0.0.1:0", dir.path(), &common::fixture_dir()).map_err(|e| e.to_string())?;
    let client = reqwest::blocking::Client::new();
    let base = format!("http://{addr}/sessions/fixture");

    // Put quotes, a comma and a line break into one row so quoting is exercised.
    let first: Value = client.get(format!("{base}/banks?kind=fmea&limit=1")).send().map_err(|e| e.to_string())?.json().map_err(|e| e.to_string())?;
    let rid = first["records"][0]["id"].as_str().ok_or("no rows")?.to_string();
    let edit = json!({"action": "edit", "edits": {"recommended_action": "Re-seat the seal, then log \"as found\"\nstate"}});
    let resp = client.post(format!("{base}/rows/{rid}/review")).json(&edit).send().map_err(|e| e.to_string())?;
    ensure!(resp.status().as_u16() == 200, "edit returned {}", resp.status());

    let mut checked = Vec::new();
    for format in ["csv", "json"] {
        let http = client.get(format!("{base}/fmea?format={format}")).send().map_err(|e| e.to_string())?;
        ensure!(http.status().as_u16() == 200, "HTTP export {}", http.status());
        let http = http.bytes().map_err(|e| e.to_string())?.to_vec();
        let out = common::run_cli(&["export", "--session", "fixture", "--format", format, "--data-dir", dir.path().to_str().unwrap()]);
        ensure!(out.status.success(), "CLI export failed");
        ensure!(http == out.stdout, "{format}: HTTP and CLI bytes differ");
        checked.push(format!("{format} {} bytes", http.len()));
    }

    let csv = String::from_utf8(client.get(format!("{base}/fmea?format=csv")).send().map_err(|e| e.to_string())?.bytes().map_err(|e| e.to_string())?.to_vec())
        .map_err(|e| e.to_string())?;
    let records = rfc4180_parse(&csv)?;
    ensure!(records[0].join(",") == CSV_HEADER, "header {:?}", records[0]);
    ensure!(csv.starts_with(&format!("{CSV_HEADER}\r\n")), "header line not exact");
    ensure!(csv.contains("\"Re-seat the seal, then log \"\"as found\"\"\nstate\""), "edited field not quoted per RFC 4180");

    let json: Vec<Value> = client.get(format!("{base}/fmea?format=json")).send().map_err(|e| e.to_string())?.json().map_err(|e| e.to_string())?;
    let rows = &records[1..];
    ensure!(rows.len() == json.len() && !rows.is_empty(), "{} CSV rows vs {} JSON rows", rows.len(), json.len());
    let columns: Vec<&str> = CSV_HEADER.split(',').collect();
    for (csv_row, obj) in rows.iter().zip(&json) {
        for (field, col) in csv_row.iter().zip(&columns) {
            let expected = match &obj[*col] {
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            ensure!(*field == expected, "{col}: CSV {field:?} vs JSON {expected:?}");
        }
    }
    for pair in json.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let (ra, rb) = (a["rpn"].as_u64().unwrap(), b["rpn"].as_u64().unwrap());
        let (ia, ib) = (a["id"].as_str().unwrap(), b["id"].as_str().unwrap());
        ensure!(ra > rb || (ra == rb && ia < ib), "order: ({ra},{ia}) before ({rb},{ib})");
    }
    Ok(format!("{} rows, RFC 4180 valid, sorted by (rpn desc, id asc), HTTP = CLI for {}", rows.len(), checked.join(" and ")))
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("bleu correctness", bleu_correctness),
        ("dedup properties", dedup_properties),
        ("routing determinism and tie-break", routing_invariants),
        ("round schedule", round_schedule),
        ("replay determinism", replay_determinism),
        ("sme loop", sme_loop),
        ("crash tolerance", crash_tolerance),
        ("export", export_contract),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name}: {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
