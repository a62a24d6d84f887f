//! N-gram statistics, sentence BLEU, self-BLEU and greedy threshold
//! deduplication.
//!
//! BLEU here is the unsmoothed sentence-level definition: clipped (modified)
//! n-gram precisions combined by a weighted geometric mean and scaled by the
//! brevity penalty. Any zero precision zeroes the score. The highest order
//! used is capped at the candidate length so that very short texts are still
//! compared at the orders they can actually support.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::MetricsError;

pub const DEFAULT_MAX_N: usize = 4;
pub const DEFAULT_DUPLICATE_THRESHOLD: f64 = 0.8;

/// Lowercases, splits on Unicode whitespace and strips leading and trailing
/// non-alphanumeric characters from each token. Empty tokens are dropped, so a
/// lone `-` disappears while `seal-leak` survives intact.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if trimmed.is_empty() {
                None
            } else {
                Some(trimmed.chars().flat_map(char::to_lowercase).collect())
            }
        })
        .collect()
}

/// Distinct tokens of `text` under [`tokenize`].
pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// `|a ∩ b| / |a ∪ b|`, with 0 for two empty sets.
pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let shared = a.intersection(b).count();
    let union = a.len() + b.len() - shared;
    if union == 0 {
        0.0
    } else {
        shared as f64 / union as f64
    }
}

/// Counts of every n-gram of a fixed order in one token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramProfile {
    n: usize,
    counts: BTreeMap<Vec<String>, u32>,
}

impl NgramProfile {
    pub fn new(tokens: &[String], n: usize) -> Result<Self, MetricsError> {
        if n == 0 {
            return Err(MetricsError::ZeroOrder);
        }
        let mut counts = BTreeMap::new();
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
        Ok(Self { n, counts })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn counts(&self) -> &BTreeMap<Vec<String>, u32> {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }
}

/// Clipped n-gram matches over candidate n-grams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub clipped: u32,
    pub total: u32,
}

impl Precision {
    /// `clipped / total`, or 0 when the candidate has no n-grams of this order.
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            f64::from(self.clipped) / f64::from(self.total)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    /// Modified precision for orders `1..=effective_max_n`.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub candidate_len: usize,
    pub effective_ref_len: usize,
    pub effective_max_n: usize,
    /// Set when the candidate is empty; the value is then 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub enum BleuWeights {
    /// `1 / effective_max_n` for every order.
    #[default]
    Uniform,
    /// One weight per order `1..=max_n`. When the effective order is capped the
    /// leading weights are kept and renormalized to sum to one.
    Custom(Vec<f64>),
}

impl BleuWeights {
    fn resolve(&self, max_n: usize, effective: usize) -> Result<Vec<f64>, MetricsError> {
        match self {
            BleuWeights::Uniform => Ok(alloc::vec![1.0 / effective as f64; effective]),
            BleuWeights::Custom(w) => {
                if w.len() != max_n {
                    return Err(MetricsError::WeightCount { expected: max_n, got: w.len() });
                }
                if effective == max_n {
                    return Ok(w.clone());
                }
                let head = &w[..effective];
                let sum: f64 = head.iter().sum();
                if sum > 0.0 {
                    Ok(head.iter().map(|x| x / sum).collect())
                } else {
                    Ok(alloc::vec![1.0 / effective as f64; effective])
                }
            }
        }
    }
}

type Counts<'a> = BTreeMap<&'a [u32], u32>;

/// Token sequences mapped to dense ids, with per-order n-gram counts.
struct Prepared<'a> {
    len: usize,
    orders: Vec<Counts<'a>>,
}

impl<'a> Prepared<'a> {
    fn new(ids: &'a [u32], max_n: usize) -> Self {
        let orders = (1..=max_n)
            .map(|n| {
                let mut counts = Counts::new();
                for window in ids.windows(n) {
                    *counts.entry(window).or_insert(0) += 1;
                }
                counts
            })
            .collect();
        Self { len: ids.len(), orders }
    }
}

#[derive(Default)]
struct Interner {
    ids: BTreeMap<String, u32>,
}

impl Interner {
    fn intern(&mut self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| {
                let next = self.ids.len() as u32;
                *self.ids.entry(t.clone()).or_insert(next)
            })
            .collect()
    }
}

fn clip(candidate: &Counts<'_>, references: &[&Counts<'_>]) -> Precision {
    let mut clipped = 0;
    let mut total = 0;
    for (gram, &count) in candidate {
        total += count;
        let max_ref = references.iter().filter_map(|r| r.get(gram)).copied().max().unwrap_or(0);
        clipped += count.min(max_ref);
    }
    Precision { clipped, total }
}

/// Closest reference length to `candidate_len`; ties go to the shorter one.
fn closest_ref_len(candidate_len: usize, ref_lens: impl Iterator<Item = usize>) -> usize {
    let mut best: Option<usize> = None;
    for r in ref_lens {
        best = Some(match best {
            None => r,
            Some(b) => {
                let (db, dr) = (b.abs_diff(candidate_len), r.abs_diff(candidate_len));
                if dr < db || (dr == db && r < b) {
                    r
                } else {
                    b
                }
            }
        });
    }
    best.unwrap_or(0)
}

fn brevity_penalty(candidate_len: usize, ref_len: usize) -> f64 {
    if candidate_len > ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / candidate_len as f64)
    }
}

fn score_prepared(
    candidate: &Prepared<'_>,
    references: &[&Prepared<'_>],
    max_n: usize,
    weights: &BleuWeights,
) -> Result<BleuScore, MetricsError> {
    let effective_ref_len = closest_ref_len(candidate.len, references.iter().map(|r| r.len));
    if candidate.len == 0 {
        return Ok(BleuScore {
            value: 0.0,
            precisions: Vec::new(),
            brevity_penalty: 1.0,
            candidate_len: 0,
            effective_ref_len,
            effective_max_n: 0,
            degenerate: true,
        });
    }
    let effective = max_n.min(candidate.len);
    let weights = weights.resolve(max_n, effective)?;
    let mut precisions = Vec::with_capacity(effective);
    let mut log_sum = 0.0;
    let mut any_zero = false;
    for n in 0..effective {
        let refs: Vec<&Counts<'_>> = references.iter().map(|r| &r.orders[n]).collect();
        let p = clip(&candidate.orders[n], &refs).value();
        if p == 0.0 {
            any_zero = true;
        } else {
            log_sum += weights[n] * libm::log(p);
        }
        precisions.push(p);
    }
    let bp = brevity_penalty(candidate.len, effective_ref_len);
    let value = if any_zero { 0.0 } else { bp * libm::exp(log_sum) };
    Ok(BleuScore {
        value,
        precisions,
        brevity_penalty: bp,
        candidate_len: candidate.len,
        effective_ref_len,
        effective_max_n: effective,
        degenerate: false,
    })
}

/// Uniform-weight BLEU value against one reference, equal to
/// `score_prepared(..).value`. Checks the highest order first, since that is
/// the precision most likely to be zero.
fn pair_value(candidate: &Prepared<'_>, reference: &Prepared<'_>, max_n: usize) -> f64 {
    if candidate.len == 0 {
        return 0.0;
    }
    let effective = max_n.min(candidate.len);
    let mut precisions = [0.0f64; 8];
    let mut spill = Vec::new();
    let slots: &mut [f64] = if effective <= precisions.len() {
        &mut precisions[..effective]
    } else {
        spill.resize(effective, 0.0);
        &mut spill
    };
    for n in (0..effective).rev() {
        let p = clip(&candidate.orders[n], &[&reference.orders[n]]).value();
        if p == 0.0 {
            return 0.0;
        }
        slots[n] = p;
    }
    let w = 1.0 / effective as f64;
    let log_sum: f64 = slots.iter().fold(0.0, |acc, p| acc + w * libm::log(*p));
    brevity_penalty(candidate.len, reference.len) * libm::exp(log_sum)
}

/// Modified n-gram precision of `candidate` against `references`.
pub fn modified_precision(
    candidate: &[String],
    references: &[Vec<String>],
    n: usize,
) -> Result<Precision, MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let cand = NgramProfile::new(candidate, n)?;
    let refs = references
        .iter()
        .map(|r| NgramProfile::new(r, n))
        .collect::<Result<Vec<_>, _>>()?;
    let mut clipped = 0;
    for (gram, &count) in cand.counts() {
        let max_ref = refs.iter().filter_map(|r| r.counts().get(gram)).copied().max().unwrap_or(0);
        clipped += count.min(max_ref);
    }
    Ok(Precision { clipped, total: cand.total() })
}

/// Sentence BLEU of `candidate` against `references`.
pub fn bleu(
    candidate: &[String],
    references: &[Vec<String>],
    max_n: usize,
    weights: &BleuWeights,
) -> Result<BleuScore, MetricsError> {
    if max_n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    if references.is_empty() {
        return Err(MetricsError::NoReferences);
    }
    let mut interner = Interner::default();
    let cand_ids = interner.intern(candidate);
    let ref_ids: Vec<Vec<u32>> = references.iter().map(|r| interner.intern(r)).collect();
    let cand = Prepared::new(&cand_ids, max_n);
    let refs: Vec<Prepared<'_>> = ref_ids.iter().map(|r| Prepared::new(r, max_n)).collect();
    let ref_views: Vec<&Prepared<'_>> = refs.iter().collect();
    score_prepared(&cand, &ref_views, max_n, weights)
}

/// For each item, its BLEU against all other items as references.
/// Fewer than two items gives all zeros.
pub fn self_bleu_scores(items: &[Vec<String>], max_n: usize) -> Vec<f64> {
    if items.len() < 2 || max_n == 0 {
        return alloc::vec![0.0; items.len()];
    }
    let mut interner = Interner::default();
    let ids: Vec<Vec<u32>> = items.iter().map(|t| interner.intern(t)).collect();
    let prepared: Vec<Prepared<'_>> = ids.iter().map(|t| Prepared::new(t, max_n)).collect();
    (0..prepared.len())
        .map(|i| {
            let refs: Vec<&Prepared<'_>> =
                prepared.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p).collect();
            score_prepared(&prepared[i], &refs, max_n, &BleuWeights::Uniform)
                .map(|s| s.value)
                .unwrap_or(0.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedItem {
    pub id: String,
    pub duplicate_of: String,
    pub self_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DedupOutcome {
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedItem>,
}

/// Greedy, input-order deduplication of `(id, text)` items.
///
/// An item is dropped when its highest pairwise BLEU against any already-kept
/// item reaches `threshold`. The first item is always kept.
pub fn dedup(items: &[(String, String)], threshold: f64, max_n: usize) -> DedupOutcome {
    dedup_against(&[], items, threshold, max_n)
}

/// Like [`dedup`], but `prior` items count as already kept. Prior items are
/// never dropped and do not appear in the outcome.
pub fn dedup_against(
    prior: &[(String, String)],
    items: &[(String, String)],
    threshold: f64,
    max_n: usize,
) -> DedupOutcome {
    let max_n = max_n.max(1);
    let mut interner = Interner::default();
    let prior_ids: Vec<Vec<u32>> =
        prior.iter().map(|(_, text)| interner.intern(&tokenize(text))).collect();
    let item_ids: Vec<Vec<u32>> =
        items.iter().map(|(_, text)| interner.intern(&tokenize(text))).collect();

    let mut kept_ids: Vec<&str> = prior.iter().map(|(id, _)| id.as_str()).collect();
    let mut kept: Vec<Prepared<'_>> = prior_ids.iter().map(|t| Prepared::new(t, max_n)).collect();
    let mut outcome = DedupOutcome::default();

    for ((id, _), tokens) in items.iter().zip(&item_ids) {
        let candidate = Prepared::new(tokens, max_n);
        let mut best: Option<(usize, f64)> = None;
        for (k, reference) in kept.iter().enumerate() {
            let score = pair_value(&candidate, reference, max_n);
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((k, score));
            }
        }
        match best {
            Some((k, score)) if score >= threshold => outcome.dropped.push(DroppedItem {
                id: id.clone(),
                duplicate_of: kept_ids[k].into(),
                self_bleu: score,
            }),
            _ => {
                outcome.kept.push(id.clone());
                kept_ids.push(id);
                kept.push(candidate);
            }
        }
    }
    outcome
}
