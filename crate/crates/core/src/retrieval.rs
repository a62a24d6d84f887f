//! Asset-class matching over an in-memory knowledge index and assembly of the
//! [`AssetContext`] handed to the panel.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::domain::{normalize_asset_class, AssetContext, Snippet};
use crate::error::ValidationError;
use crate::metrics::{jaccard, token_set};

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub doc_id: String,
    /// Normalized asset-class tags.
    pub asset_class_tags: Vec<String>,
    pub title: String,
    pub body: String,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KnowledgeIndex {
    pub entries: Vec<KnowledgeEntry>,
    /// Unix seconds at build time, when known.
    pub built_at: Option<u64>,
}

impl KnowledgeIndex {
    /// Adds an entry, normalizing its tags. Duplicate doc ids are refused.
    pub fn insert(&mut self, mut entry: KnowledgeEntry) -> Result<(), ValidationError> {
        if self.entries.iter().any(|e| e.doc_id == entry.doc_id) {
            return Err(ValidationError::new("id", alloc::format!("duplicate doc_id {}", entry.doc_id)));
        }
        entry.asset_class_tags = entry
            .asset_class_tags
            .iter()
            .map(|t| normalize_asset_class(t))
            .collect::<Result<_, _>>()?;
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, doc_id: &str) -> Option<&KnowledgeEntry> {
        self.entries.iter().find(|e| e.doc_id == doc_id)
    }
}

/// Scores how well a query matches one asset-class tag, in `[0, 1]`.
pub trait TagScorer {
    fn score(&self, query: &str, tag: &str) -> f64;
}

/// Jaccard similarity of the token sets.
#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardScorer;

impl TagScorer for JaccardScorer {
    fn score(&self, query: &str, tag: &str) -> f64 {
        jaccard(&token_set(query), &token_set(tag))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocMatch {
    pub doc_id: String,
    pub score: f64,
}

pub fn match_asset_class(query: &str, index: &KnowledgeIndex) -> Vec<DocMatch> {
    match_asset_class_with(&JaccardScorer, query, index)
}

/// Best tag score per document, positive scores only, sorted by score
/// descending then doc id ascending.
pub fn match_asset_class_with(
    scorer: &dyn TagScorer,
    query: &str,
    index: &KnowledgeIndex,
) -> Vec<DocMatch> {
    let query = normalize_asset_class(query).unwrap_or_default();
    let mut matches: Vec<DocMatch> = index
        .entries
        .iter()
        .filter_map(|entry| {
            let best = entry
                .asset_class_tags
                .iter()
                .map(|tag| scorer.score(&query, tag))
                .fold(0.0_f64, f64::max);
            (best > 0.0).then(|| DocMatch { doc_id: entry.doc_id.clone(), score: best })
        })
        .collect();
    matches.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    matches
}

/// Builds the asset context from the `top_k` best-matching documents. An asset
/// with no match at all is flagged out-of-scope and carries no snippets.
pub fn discover_context(
    asset_class: &str,
    parameters: &BTreeMap<String, String>,
    index: &KnowledgeIndex,
    top_k: usize,
) -> Result<AssetContext, ValidationError> {
    if top_k == 0 {
        return Err(ValidationError::new("top_k", "must be at least 1"));
    }
    let asset_class = normalize_asset_class(asset_class)?;
    let snippets: Vec<Snippet> = match_asset_class(&asset_class, index)
        .into_iter()
        .take(top_k)
        .filter_map(|m| index.get(&m.doc_id))
        .map(|e| Snippet { source_path: e.source_path.clone(), title: e.title.clone(), text: e.body.clone() })
        .collect();
    Ok(AssetContext {
        asset_class,
        parameters: parameters.clone(),
        oos: snippets.is_empty(),
        snippets,
    })
}

/// Tokens of every snippet title in the context.
pub fn snippet_title_tokens(context: &AssetContext) -> BTreeSet<String> {
    context.snippets.iter().flat_map(|s| token_set(&s.title)).collect()
}
