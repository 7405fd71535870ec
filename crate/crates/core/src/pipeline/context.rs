use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::mmr::{mmr_select, Candidate};
use super::AuditConfig;
use crate::scoring::EmbeddingVector;

/// Text around a span, `chars` characters either side, cut at the document
/// bounds. Offsets are character (not byte) positions.
pub fn surrounding_text(body: &str, start: usize, end: usize, chars: usize) -> String {
    let from = start.saturating_sub(chars);
    let to = end.saturating_add(chars);
    body.chars().skip(from).take(to - from).collect()
}

/// Slice of `body` between character offsets.
pub fn span_text(body: &str, start: usize, end: usize) -> String {
    body.chars()
        .skip(start)
        .take(end.saturating_sub(start))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectedBy {
    Recency,
    Mmr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSegment {
    pub segment_id: Uuid,
    pub text: String,
    pub similarity: f64,
    pub coded_at: DateTime<Utc>,
    pub selected_by: SelectedBy,
}

/// A prior segment offered to [`select_prior_segments`].
pub struct PriorCandidate<'a> {
    pub vector: &'a EmbeddingVector,
    pub similarity: f64,
    pub coded_at: DateTime<Utc>,
}

/// Picks the `recency_quota` most recent candidates, then fills up to
/// `context_k` with an MMR pass over the rest. Returns indices and how each
/// was chosen, recency picks first.
pub fn select_prior_segments(
    candidates: &[PriorCandidate<'_>],
    config: &AuditConfig,
) -> Vec<(usize, SelectedBy)> {
    let mut by_recency: Vec<usize> = (0..candidates.len()).collect();
    by_recency.sort_by(|&a, &b| (candidates[b].coded_at, b).cmp(&(candidates[a].coded_at, a)));
    let quota = config.recency_quota.min(config.context_k);
    let recent: Vec<usize> = by_recency.iter().copied().take(quota).collect();
    let rest: Vec<usize> = by_recency.iter().copied().skip(quota).collect();

    let pool: Vec<Candidate<'_>> = rest
        .iter()
        .map(|&i| Candidate {
            vector: candidates[i].vector,
            relevance: candidates[i].similarity,
            coded_at: candidates[i].coded_at,
        })
        .collect();
    let room = config.context_k.saturating_sub(recent.len());
    let picked = mmr_select(&pool, room, config.mmr_lambda);

    recent
        .into_iter()
        .map(|i| (i, SelectedBy::Recency))
        .chain(picked.into_iter().map(|p| (rest[p], SelectedBy::Mmr)))
        .collect()
}
