use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::vector_store::AuditTrigger;

/// A unit of audit work for one `(segment, code)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditJob {
    pub id: Uuid,
    pub project_id: Uuid,
    pub segment_id: Uuid,
    pub code_id: Uuid,
    /// Owner of the vector collection the job scores against.
    pub user_id: Uuid,
    pub trigger: AuditTrigger,
    pub enqueued_at: DateTime<Utc>,
}

/// Character span of a coded segment, as seen by the sibling rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanRef {
    pub segment_id: Uuid,
    pub document_id: Uuid,
    pub coder_id: Uuid,
    pub start: usize,
    pub end: usize,
    pub code_ids: Vec<Uuid>,
}

impl SpanRef {
    pub fn intersects(&self, other: &SpanRef) -> bool {
        self.document_id == other.document_id && self.start < other.end && other.start < self.end
    }
}

/// One re-audit job per `(segment, code)` of every other segment in the same
/// document whose half-open span intersects `new`'s.
pub fn sibling_reaudit(
    project_id: Uuid,
    new: &SpanRef,
    existing: &[SpanRef],
    now: DateTime<Utc>,
) -> Vec<AuditJob> {
    existing
        .iter()
        .filter(|s| s.segment_id != new.segment_id && s.intersects(new))
        .flat_map(|s| {
            s.code_ids.iter().map(move |&code_id| AuditJob {
                id: Uuid::new_v4(),
                project_id,
                segment_id: s.segment_id,
                code_id,
                user_id: s.coder_id,
                trigger: AuditTrigger::SiblingReaudit,
                enqueued_at: now,
            })
        })
        .collect()
}
