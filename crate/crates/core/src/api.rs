//! Records and request/response bodies shared by the HTTP service and its
//! client.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use uuid::Uuid;

use crate::facets::FacetResult;
use crate::icr::{Disagreement, IcrSummary};
use crate::pipeline::{AuditAlert, AuditConfig, AuditJob};
use crate::provider::{ResolutionAction, ResolutionSuggestion, Severity};
use crate::vector_store::ConsistencyScoreRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: Uuid,
    pub username: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub id: Uuid,
    pub owner: Uuid,
    pub name: String,
    pub settings: AuditConfig,
    pub embedding_dim: usize,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Owner,
    Member,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Member {
    pub user_id: Uuid,
    pub username: Option<String>,
    pub role: Role,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub id: Uuid,
    pub project_id: Uuid,
    pub title: String,
    pub body: String,
    pub uploaded_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRecord {
    pub id: Uuid,
    pub project_id: Uuid,
    pub name: String,
    pub color: String,
    pub definition: Option<String>,
    pub created_at: DateTime<Utc>,
}

/// A coded span. Offsets are character positions into the document body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: Uuid,
    pub project_id: Uuid,
    pub document_id: Uuid,
    pub char_start: usize,
    pub char_end: usize,
    pub code_ids: Vec<Uuid>,
    pub coder_id: Uuid,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlertRecord {
    #[serde(flatten)]
    pub alert: AuditAlert,
    pub dismissed_at: Option<DateTime<Utc>>,
}

/// A human decision on a disagreement. Recording it changes no coding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRecord {
    pub id: Uuid,
    pub project_id: Uuid,
    pub disagreement: Disagreement,
    pub action: ResolutionAction,
    pub note: Option<String>,
    pub resolved_by: Uuid,
    pub resolved_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub username: String,
    pub password: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub token: String,
    pub expires_at: DateTime<Utc>,
    pub user: UserProfile,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateProject {
    pub name: String,
    /// Partial settings merged over the defaults.
    #[serde(default)]
    pub settings: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddMember {
    pub username: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateDocument {
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateCode {
    pub name: String,
    #[serde(default)]
    pub color: Option<String>,
    #[serde(default)]
    pub definition: Option<String>,
}

/// Fields left out are unchanged; `definition: null` clears it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCode {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "double_option"
    )]
    pub definition: Option<Option<String>>,
}

mod double_option {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Option<String>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref().and_then(Option::as_ref).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Option<Option<String>>, D::Error> {
        Option::<String>::deserialize(d).map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyCode {
    pub document_id: Uuid,
    pub char_start: usize,
    pub char_end: usize,
    pub code_ids: Vec<Uuid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplyCodeResponse {
    pub segment: SegmentRecord,
    pub jobs: Vec<AuditJob>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetRequest {
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job_id: Uuid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetReport {
    pub user_id: Uuid,
    pub computed_at: DateTime<Utc>,
    #[serde(flatten)]
    pub result: FacetResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcrReport {
    pub summary: Option<IcrSummary>,
    /// Unit ids, coder ids and categories of the matrix the figures came from.
    pub items: Vec<String>,
    pub coders: Vec<String>,
    pub categories: Vec<String>,
    pub disagreements: Vec<Disagreement>,
    /// Why statistics are absent, when they are.
    pub empty_reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestResolution {
    pub disagreement: Disagreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionAdvice {
    pub suggestion: ResolutionSuggestion,
    /// Suggestions are never applied by the service.
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolveDisagreement {
    pub disagreement: Disagreement,
    pub action: ResolutionAction,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Overview {
    pub documents: usize,
    pub codes: usize,
    pub segments: usize,
    pub coders: usize,
    pub open_alerts: BTreeMap<Severity, usize>,
    pub score_records: usize,
}

/// Square similarity matrix over `codes`; `None` where a code has no centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapMatrix {
    pub codes: Vec<Uuid>,
    pub values: Vec<Vec<Option<f64>>>,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cooccurrence {
    pub code_a: Uuid,
    pub code_b: Uuid,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dashboard {
    pub overview: Overview,
    pub timeline: BTreeMap<Uuid, Vec<ConsistencyScoreRecord>>,
    pub overlap: OverlapMatrix,
    pub cooccurrence: Vec<Cooccurrence>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    AuditAlert,
    ReflectionReady,
    FacetReady,
    IcrUpdated,
}

/// One message on a project's push channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PushEvent {
    /// Increases by one per event within a project, starting at 1.
    pub event_id: u64,
    #[serde(rename = "type")]
    pub kind: EventKind,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldProblem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProblem {
    pub field: String,
    pub message: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_code_distinguishes_absent_and_null() {
        let absent: UpdateCode = serde_json::from_str("{}").unwrap();
        assert_eq!(absent.definition, None);
        let cleared: UpdateCode = serde_json::from_str(r#"{"definition": null}"#).unwrap();
        assert_eq!(cleared.definition, Some(None));
        let set: UpdateCode = serde_json::from_str(r#"{"definition": "x"}"#).unwrap();
        assert_eq!(set.definition, Some(Some("x".into())));
    }

    #[test]
    fn push_event_uses_type_key() {
        let e = PushEvent {
            event_id: 3,
            kind: EventKind::AuditAlert,
            payload: serde_json::json!({}),
        };
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["type"], "audit_alert");
        assert_eq!(v["event_id"], 3);
    }
}
