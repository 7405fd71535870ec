//! Relational state kept as an append-only edit history. Every mutation is
//! one [`EditHistoryEntry`]; the current state is the fold of all entries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use codeaudit_core::api::{
    AlertRecord, CodeRecord, DocumentRecord, Project, ResolutionRecord, SegmentRecord,
};
use codeaudit_core::pipeline::AuditConfig;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: Uuid,
    pub username: String,
    pub password_hash: String,
    pub created_at: DateTime<Utc>,
}

/// Everything a project owns, as carried by an import.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSnapshot {
    pub project: Project,
    pub members: Vec<Uuid>,
    pub documents: Vec<DocumentRecord>,
    pub codes: Vec<CodeRecord>,
    pub segments: Vec<SegmentRecord>,
    pub alerts: Vec<AlertRecord>,
    pub resolutions: Vec<ResolutionRecord>,
}

/// The payload of a history entry: the full post-change snapshot of
/// whatever changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "change", content = "data", rename_all = "snake_case")]
pub enum Change {
    UserRegistered(UserRecord),
    ProjectCreated(Project),
    ProjectImported(Box<ProjectSnapshot>),
    SettingsUpdated {
        project_id: Uuid,
        settings: AuditConfig,
    },
    MemberAdded {
        project_id: Uuid,
        user_id: Uuid,
    },
    DocumentUploaded(DocumentRecord),
    CodeCreated(CodeRecord),
    CodeUpdated(CodeRecord),
    CodeDeleted(CodeRecord),
    SegmentCreated(SegmentRecord),
    SegmentDeleted(SegmentRecord),
    AlertRaised(Box<AlertRecord>),
    AlertDismissed {
        alert_id: Uuid,
        at: DateTime<Utc>,
    },
    DisagreementResolved(ResolutionRecord),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Create,
    Update,
    Delete,
    DismissAlert,
    ResolveDisagreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    User,
    Project,
    Membership,
    Document,
    Code,
    Segment,
    Alert,
    Disagreement,
}

impl Change {
    fn describe(&self) -> (EntityKind, Uuid, Action, Option<Uuid>) {
        use Change::*;
        match self {
            UserRegistered(u) => (EntityKind::User, u.id, Action::Create, None),
            ProjectCreated(p) => (EntityKind::Project, p.id, Action::Create, Some(p.id)),
            ProjectImported(s) => (
                EntityKind::Project,
                s.project.id,
                Action::Create,
                Some(s.project.id),
            ),
            SettingsUpdated { project_id, .. } => (
                EntityKind::Project,
                *project_id,
                Action::Update,
                Some(*project_id),
            ),
            MemberAdded {
                project_id,
                user_id,
            } => (
                EntityKind::Membership,
                *user_id,
                Action::Create,
                Some(*project_id),
            ),
            DocumentUploaded(d) => (
                EntityKind::Document,
                d.id,
                Action::Create,
                Some(d.project_id),
            ),
            CodeCreated(c) => (EntityKind::Code, c.id, Action::Create, Some(c.project_id)),
            CodeUpdated(c) => (EntityKind::Code, c.id, Action::Update, Some(c.project_id)),
            CodeDeleted(c) => (EntityKind::Code, c.id, Action::Delete, Some(c.project_id)),
            SegmentCreated(s) => (
                EntityKind::Segment,
                s.id,
                Action::Create,
                Some(s.project_id),
            ),
            SegmentDeleted(s) => (
                EntityKind::Segment,
                s.id,
                Action::Delete,
                Some(s.project_id),
            ),
            AlertRaised(a) => (
                EntityKind::Alert,
                a.alert.id,
                Action::Create,
                Some(a.alert.project_id),
            ),
            AlertDismissed { alert_id, .. } => {
                (EntityKind::Alert, *alert_id, Action::DismissAlert, None)
            }
            DisagreementResolved(r) => (
                EntityKind::Disagreement,
                r.id,
                Action::ResolveDisagreement,
                Some(r.project_id),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditHistoryEntry {
    pub id: Uuid,
    /// Position in the global history, from 1.
    pub seq: u64,
    pub project_id: Option<Uuid>,
    /// `None` for changes made by the background pipeline.
    pub actor: Option<Uuid>,
    pub entity: EntityKind,
    pub entity_id: Uuid,
    pub action: Action,
    pub payload: Change,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StateError {
    #[error("{0} not found")]
    NotFound(&'static str),
    #[error("{0}")]
    Conflict(String),
}

/// The relational model. Two states built from the same history compare
/// equal.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationalState {
    pub users: BTreeMap<Uuid, UserRecord>,
    pub projects: BTreeMap<Uuid, Project>,
    /// `(project, user)` pairs for non-owner members.
    pub members: BTreeSet<(Uuid, Uuid)>,
    pub documents: BTreeMap<Uuid, DocumentRecord>,
    pub codes: BTreeMap<Uuid, CodeRecord>,
    pub segments: BTreeMap<Uuid, SegmentRecord>,
    pub alerts: BTreeMap<Uuid, AlertRecord>,
    pub resolutions: BTreeMap<Uuid, ResolutionRecord>,
}

impl RelationalState {
    pub fn replay<'a>(
        entries: impl IntoIterator<Item = &'a EditHistoryEntry>,
    ) -> Result<Self, StateError> {
        let mut state = Self::default();
        for e in entries {
            state.apply(&e.payload)?;
        }
        Ok(state)
    }

    pub fn is_member(&self, project_id: Uuid, user_id: Uuid) -> bool {
        self.projects
            .get(&project_id)
            .is_some_and(|p| p.owner == user_id)
            || self.members.contains(&(project_id, user_id))
    }

    pub fn user_by_name(&self, username: &str) -> Option<&UserRecord> {
        self.users.values().find(|u| u.username == username)
    }

    pub fn project_members(&self, project_id: Uuid) -> Vec<Uuid> {
        self.members
            .range((project_id, Uuid::nil())..=(project_id, Uuid::max()))
            .map(|(_, u)| *u)
            .collect()
    }

    pub fn project_codes(&self, project_id: Uuid) -> Vec<&CodeRecord> {
        self.codes
            .values()
            .filter(|c| c.project_id == project_id)
            .collect()
    }

    pub fn project_documents(&self, project_id: Uuid) -> Vec<&DocumentRecord> {
        self.documents
            .values()
            .filter(|d| d.project_id == project_id)
            .collect()
    }

    pub fn project_segments(&self, project_id: Uuid) -> Vec<&SegmentRecord> {
        self.segments
            .values()
            .filter(|s| s.project_id == project_id)
            .collect()
    }

    pub fn snapshot(&self, project_id: Uuid) -> Option<ProjectSnapshot> {
        let project = self.projects.get(&project_id)?.clone();
        Some(ProjectSnapshot {
            project,
            members: self.project_members(project_id),
            documents: self
                .project_documents(project_id)
                .into_iter()
                .cloned()
                .collect(),
            codes: self
                .project_codes(project_id)
                .into_iter()
                .cloned()
                .collect(),
            segments: self
                .project_segments(project_id)
                .into_iter()
                .cloned()
                .collect(),
            alerts: self
                .alerts
                .values()
                .filter(|a| a.alert.project_id == project_id)
                .cloned()
                .collect(),
            resolutions: self
                .resolutions
                .values()
                .filter(|r| r.project_id == project_id)
                .cloned()
                .collect(),
        })
    }

    /// Checks and applies one change. On error the state is untouched.
    pub fn apply(&mut self, change: &Change) -> Result<(), StateError> {
        use Change::*;
        match change {
            UserRegistered(u) => {
                if self.user_by_name(&u.username).is_some() || self.users.contains_key(&u.id) {
                    return Err(StateError::Conflict(format!(
                        "username `{}` is taken",
                        u.username
                    )));
                }
                self.users.insert(u.id, u.clone());
            }
            ProjectCreated(p) => {
                if self.projects.contains_key(&p.id) {
                    return Err(StateError::Conflict(format!("project {} exists", p.id)));
                }
                self.projects.insert(p.id, p.clone());
            }
            ProjectImported(s) => {
                let pid = s.project.id;
                let clash = self.projects.contains_key(&pid)
                    || s.documents
                        .iter()
                        .any(|d| self.documents.contains_key(&d.id))
                    || s.codes.iter().any(|c| self.codes.contains_key(&c.id))
                    || s.segments.iter().any(|x| self.segments.contains_key(&x.id))
                    || s.alerts
                        .iter()
                        .any(|a| self.alerts.contains_key(&a.alert.id))
                    || s.resolutions
                        .iter()
                        .any(|r| self.resolutions.contains_key(&r.id));
                if clash {
                    return Err(StateError::Conflict(format!(
                        "project {pid} or its records already exist"
                    )));
                }
                self.projects.insert(pid, s.project.clone());
                self.members.extend(s.members.iter().map(|u| (pid, *u)));
                self.documents
                    .extend(s.documents.iter().map(|d| (d.id, d.clone())));
                self.codes.extend(s.codes.iter().map(|c| (c.id, c.clone())));
                self.segments
                    .extend(s.segments.iter().map(|x| (x.id, x.clone())));
                self.alerts
                    .extend(s.alerts.iter().map(|a| (a.alert.id, a.clone())));
                self.resolutions
                    .extend(s.resolutions.iter().map(|r| (r.id, r.clone())));
            }
            SettingsUpdated {
                project_id,
                settings,
            } => {
                let p = self
                    .projects
                    .get_mut(project_id)
                    .ok_or(StateError::NotFound("project"))?;
                p.settings = settings.clone();
            }
            MemberAdded {
                project_id,
                user_id,
            } => {
                let p = self
                    .projects
                    .get(project_id)
                    .ok_or(StateError::NotFound("project"))?;
                if !self.users.contains_key(user_id) {
                    return Err(StateError::NotFound("user"));
                }
                if p.owner == *user_id || !self.members.insert((*project_id, *user_id)) {
                    return Err(StateError::Conflict("already a member".into()));
                }
            }
            DocumentUploaded(d) => {
                if !self.projects.contains_key(&d.project_id) {
                    return Err(StateError::NotFound("project"));
                }
                if self.documents.contains_key(&d.id) {
                    return Err(StateError::Conflict(format!("document {} exists", d.id)));
                }
                self.documents.insert(d.id, d.clone());
            }
            CodeCreated(c) | CodeUpdated(c) => {
                let creating = matches!(change, CodeCreated(_));
                if !self.projects.contains_key(&c.project_id) {
                    return Err(StateError::NotFound("project"));
                }
                if creating == self.codes.contains_key(&c.id) {
                    return Err(if creating {
                        StateError::Conflict(format!("code {} exists", c.id))
                    } else {
                        StateError::NotFound("code")
                    });
                }
                if self
                    .codes
                    .values()
                    .any(|o| o.project_id == c.project_id && o.id != c.id && o.name == c.name)
                {
                    return Err(StateError::Conflict(format!(
                        "a code named `{}` already exists",
                        c.name
                    )));
                }
                self.codes.insert(c.id, c.clone());
            }
            CodeDeleted(c) => {
                if self.segments.values().any(|s| s.code_ids.contains(&c.id)) {
                    return Err(StateError::Conflict("code is applied to segments".into()));
                }
                self.codes
                    .remove(&c.id)
                    .ok_or(StateError::NotFound("code"))?;
            }
            SegmentCreated(s) => {
                if self.segments.contains_key(&s.id) {
                    return Err(StateError::Conflict(format!("segment {} exists", s.id)));
                }
                if !self.documents.contains_key(&s.document_id) {
                    return Err(StateError::NotFound("document"));
                }
                self.segments.insert(s.id, s.clone());
            }
            SegmentDeleted(s) => {
                self.segments
                    .remove(&s.id)
                    .ok_or(StateError::NotFound("segment"))?;
            }
            AlertRaised(a) => {
                if self.alerts.contains_key(&a.alert.id) {
                    return Err(StateError::Conflict(format!("alert {} exists", a.alert.id)));
                }
                self.alerts.insert(a.alert.id, (**a).clone());
            }
            AlertDismissed { alert_id, at } => {
                let a = self
                    .alerts
                    .get_mut(alert_id)
                    .ok_or(StateError::NotFound("alert"))?;
                if a.dismissed_at.is_some() {
                    return Err(StateError::Conflict("alert already dismissed".into()));
                }
                a.dismissed_at = Some(*at);
            }
            DisagreementResolved(r) => {
                if self.resolutions.contains_key(&r.id) {
                    return Err(StateError::Conflict(format!("resolution {} exists", r.id)));
                }
                self.resolutions.insert(r.id, r.clone());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    State(#[from] StateError),
    #[error("history log: {0}")]
    Io(#[from] std::io::Error),
    #[error("history log entry {line}: {source}")]
    Corrupt {
        line: usize,
        source: serde_json::Error,
    },
}

struct Inner {
    state: RelationalState,
    log: Vec<EditHistoryEntry>,
    file: Option<File>,
}

/// Relational store. Writes are serialised; each commit validates, applies
/// and logs one change atomically.
pub struct Store {
    inner: RwLock<Inner>,
}

impl Store {
    pub fn in_memory() -> Self {
        Self {
            inner: RwLock::new(Inner {
                state: RelationalState::default(),
                log: Vec::new(),
                file: None,
            }),
        }
    }

    /// Opens (or creates) a history log and replays it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref();
        let mut log = Vec::new();
        if path.exists() {
            for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: EditHistoryEntry =
                    serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
                        line: i + 1,
                        source,
                    })?;
                log.push(entry);
            }
        }
        let state = RelationalState::replay(&log)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: RwLock::new(Inner {
                state,
                log,
                file: Some(file),
            }),
        })
    }

    pub fn read<T>(&self, f: impl FnOnce(&RelationalState) -> T) -> T {
        f(&self.inner.read().state)
    }

    pub fn commit(
        &self,
        actor: Option<Uuid>,
        change: Change,
    ) -> Result<EditHistoryEntry, StoreError> {
        let mut inner = self.inner.write();
        inner.state.apply(&change)?;
        let (entity, entity_id, action, project_id) = change.describe();
        let project_id = project_id.or_else(|| match &change {
            Change::AlertDismissed { alert_id, .. } => {
                inner.state.alerts.get(alert_id).map(|a| a.alert.project_id)
            }
            _ => None,
        });
        let entry = EditHistoryEntry {
            id: Uuid::new_v4(),
            seq: inner.log.len() as u64 + 1,
            project_id,
            actor,
            entity,
            entity_id,
            action,
            payload: change,
            at: Utc::now(),
        };
        if let Some(file) = inner.file.as_mut() {
            let mut line = serde_json::to_vec(&entry).expect("history entries serialise");
            line.push(b'\n');
            if let Err(e) = file.write_all(&line).and_then(|_| file.flush()) {
                // keep memory and disk in step
                inner.state = RelationalState::replay(&inner.log).expect("logged history replays");
                return Err(e.into());
            }
        }
        inner.log.push(entry.clone());
        Ok(entry)
    }

    pub fn history(&self) -> Vec<EditHistoryEntry> {
        self.inner.read().log.clone()
    }

    pub fn project_history(&self, project_id: Uuid, after_seq: u64) -> Vec<EditHistoryEntry> {
        self.inner
            .read()
            .log
            .iter()
            .filter(|e| e.seq > after_seq && e.project_id == Some(project_id))
            .cloned()
            .collect()
    }

    pub fn history_len(&self) -> usize {
        self.inner.read().log.len()
    }
}
