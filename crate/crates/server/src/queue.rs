//! Background work. Jobs touching the same code run one at a time in
//! arrival order; different codes proceed in parallel up to a worker limit.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Arc;

use chrono::Utc;
use codeaudit_core::api::{AlertRecord, EventKind, FacetReport};
use codeaudit_core::facets::{discover_facets, FacetSegment};
use codeaudit_core::pipeline::context::{span_text, surrounding_text};
use codeaudit_core::pipeline::{AuditJob, CodeInfo, SegmentInput};
use parking_lot::Mutex;
use serde_json::{json, Value};
use tokio::sync::{watch, Semaphore};
use uuid::Uuid;

use crate::state::Services;
use crate::store::Change;

#[derive(Debug, Clone)]
pub enum Job {
    Audit {
        job: AuditJob,
        ticket: u64,
    },
    Facets {
        id: Uuid,
        project_id: Uuid,
        code_id: Uuid,
        user_id: Uuid,
        seed: u64,
    },
}

impl Job {
    fn code_id(&self) -> Uuid {
        match self {
            Job::Audit { job, .. } => job.code_id,
            Job::Facets { code_id, .. } => *code_id,
        }
    }
}

#[derive(Default)]
struct Lanes {
    queued: HashMap<Uuid, VecDeque<Job>>,
    running: HashSet<Uuid>,
}

pub struct JobQueue {
    services: Arc<Services>,
    lanes: Mutex<Lanes>,
    permits: Semaphore,
    pending: watch::Sender<usize>,
}

impl JobQueue {
    pub fn new(services: Arc<Services>, workers: usize) -> Arc<Self> {
        Arc::new(Self {
            services,
            lanes: Mutex::new(Lanes::default()),
            permits: Semaphore::new(workers.max(1)),
            pending: watch::channel(0).0,
        })
    }

    /// Queues an audit, taking its per-segment publication ticket now.
    pub fn enqueue_audit(self: &Arc<Self>, job: AuditJob) {
        let ticket = self.services.sequencer.ticket(job.segment_id);
        self.enqueue(Job::Audit { job, ticket });
    }

    pub fn enqueue(self: &Arc<Self>, job: Job) {
        let code = job.code_id();
        self.pending.send_modify(|n| *n += 1);
        let start = {
            let mut lanes = self.lanes.lock();
            lanes.queued.entry(code).or_default().push_back(job);
            lanes.running.insert(code)
        };
        if start {
            let me = self.clone();
            tokio::spawn(async move { me.drain(code).await });
        }
    }

    async fn drain(self: Arc<Self>, code: Uuid) {
        loop {
            let next = {
                let mut lanes = self.lanes.lock();
                match lanes.queued.get_mut(&code).and_then(VecDeque::pop_front) {
                    Some(job) => Some(job),
                    None => {
                        lanes.queued.remove(&code);
                        lanes.running.remove(&code);
                        None
                    }
                }
            };
            let Some(job) = next else { return };
            {
                let _permit = self
                    .permits
                    .acquire()
                    .await
                    .expect("semaphore never closed");
                run(&self.services, job).await;
            }
            self.pending.send_modify(|n| *n -= 1);
        }
    }

    pub fn pending(&self) -> usize {
        *self.pending.borrow()
    }

    /// Resolves once no job is queued or running.
    pub async fn wait_idle(&self) {
        let mut rx = self.pending.subscribe();
        // the sender lives as long as self
        let _ = rx.wait_for(|n| *n == 0).await;
    }
}

async fn run(services: &Services, job: Job) {
    match job {
        Job::Audit { job, ticket } => {
            let events = run_audit(services, &job).await;
            for (project, kind, payload) in
                services.sequencer.complete(job.segment_id, ticket, events)
            {
                services.hub.publish(project, kind, payload);
            }
        }
        Job::Facets {
            id,
            project_id,
            code_id,
            user_id,
            seed,
        } => {
            let payload = run_facets(services, project_id, code_id, user_id, seed).await;
            let mut payload = payload;
            payload["job_id"] = json!(id);
            services
                .hub
                .publish(project_id, EventKind::FacetReady, payload);
        }
    }
}

async fn run_audit(services: &Services, job: &AuditJob) -> Vec<(Uuid, EventKind, Value)> {
    let prepared = services.store.read(|s| {
        let seg = s.segments.get(&job.segment_id)?;
        if !seg.code_ids.contains(&job.code_id) {
            return None;
        }
        let doc = s.documents.get(&seg.document_id)?;
        let project = s.projects.get(&seg.project_id)?;
        let info = |c: &codeaudit_core::api::CodeRecord| CodeInfo {
            id: c.id,
            name: c.name.clone(),
            definition: c.definition.clone(),
        };
        let code = info(s.codes.get(&job.code_id)?);
        let config = project.settings.clone();
        let input = SegmentInput {
            project_id: seg.project_id,
            user_id: seg.coder_id,
            segment_id: seg.id,
            document_id: seg.document_id,
            code,
            text: span_text(&doc.body, seg.char_start, seg.char_end),
            surrounding_text: surrounding_text(
                &doc.body,
                seg.char_start,
                seg.char_end,
                config.surrounding_chars,
            ),
            coded_at: seg.created_at,
            project_codes: s
                .project_codes(seg.project_id)
                .into_iter()
                .map(info)
                .collect(),
        };
        Some((input, config))
    });
    let Some((input, config)) = prepared else {
        tracing::debug!(segment_id = %job.segment_id, "segment or code gone, skipping audit");
        return Vec::new();
    };
    services.auditor.vectors().register_code(job.code_id);
    let outcome = match services.auditor.process(&input, job.trigger, &config).await {
        Ok(o) => o,
        Err(e) => {
            tracing::error!(error = %e, segment_id = %job.segment_id, code_id = %job.code_id, "audit failed");
            return Vec::new();
        }
    };
    let record = AlertRecord {
        alert: outcome.alert,
        dismissed_at: None,
    };
    if let Err(e) = services
        .store
        .commit(None, Change::AlertRaised(Box::new(record.clone())))
    {
        tracing::error!(error = %e, "could not record alert");
        return Vec::new();
    }
    let mut events = vec![(
        input.project_id,
        EventKind::AuditAlert,
        serde_json::to_value(&record).expect("alerts serialise"),
    )];
    if let Some(r) = outcome.reflection {
        events.push((
            input.project_id,
            EventKind::ReflectionReady,
            json!({ "code_id": r.code_id, "user_id": input.user_id, "reflection": r }),
        ));
    }
    events
}

async fn run_facets(
    services: &Services,
    project_id: Uuid,
    code_id: Uuid,
    user_id: Uuid,
    seed: u64,
) -> Value {
    let records = services
        .auditor
        .vectors()
        .records_for_code(user_id, code_id)
        .unwrap_or_default();
    let segments: Vec<FacetSegment> = records
        .into_iter()
        .map(|r| FacetSegment {
            segment_id: r.segment_id,
            text: r.text,
            vector: r.vector,
        })
        .collect();
    match discover_facets(services.auditor.gateway(), code_id, &segments, seed).await {
        Ok(result) => {
            let report = FacetReport {
                user_id,
                computed_at: Utc::now(),
                result,
            };
            services
                .facets
                .lock()
                .insert((project_id, code_id), report.clone());
            json!({ "code_id": code_id, "user_id": user_id, "facets": report })
        }
        Err(e) => json!({ "code_id": code_id, "user_id": user_id, "error": e.to_string() }),
    }
}
