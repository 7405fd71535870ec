use std::collections::HashMap;
use std::fs;
use std::ops::Deref;
use std::sync::Arc;

use codeaudit_core::api::FacetReport;
use codeaudit_core::pipeline::{Auditor, ReflectionStore};
use codeaudit_core::provider::mock::{Delayed, GroundedMockChat, MockEmbedder};
use codeaudit_core::provider::Gateway;
use codeaudit_core::vector_store::VectorStore;
use parking_lot::Mutex;
use uuid::Uuid;

use crate::auth::Sessions;
use crate::config::{ProviderChoice, ServerConfig};
use crate::events::{EventHub, SegmentSequencer};
use crate::queue::JobQueue;
use crate::store::Store;

/// Everything request handlers and background workers share.
pub struct Services {
    pub store: Store,
    pub sessions: Sessions,
    pub hub: EventHub,
    pub auditor: Auditor,
    pub sequencer: SegmentSequencer,
    /// Latest facet result per `(project, code)`. Derived data, recomputable.
    pub facets: Mutex<HashMap<(Uuid, Uuid), FacetReport>>,
}

#[derive(Clone)]
pub struct AppState {
    pub services: Arc<Services>,
    pub queue: Arc<JobQueue>,
}

impl Deref for AppState {
    type Target = Services;

    fn deref(&self) -> &Services {
        &self.services
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error(transparent)]
    Config(#[from] codeaudit_core::provider::ConfigError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
    #[error(transparent)]
    Vectors(#[from] codeaudit_core::vector_store::StoreError),
    #[error(transparent)]
    Reflections(#[from] codeaudit_core::pipeline::ReflectionStoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn gateway_for(choice: &ProviderChoice) -> Result<Gateway, StartupError> {
    Ok(match choice {
        ProviderChoice::Mock {
            dim,
            seed,
            delay,
            embed_delay,
        } => Gateway::new(
            Arc::new(Delayed::new(MockEmbedder::new(*dim, *seed), *embed_delay)),
            Arc::new(Delayed::new(GroundedMockChat, *delay)),
        ),
        ProviderChoice::Http(config) => Gateway::from_config(config)?,
    })
}

impl AppState {
    pub fn build(config: &ServerConfig) -> Result<Self, StartupError> {
        Self::with_gateway(config, gateway_for(&config.provider)?)
    }

    /// Like [`AppState::build`] with an explicit model gateway.
    pub fn with_gateway(config: &ServerConfig, gateway: Gateway) -> Result<Self, StartupError> {
        let (store, vectors, reflections) = match &config.data_dir {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                (
                    Store::open(dir.join("history.jsonl"))?,
                    VectorStore::open(dir.join("vectors"))?,
                    ReflectionStore::open(dir.join("reflections.jsonl"))?,
                )
            }
            None => (
                Store::in_memory(),
                VectorStore::in_memory(),
                ReflectionStore::in_memory(),
            ),
        };
        // score records may only reference codes the relational store knows
        store.read(|s| {
            for id in s.codes.keys() {
                vectors.register_code(*id);
            }
        });
        let services = Arc::new(Services {
            store,
            sessions: Sessions::new(config.token_ttl),
            hub: EventHub::default(),
            auditor: Auditor::new(Arc::new(gateway), Arc::new(vectors), Arc::new(reflections)),
            sequencer: SegmentSequencer::default(),
            facets: Mutex::new(HashMap::new()),
        });
        let queue = JobQueue::new(services.clone(), config.workers);
        Ok(Self { services, queue })
    }
}
