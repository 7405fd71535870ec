//! Reflection cadence and the versioned reflection store.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use uuid::Uuid;

use super::AuditConfig;
use crate::provider::CodeReflection;

/// True when a code that has just reached `segment_count` segments is due a
/// reflection: at the threshold and every `reflection_every` additions after.
pub fn maybe_schedule_reflection(segment_count: usize, config: &AuditConfig) -> bool {
    segment_count >= config.reflection_threshold
        && (segment_count - config.reflection_threshold)
            .is_multiple_of(config.reflection_every.max(1))
}

#[derive(Debug, thiserror::Error)]
pub enum ReflectionStoreError {
    #[error("reflection version {found} for code {code_id} does not follow {expected}")]
    VersionGap {
        code_id: Uuid,
        expected: u32,
        found: u32,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Default)]
pub struct ReflectionStore {
    path: Option<PathBuf>,
    by_code: Mutex<HashMap<Uuid, Vec<CodeReflection>>>,
}

impl ReflectionStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads (or starts) a JSON-lines reflection log at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ReflectionStoreError> {
        let path = path.as_ref().to_path_buf();
        let store = Self {
            path: None,
            by_code: Mutex::new(HashMap::new()),
        };
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    store.insert(serde_json::from_str(&line)?)?;
                }
            }
        }
        Ok(Self {
            path: Some(path),
            ..store
        })
    }

    /// Stores a reflection whose version must be exactly one above the
    /// latest stored version for its code.
    pub fn insert(&self, reflection: CodeReflection) -> Result<(), ReflectionStoreError> {
        let mut map = self.by_code.lock();
        let versions = map.entry(reflection.code_id).or_default();
        let expected = versions.last().map_or(1, |r| r.version + 1);
        if reflection.version != expected {
            return Err(ReflectionStoreError::VersionGap {
                code_id: reflection.code_id,
                expected,
                found: reflection.version,
            });
        }
        if let Some(path) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(&reflection)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        versions.push(reflection);
        Ok(())
    }

    pub fn latest(&self, code_id: Uuid) -> Option<CodeReflection> {
        self.by_code
            .lock()
            .get(&code_id)
            .and_then(|v| v.last().cloned())
    }

    pub fn history(&self, code_id: Uuid) -> Vec<CodeReflection> {
        self.by_code
            .lock()
            .get(&code_id)
            .cloned()
            .unwrap_or_default()
    }
}
