//! Per-user embedding collections and the append-only score history.
//!
//! Search is an exact full scan. Collections are optionally mirrored to disk
//! as one binary row file per user plus a JSON sidecar; score records go to an
//! append-only JSON-lines log.
//!
//! Row file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic  b"CAVS"
//! 4       4     format version (u32, currently 1)
//! 8       4     element width in bytes (u32, 8 = f64)
//! 12      4     dimension d (u32)
//! 16      8     row count (u64)
//! 24      ..    row count * d elements, row-major
//! ```
//!
//! The sidecar `<user>.meta.json` holds the record metadata in row order.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::scoring::{Band, EmbeddingVector, ScoringError};

pub const MAGIC: [u8; 4] = *b"CAVS";
pub const FORMAT_VERSION: u32 = 1;
const ELEMENT_WIDTH: u32 = 8;
const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dimension mismatch: collection has {expected}, record has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no collection for user {0}")]
    CollectionNotFound(Uuid),
    #[error("unknown code {0}")]
    CodeNotFound(Uuid),
    #[error("consistency score {0} already exists; history is append-only")]
    ImmutableHistory(Uuid),
    #[error("vector is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("corrupt collection file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEmbeddingRecord {
    pub segment_id: Uuid,
    pub user_id: Uuid,
    pub code_id: Uuid,
    pub document_id: Uuid,
    pub vector: EmbeddingVector,
    pub coded_at: DateTime<Utc>,
    /// Segment text, kept so audit contexts can quote prior segments.
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditTrigger {
    NewCode,
    SiblingReaudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyScoreRecord {
    pub id: Uuid,
    pub project_id: Uuid,
    pub user_id: Uuid,
    pub segment_id: Uuid,
    pub code_id: Uuid,
    pub centroid_similarity: Option<f64>,
    pub drift_delta: Option<f64>,
    pub band: Option<Band>,
    pub llm_score: Option<f64>,
    pub final_score: Option<f64>,
    pub grounded: bool,
    pub clamped: bool,
    pub pseudo_centroid: bool,
    pub trigger: AuditTrigger,
    /// sha256 of the prompt template that produced the verdict, if any.
    pub prompt_hash: Option<String>,
    pub created_at: DateTime<Utc>,
}

#[derive(Default)]
struct Collection {
    dim: usize,
    records: Vec<SegmentEmbeddingRecord>,
}

impl Collection {
    fn position(&self, segment_id: Uuid, code_id: Uuid) -> Option<usize> {
        self.records
            .iter()
            .position(|r| r.segment_id == segment_id && r.code_id == code_id)
    }
}

#[derive(Default)]
struct ScoreLog {
    records: Vec<ConsistencyScoreRecord>,
    ids: HashSet<Uuid>,
    codes: HashSet<Uuid>,
}

pub struct VectorStore {
    root: Option<PathBuf>,
    collections: RwLock<HashMap<Uuid, Arc<RwLock<Collection>>>>,
    scores: Mutex<ScoreLog>,
}

impl VectorStore {
    pub fn in_memory() -> Self {
        Self {
            root: None,
            collections: RwLock::new(HashMap::new()),
            scores: Mutex::new(ScoreLog::default()),
        }
    }

    /// Opens (or creates) a store rooted at `dir`, loading every collection
    /// and the score log found there.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let root = dir.as_ref().to_path_buf();
        fs::create_dir_all(root.join("collections"))?;
        let mut collections = HashMap::new();
        for entry in fs::read_dir(root.join("collections"))? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("vec") {
                continue;
            }
            let Some(user_id) = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| Uuid::parse_str(s).ok())
            else {
                continue;
            };
            let collection = read_collection(&path)?;
            collections.insert(user_id, Arc::new(RwLock::new(collection)));
        }
        let mut log = ScoreLog::default();
        let scores_path = root.join("scores.jsonl");
        if scores_path.exists() {
            for line in BufReader::new(File::open(&scores_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: ConsistencyScoreRecord = serde_json::from_str(&line)?;
                log.ids.insert(record.id);
                log.codes.insert(record.code_id);
                log.records.push(record);
            }
        }
        Ok(Self {
            root: Some(root),
            collections: RwLock::new(collections),
            scores: Mutex::new(log),
        })
    }

    pub fn create_collection(&self, user_id: Uuid, dim: usize) -> Result<(), StoreError> {
        let mut map = self.collections.write();
        if let Some(existing) = map.get(&user_id) {
            let existing_dim = existing.read().dim;
            if existing_dim != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: existing_dim,
                    found: dim,
                });
            }
            return Ok(());
        }
        let collection = Collection {
            dim,
            records: Vec::new(),
        };
        self.persist(user_id, &collection)?;
        map.insert(user_id, Arc::new(RwLock::new(collection)));
        Ok(())
    }

    pub fn has_collection(&self, user_id: Uuid) -> bool {
        self.collections.read().contains_key(&user_id)
    }

    fn collection(&self, user_id: Uuid) -> Result<Arc<RwLock<Collection>>, StoreError> {
        self.collections
            .read()
            .get(&user_id)
            .cloned()
            .ok_or(StoreError::CollectionNotFound(user_id))
    }

    /// Inserts a record, replacing any earlier vector for the same
    /// `(segment, code)` pair.
    pub fn upsert_segment_embedding(
        &self,
        record: SegmentEmbeddingRecord,
    ) -> Result<(), StoreError> {
        if !record.vector.is_unit() {
            return Err(StoreError::NotUnit(record.vector.norm()));
        }
        let collection = self.collection(record.user_id)?;
        let mut guard = collection.write();
        if guard.dim != record.vector.dim() {
            return Err(StoreError::DimensionMismatch {
                expected: guard.dim,
                found: record.vector.dim(),
            });
        }
        let user_id = record.user_id;
        match guard.position(record.segment_id, record.code_id) {
            Some(i) => guard.records[i] = record,
            None => guard.records.push(record),
        }
        self.persist(user_id, &guard)
    }

    pub fn get(
        &self,
        user_id: Uuid,
        segment_id: Uuid,
        code_id: Uuid,
    ) -> Result<Option<SegmentEmbeddingRecord>, StoreError> {
        let collection = self.collection(user_id)?;
        let guard = collection.read();
        Ok(guard
            .position(segment_id, code_id)
            .map(|i| guard.records[i].clone()))
    }

    pub fn len(&self, user_id: Uuid) -> Result<usize, StoreError> {
        Ok(self.collection(user_id)?.read().records.len())
    }

    pub fn is_empty(&self, user_id: Uuid) -> Result<bool, StoreError> {
        Ok(self.len(user_id)? == 0)
    }

    /// The user's records for one code, oldest first.
    pub fn records_for_code(
        &self,
        user_id: Uuid,
        code_id: Uuid,
    ) -> Result<Vec<SegmentEmbeddingRecord>, StoreError> {
        let collection = self.collection(user_id)?;
        let guard = collection.read();
        let mut out: Vec<_> = guard
            .records
            .iter()
            .filter(|r| r.code_id == code_id)
            .cloned()
            .collect();
        // stable: equal timestamps keep insertion order
        out.sort_by_key(|r| r.coded_at);
        Ok(out)
    }

    /// Drops every embedding of a segment. Score history is left untouched.
    pub fn remove_segment(&self, user_id: Uuid, segment_id: Uuid) -> Result<usize, StoreError> {
        let collection = self.collection(user_id)?;
        let mut guard = collection.write();
        let before = guard.records.len();
        guard.records.retain(|r| r.segment_id != segment_id);
        let removed = before - guard.records.len();
        if removed > 0 {
            self.persist(user_id, &guard)?;
        }
        Ok(removed)
    }

    /// Exact top-`k` by cosine similarity, descending; ties go to the most
    /// recently coded record.
    pub fn knn(
        &self,
        user_id: Uuid,
        query: &EmbeddingVector,
        k: usize,
        code_filter: Option<Uuid>,
    ) -> Result<Vec<(SegmentEmbeddingRecord, f64)>, StoreError> {
        let collection = self.collection(user_id)?;
        let guard = collection.read();
        if guard.records.is_empty() || k == 0 {
            return Ok(Vec::new());
        }
        if guard.dim != query.dim() {
            return Err(StoreError::DimensionMismatch {
                expected: guard.dim,
                found: query.dim(),
            });
        }
        let mut scored = Vec::new();
        for (i, r) in guard.records.iter().enumerate() {
            if code_filter.is_some_and(|c| c != r.code_id) {
                continue;
            }
            scored.push((i, crate::scoring::cosine(query, &r.vector)?));
        }
        scored.sort_by(|(ia, sa), (ib, sb)| {
            sb.total_cmp(sa)
                .then_with(|| {
                    guard.records[*ib]
                        .coded_at
                        .cmp(&guard.records[*ia].coded_at)
                })
                .then_with(|| ib.cmp(ia))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (guard.records[i].clone(), s))
            .collect())
    }

    /// Every user's records, for export and diagnostics.
    pub fn users(&self) -> Vec<Uuid> {
        let mut users: Vec<_> = self.collections.read().keys().copied().collect();
        users.sort();
        users
    }

    pub fn register_code(&self, code_id: Uuid) {
        self.scores.lock().codes.insert(code_id);
    }

    pub fn append_consistency_score(
        &self,
        record: ConsistencyScoreRecord,
    ) -> Result<(), StoreError> {
        let mut log = self.scores.lock();
        if log.ids.contains(&record.id) {
            return Err(StoreError::ImmutableHistory(record.id));
        }
        if !log.codes.contains(&record.code_id) {
            return Err(StoreError::CodeNotFound(record.code_id));
        }
        if let Some(root) = &self.root {
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(root.join("scores.jsonl"))?;
            let mut line = serde_json::to_vec(&record)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        log.ids.insert(record.id);
        log.records.push(record);
        Ok(())
    }

    /// Chronological history for a code, optionally restricted to records
    /// created at or after `since`.
    pub fn score_history(
        &self,
        code_id: Uuid,
        since: Option<DateTime<Utc>>,
    ) -> Result<Vec<ConsistencyScoreRecord>, StoreError> {
        let log = self.scores.lock();
        if !log.codes.contains(&code_id) {
            return Err(StoreError::CodeNotFound(code_id));
        }
        let mut out: Vec<_> = log
            .records
            .iter()
            .filter(|r| r.code_id == code_id && since.is_none_or(|s| r.created_at >= s))
            .cloned()
            .collect();
        out.sort_by_key(|r| r.created_at);
        Ok(out)
    }

    pub fn score_count(&self) -> usize {
        self.scores.lock().records.len()
    }

    fn persist(&self, user_id: Uuid, collection: &Collection) -> Result<(), StoreError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let dir = root.join("collections");
        write_collection(&dir.join(format!("{user_id}.vec")), collection)
    }
}

#[derive(Serialize, Deserialize)]
struct SidecarRecord {
    segment_id: Uuid,
    user_id: Uuid,
    code_id: Uuid,
    document_id: Uuid,
    coded_at: DateTime<Utc>,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    records: Vec<SidecarRecord>,
}

fn sidecar_path(vec_path: &Path) -> PathBuf {
    vec_path.with_extension("meta.json")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = BufWriter::new(File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(tmp, path)
}

fn write_collection(path: &Path, c: &Collection) -> Result<(), StoreError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + c.records.len() * c.dim * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ELEMENT_WIDTH.to_le_bytes());
    buf.extend_from_slice(&(c.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(c.records.len() as u64).to_le_bytes());
    for r in &c.records {
        for x in r.vector.values() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        records: c
            .records
            .iter()
            .map(|r| SidecarRecord {
                segment_id: r.segment_id,
                user_id: r.user_id,
                code_id: r.code_id,
                document_id: r.document_id,
                coded_at: r.coded_at,
                text: r.text.clone(),
            })
            .collect(),
    };
    write_atomic(&sidecar_path(path), &serde_json::to_vec(&sidecar)?)?;
    write_atomic(path, &buf)?;
    Ok(())
}

fn read_collection(path: &Path) -> Result<Collection, StoreError> {
    let corrupt = |reason: &str| StoreError::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != FORMAT_VERSION {
        return Err(corrupt("unsupported format version"));
    }
    if u32_at(8) != ELEMENT_WIDTH {
        return Err(corrupt("unsupported element width"));
    }
    let dim = u32_at(12) as usize;
    let rows = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != HEADER_LEN + rows * dim * 8 {
        return Err(corrupt("length does not match header"));
    }
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if sidecar.records.len() != rows {
        return Err(corrupt("sidecar row count does not match"));
    }
    let mut records = Vec::with_capacity(rows);
    for (i, meta) in sidecar.records.into_iter().enumerate() {
        let start = HEADER_LEN + i * dim * 8;
        let values = bytes[start..start + dim * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(SegmentEmbeddingRecord {
            segment_id: meta.segment_id,
            user_id: meta.user_id,
            code_id: meta.code_id,
            document_id: meta.document_id,
            vector: EmbeddingVector::new(values)?,
            coded_at: meta.coded_at,
            text: meta.text,
        });
    }
    Ok(Collection { dim, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::normalize;
    use chrono::Duration;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(s: i64) -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000 + s, 0).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize(&EmbeddingVector::new(v).unwrap()).unwrap()
    }

    fn rec(
        user: Uuid,
        seg: u128,
        code: u128,
        v: EmbeddingVector,
        at: i64,
    ) -> SegmentEmbeddingRecord {
        SegmentEmbeddingRecord {
            segment_id: Uuid::from_u128(seg),
            user_id: user,
            code_id: Uuid::from_u128(code),
            document_id: Uuid::nil(),
            vector: v,
            coded_at: t(at),
            text: format!("segment {seg}"),
        }
    }

    #[test]
    fn upsert_roundtrip_and_replace() {
        let store = VectorStore::in_memory();
        let user = Uuid::from_u128(1);
        store.create_collection(user, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = unit(&mut rng, 8);
        let b = unit(&mut rng, 8);
        store
            .upsert_segment_embedding(rec(user, 10, 20, a.clone(), 0))
            .unwrap();
        let got = store
            .get(user, Uuid::from_u128(10), Uuid::from_u128(20))
            .unwrap()
            .unwrap();
        assert_eq!(got.vector, a);

        let before = store.len(user).unwrap();
        store
            .upsert_segment_embedding(rec(user, 10, 20, b.clone(), 1))
            .unwrap();
        assert_eq!(store.len(user).unwrap(), before);
        let got = store
            .get(user, Uuid::from_u128(10), Uuid::from_u128(20))
            .unwrap()
            .unwrap();
        assert_eq!(got.vector, b);
    }

    #[test]
    fn collections_are_isolated_per_user() {
        let store = VectorStore::in_memory();
        let (ua, ub) = (Uuid::from_u128(1), Uuid::from_u128(2));
        store.create_collection(ua, 4).unwrap();
        store.create_collection(ub, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = unit(&mut rng, 4);
        store
            .upsert_segment_embedding(rec(ua, 1, 1, v.clone(), 0))
            .unwrap();
        assert!(store
            .get(ub, Uuid::from_u128(1), Uuid::from_u128(1))
            .unwrap()
            .is_none());
        assert!(store.knn(ub, &v, 5, None).unwrap().is_empty());
        assert!(matches!(
            store.knn(Uuid::from_u128(3), &v, 5, None),
            Err(StoreError::CollectionNotFound(_))
        ));
    }

    #[test]
    fn upsert_rejects_wrong_dimension() {
        let store = VectorStore::in_memory();
        let user = Uuid::from_u128(1);
        store.create_collection(user, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = store
            .upsert_segment_embedding(rec(user, 1, 1, unit(&mut rng, 5), 0))
            .unwrap_err();
        assert!(matches!(
            err,
            StoreError::DimensionMismatch {
                expected: 4,
                found: 5
            }
        ));
    }

    #[test]
    fn knn_examples() {
        let store = VectorStore::in_memory();
        let user = Uuid::from_u128(1);
        store.create_collection(user, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vs: Vec<_> = (0..5).map(|_| unit(&mut rng, 6)).collect();
        for (i, v) in vs.iter().enumerate() {
            store
                .upsert_segment_embedding(rec(user, i as u128, 1, v.clone(), i as i64))
                .unwrap();
        }
        let top = store.knn(user, &vs[3], 1, None).unwrap();
        assert_eq!(top[0].0.segment_id, Uuid::from_u128(3));
        assert!((top[0].1 - 1.0).abs() < 1e-12);

        let all = store.knn(user, &vs[0], 50, None).unwrap();
        assert_eq!(all.len(), 5);
        assert!(all.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn knn_ties_prefer_recent() {
        let store = VectorStore::in_memory();
        let user = Uuid::from_u128(1);
        store.create_collection(user, 2).unwrap();
        let v = EmbeddingVector::new(vec![1.0, 0.0]).unwrap();
        store
            .upsert_segment_embedding(rec(user, 1, 1, v.clone(), 0))
            .unwrap();
        store
            .upsert_segment_embedding(rec(user, 2, 1, v.clone(), 5))
            .unwrap();
        let top = store.knn(user, &v, 2, None).unwrap();
        assert_eq!(top[0].0.segment_id, Uuid::from_u128(2));
    }

    fn score(code: Uuid, at: DateTime<Utc>) -> ConsistencyScoreRecord {
        ConsistencyScoreRecord {
            id: Uuid::new_v4(),
            project_id: Uuid::nil(),
            user_id: Uuid::nil(),
            segment_id: Uuid::new_v4(),
            code_id: code,
            centroid_similarity: Some(0.9),
            drift_delta: None,
            band: Some(Band::Strong),
            llm_score: Some(0.9),
            final_score: Some(0.9),
            grounded: true,
            clamped: false,
            pseudo_centroid: false,
            trigger: AuditTrigger::NewCode,
            prompt_hash: None,
            created_at: at,
        }
    }

    #[test]
    fn score_history_is_append_only_and_ordered() {
        let store = VectorStore::in_memory();
        let (c1, c2) = (Uuid::from_u128(1), Uuid::from_u128(2));
        store.register_code(c1);
        store.register_code(c2);
        assert!(store.score_history(c1, None).unwrap().is_empty());

        let mut all = Vec::new();
        for i in 0..6 {
            let code = if i % 2 == 0 { c1 } else { c2 };
            let r = score(code, t(i));
            all.push(r.clone());
            store.append_consistency_score(r).unwrap();
        }
        let h1 = store.score_history(c1, None).unwrap();
        assert_eq!(h1.len(), 3);
        assert!(h1.windows(2).all(|w| w[0].created_at <= w[1].created_at));
        assert!(h1.iter().all(|r| r.code_id == c1));

        let err = store.append_consistency_score(all[0].clone()).unwrap_err();
        assert!(matches!(err, StoreError::ImmutableHistory(_)));
        assert_eq!(store.score_count(), 6);

        assert!(store.score_history(c1, Some(t(100))).unwrap().is_empty());
        assert_eq!(store.score_history(c1, Some(t(2))).unwrap().len(), 2);
        assert!(matches!(
            store.score_history(Uuid::from_u128(9), None),
            Err(StoreError::CodeNotFound(_))
        ));
    }

    #[test]
    fn segment_removal_keeps_history() {
        let store = VectorStore::in_memory();
        let user = Uuid::from_u128(1);
        let code = Uuid::from_u128(5);
        store.create_collection(user, 2).unwrap();
        store.register_code(code);
        let v = EmbeddingVector::new(vec![0.0, 1.0]).unwrap();
        store
            .upsert_segment_embedding(rec(user, 1, 5, v, 0))
            .unwrap();
        let mut s = score(code, t(1));
        s.segment_id = Uuid::from_u128(1);
        store.append_consistency_score(s).unwrap();
        assert_eq!(store.remove_segment(user, Uuid::from_u128(1)).unwrap(), 1);
        assert_eq!(store.len(user).unwrap(), 0);
        assert_eq!(store.score_history(code, None).unwrap().len(), 1);
    }

    #[test]
    fn disk_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let user = Uuid::from_u128(42);
        let code = Uuid::from_u128(7);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vectors: Vec<_> = (0..12).map(|_| unit(&mut rng, 16)).collect();
        {
            let store = VectorStore::open(dir.path()).unwrap();
            store.create_collection(user, 16).unwrap();
            store.register_code(code);
            for (i, v) in vectors.iter().enumerate() {
                store
                    .upsert_segment_embedding(rec(user, i as u128, 7, v.clone(), i as i64))
                    .unwrap();
            }
            store
                .append_consistency_score(score(code, t(0) + Duration::seconds(3)))
                .unwrap();
        }
        let reopened = VectorStore::open(dir.path()).unwrap();
        let records = reopened.records_for_code(user, code).unwrap();
        assert_eq!(records.len(), 12);
        for (r, v) in records.iter().zip(&vectors) {
            let a: Vec<u64> = r.vector.values().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = v.values().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(reopened.score_history(code, None).unwrap().len(), 1);

        let header = fs::read(dir.path().join("collections").join(format!("{user}.vec"))).unwrap();
        assert_eq!(&header[..4], b"CAVS");
        assert_eq!(
            u32::from_le_bytes(header[4..8].try_into().unwrap()),
            FORMAT_VERSION
        );
    }

    #[test]
    fn corrupt_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("collections")).unwrap();
        fs::write(
            dir.path()
                .join("collections")
                .join(format!("{}.vec", Uuid::from_u128(1))),
            b"nope",
        )
        .unwrap();
        assert!(matches!(
            VectorStore::open(dir.path()),
            Err(StoreError::Corrupt { .. })
        ));
    }
}
