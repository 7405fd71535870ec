//! Deterministic vector mathematics behind every consistency score.
//!
//! Everything here is a pure function over immutable inputs: centroids are
//! ℓ2-normalised means, similarity is the dot product of unit vectors, drift
//! compares the centroid of the oldest window against the newest one, and
//! code overlap is centroid-to-centroid cosine.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

/// Tolerance under which a vector counts as unit length.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("embedding vector is empty")]
    EmptyVector,
    #[error("embedding vector contains a non-finite value at index {0}")]
    NonFinite(usize),
    #[error("zero vector cannot be normalised")]
    DegenerateVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("code has no segments")]
    EmptyCode,
    #[error("mean of the code's embeddings is the zero vector")]
    DegenerateCentroid,
    #[error("code has fewer than {tau_min} segments and no definition to embed")]
    ColdStartUnavailable { tau_min: usize },
}

/// A fixed-dimension embedding. Values are always finite and `dim() > 0`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ScoringError> {
        if values.is_empty() {
            return Err(ScoringError::EmptyVector);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(ScoringError::NonFinite(i));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn dot(&self, other: &Self) -> Result<f64, ScoringError> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<_> = self.values.iter().take(4).collect();
        write!(f, "EmbeddingVector(dim={}, head={:?})", self.dim(), head)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = ScoringError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), ScoringError> {
    if expected != found {
        return Err(ScoringError::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, ScoringError> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(ScoringError::DegenerateVector);
    }
    Ok(EmbeddingVector {
        values: v.values.iter().map(|x| x / norm).collect(),
    })
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, ScoringError> {
    Ok(a.dot(b)?.clamp(-1.0, 1.0))
}

fn mean(vectors: &[EmbeddingVector]) -> Result<Vec<f64>, ScoringError> {
    let first = vectors.first().ok_or(ScoringError::EmptyCode)?;
    let dim = first.dim();
    let mut sum = vec![0.0; dim];
    for v in vectors {
        check_dim(dim, v.dim())?;
        for (s, x) in sum.iter_mut().zip(&v.values) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

/// ℓ2-normalised mean of `vectors`.
pub fn centroid(vectors: &[EmbeddingVector]) -> Result<EmbeddingVector, ScoringError> {
    let mean = EmbeddingVector {
        values: mean(vectors)?,
    };
    normalize(&mean).map_err(|_| ScoringError::DegenerateCentroid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCentroid {
    pub code_id: Uuid,
    pub mu: EmbeddingVector,
    pub n: usize,
    pub is_pseudo: bool,
    pub computed_at: DateTime<Utc>,
}

/// Centroid built from a code's stored embeddings.
pub fn code_centroid(
    code_id: Uuid,
    vectors: &[EmbeddingVector],
    at: DateTime<Utc>,
) -> Result<CodeCentroid, ScoringError> {
    Ok(CodeCentroid {
        code_id,
        mu: centroid(vectors)?,
        n: vectors.len(),
        is_pseudo: false,
        computed_at: at,
    })
}

/// Cold-start centroid: the embedded code definition stands in for the mean.
pub fn pseudo_centroid(
    code_id: Uuid,
    definition_embedding: &EmbeddingVector,
    segment_count: usize,
    at: DateTime<Utc>,
) -> Result<CodeCentroid, ScoringError> {
    Ok(CodeCentroid {
        code_id,
        mu: normalize(definition_embedding)?,
        n: segment_count,
        is_pseudo: true,
        computed_at: at,
    })
}

/// Chooses between the real centroid and the definition pseudo-centroid.
///
/// With at least `tau_min` stored segments the real centroid is always used;
/// below it the definition embedding is required.
pub fn resolve_centroid(
    code_id: Uuid,
    stored: &[EmbeddingVector],
    definition_embedding: Option<&EmbeddingVector>,
    tau_min: usize,
    at: DateTime<Utc>,
) -> Result<CodeCentroid, ScoringError> {
    if stored.len() >= tau_min && !stored.is_empty() {
        return code_centroid(code_id, stored, at);
    }
    match definition_embedding {
        Some(def) => pseudo_centroid(code_id, def, stored.len(), at),
        None => Err(ScoringError::ColdStartUnavailable { tau_min }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Band {
    Strong,
    Moderate,
    Flagged,
}

impl Band {
    pub fn as_str(self) -> &'static str {
        match self {
            Band::Strong => "strong",
            Band::Moderate => "moderate",
            Band::Flagged => "flagged",
        }
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandThresholds {
    pub strong: f64,
    pub moderate: f64,
}

impl Default for BandThresholds {
    fn default() -> Self {
        Self {
            strong: 0.85,
            moderate: 0.65,
        }
    }
}

/// A classified score together with the bounds of the band it fell in.
/// `upper` is inclusive for strong and exclusive otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyBand {
    pub band: Band,
    pub lower: f64,
    pub upper: f64,
}

pub fn classify_band(score: f64) -> ConsistencyBand {
    classify_band_with(score, BandThresholds::default())
}

/// Raw comparisons, no epsilon: a score equal to a threshold lands in the
/// higher band.
pub fn classify_band_with(score: f64, t: BandThresholds) -> ConsistencyBand {
    if score >= t.strong {
        ConsistencyBand {
            band: Band::Strong,
            lower: t.strong,
            upper: 1.0,
        }
    } else if score >= t.moderate {
        ConsistencyBand {
            band: Band::Moderate,
            lower: t.moderate,
            upper: t.strong,
        }
    } else {
        ConsistencyBand {
            band: Band::Flagged,
            lower: -1.0,
            upper: t.moderate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub window: usize,
    pub min_segments: usize,
}

impl Default for DriftParams {
    fn default() -> Self {
        Self {
            window: 5,
            min_segments: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub code_id: Uuid,
    /// `None` when the code has too few segments.
    pub delta: Option<f64>,
    pub window_size: usize,
    pub segment_count: usize,
    pub computed_at: DateTime<Utc>,
    pub applicable: bool,
}

/// Drift between the oldest and newest windows of a time-ordered sequence.
///
/// `segments` must be sorted ascending by coding time. Windows are taken
/// literally, so with exactly `2 * window` segments they partition the input.
pub fn temporal_drift(
    code_id: Uuid,
    segments: &[EmbeddingVector],
    params: DriftParams,
    at: DateTime<Utc>,
) -> Result<DriftReport, ScoringError> {
    let n = segments.len();
    let mut report = DriftReport {
        code_id,
        delta: None,
        window_size: params.window,
        segment_count: n,
        computed_at: at,
        applicable: false,
    };
    if n < params.min_segments.max(1) || n < params.window || params.window == 0 {
        return Ok(report);
    }
    let oldest = mean(&segments[..params.window])?;
    let newest = mean(&segments[n - params.window..])?;
    let dot: f64 = oldest.iter().zip(&newest).map(|(a, b)| a * b).sum();
    let denom = l2(&oldest) * l2(&newest);
    if denom == 0.0 {
        return Err(ScoringError::DegenerateCentroid);
    }
    let cos = (dot / denom).clamp(-1.0, 1.0);
    report.delta = Some(1.0 - cos);
    report.applicable = true;
    Ok(report)
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapPair {
    pub code_a: Uuid,
    pub code_b: Uuid,
    pub similarity: f64,
    pub flagged: bool,
}

pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.85;

/// All unordered centroid pairs; a pair is flagged when its similarity is
/// strictly above `threshold`.
pub fn pairwise_overlap(
    centroids: &[CodeCentroid],
    threshold: f64,
) -> Result<Vec<OverlapPair>, ScoringError> {
    let mut pairs = Vec::with_capacity(centroids.len() * centroids.len().saturating_sub(1) / 2);
    for (i, a) in centroids.iter().enumerate() {
        for b in &centroids[i + 1..] {
            let similarity = cosine(&a.mu, &b.mu)?;
            pairs.push(OverlapPair {
                code_a: a.code_id,
                code_b: b.code_id,
                similarity,
                flagged: similarity > threshold && a.code_id != b.code_id,
            });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    fn t0() -> DateTime<Utc> {
        DateTime::from_timestamp(1_700_000_000, 0).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let n = normalize(&v(&[3.0, 4.0])).unwrap();
        assert!((n.values()[0] - 0.6).abs() < 1e-15);
        assert!((n.values()[1] - 0.8).abs() < 1e-15);
        assert_eq!(
            normalize(&v(&[1.0, 0.0, 0.0])).unwrap(),
            v(&[1.0, 0.0, 0.0])
        );
    }

    #[test]
    fn normalize_rejects_zero() {
        assert_eq!(
            normalize(&v(&[0.0, 0.0])),
            Err(ScoringError::DegenerateVector)
        );
    }

    #[test]
    fn vector_rejects_nan_and_empty() {
        assert_eq!(EmbeddingVector::new(vec![]), Err(ScoringError::EmptyVector));
        assert_eq!(
            EmbeddingVector::new(vec![0.0, f64::NAN]),
            Err(ScoringError::NonFinite(1))
        );
        assert!(serde_json::from_str::<EmbeddingVector>("[]").is_err());
    }

    #[test]
    fn cosine_basic_cases() {
        let a = v(&[1.0, 0.0]);
        let b = v(&[0.0, 1.0]);
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine(&a, &b).unwrap(), 0.0);
        assert_eq!(cosine(&a, &v(&[-1.0, 0.0])).unwrap(), -1.0);
        assert!(matches!(
            cosine(&a, &v(&[1.0, 0.0, 0.0])),
            Err(ScoringError::DimensionMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn cosine_clamps_overshoot() {
        let a = v(&[1.0 + 1e-12, 0.0]);
        assert_eq!(cosine(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn centroid_examples() {
        let single = centroid(&[v(&[2.0, 0.0])]).unwrap();
        assert_eq!(single, v(&[1.0, 0.0]));
        let c = centroid(&[v(&[1.0, 0.0]), v(&[0.0, 1.0])]).unwrap();
        assert!((c.values()[0] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((c.values()[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(centroid(&[]), Err(ScoringError::EmptyCode));
        assert_eq!(
            centroid(&[v(&[1.0, 0.0]), v(&[-1.0, 0.0])]),
            Err(ScoringError::DegenerateCentroid)
        );
    }

    #[test]
    fn band_boundaries() {
        assert_eq!(classify_band(0.9).band, Band::Strong);
        assert_eq!(classify_band(0.85).band, Band::Strong);
        assert_eq!(classify_band(0.8499999).band, Band::Moderate);
        assert_eq!(classify_band(0.65).band, Band::Moderate);
        assert_eq!(classify_band(0.649).band, Band::Flagged);
        assert_eq!(classify_band(-1.0).band, Band::Flagged);
        assert_eq!(classify_band(1.0).band, Band::Strong);
    }

    #[test]
    fn drift_examples() {
        let id = Uuid::nil();
        let same = vec![v(&[0.6, 0.8]); 10];
        let r = temporal_drift(id, &same, DriftParams::default(), t0()).unwrap();
        assert!(r.applicable);
        assert_eq!(r.delta, Some(0.0));

        let r = temporal_drift(id, &same[..9], DriftParams::default(), t0()).unwrap();
        assert!(!r.applicable);
        assert_eq!(r.delta, None);

        let mut rot = vec![v(&[1.0, 0.0]); 5];
        rot.extend(vec![v(&[0.0, 1.0]); 5]);
        let r = temporal_drift(id, &rot, DriftParams::default(), t0()).unwrap();
        assert_eq!(r.delta, Some(1.0));
    }

    #[test]
    fn drift_uses_only_outer_windows() {
        // 12 segments: the two middle ones must not influence either window.
        let mut seq = vec![v(&[1.0, 0.0]); 5];
        seq.push(v(&[-1.0, 0.0]));
        seq.push(v(&[0.0, -1.0]));
        seq.extend(vec![v(&[1.0, 0.0]); 5]);
        let r = temporal_drift(Uuid::nil(), &seq, DriftParams::default(), t0()).unwrap();
        assert_eq!(r.delta, Some(0.0));
    }

    fn cc(id: u128, xs: &[f64]) -> CodeCentroid {
        code_centroid(Uuid::from_u128(id), &[v(xs)], t0()).unwrap()
    }

    #[test]
    fn overlap_examples() {
        let pairs = pairwise_overlap(&[cc(1, &[1.0, 0.0]), cc(2, &[1.0, 0.0])], 0.85).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].similarity, 1.0);
        assert!(pairs[0].flagged);

        let pairs = pairwise_overlap(&[cc(1, &[1.0, 0.0]), cc(2, &[0.0, 1.0])], 0.85).unwrap();
        assert_eq!(pairs[0].similarity, 0.0);
        assert!(!pairs[0].flagged);

        assert!(pairwise_overlap(&[cc(1, &[1.0, 0.0])], 0.85)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn overlap_threshold_is_strict() {
        // A unit vector at cosine 0.85 from e1, renormalised so the dot product
        // evaluates to exactly the threshold.
        let y = (1.0f64 - 0.85 * 0.85).sqrt();
        let a = cc(1, &[1.0, 0.0]);
        let mut b = cc(2, &[0.85, y]);
        b.mu = EmbeddingVector::new(vec![0.85, y]).unwrap();
        let pairs = pairwise_overlap(&[a, b], 0.85).unwrap();
        assert_eq!(pairs[0].similarity, 0.85);
        assert!(!pairs[0].flagged);
    }

    #[test]
    fn cold_start_resolution() {
        let id = Uuid::from_u128(7);
        let def = v(&[0.0, 1.0]);
        let c = resolve_centroid(id, &[], Some(&def), 3, t0()).unwrap();
        assert!(c.is_pseudo);
        assert_eq!(c.n, 0);
        assert_eq!(c.mu, def);

        let two = [v(&[1.0, 0.0]), v(&[1.0, 0.0])];
        let c = resolve_centroid(id, &two, Some(&def), 3, t0()).unwrap();
        assert!(c.is_pseudo);
        assert_eq!(c.n, 2);

        let three = [v(&[1.0, 0.0]), v(&[1.0, 0.0]), v(&[1.0, 0.0])];
        let c = resolve_centroid(id, &three, Some(&def), 3, t0()).unwrap();
        assert!(!c.is_pseudo);
        assert_eq!(c.mu, v(&[1.0, 0.0]));

        assert_eq!(
            resolve_centroid(id, &two, None, 3, t0()),
            Err(ScoringError::ColdStartUnavailable { tau_min: 3 })
        );
    }
}
