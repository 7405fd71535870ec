use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{IcrError, RatingMatrix};
use crate::provider::{Gateway, ResolutionAction, ResolutionSuggestion};

/// Category for a coder who read the document but left a unit uncoded.
pub const UNCODED: &str = "uncoded";

/// Spans whose Jaccard overlap reaches this are the same unit.
pub const DEFAULT_ALIGN_THRESHOLD: f64 = 0.8;

/// One code applied by one coder to a half-open character range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodedSpan {
    pub segment_id: Uuid,
    pub coder_id: Uuid,
    pub code_id: Uuid,
    pub start: usize,
    pub end: usize,
}

impl CodedSpan {
    fn overlaps(&self, other: &CodedSpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Jaccard index of two half-open ranges.
pub fn jaccard(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter = a.1.min(b.1).saturating_sub(a.0.max(b.0));
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisagreementKind {
    CodeMismatch,
    BoundaryMismatch,
    MissingCode,
}

/// A disagreement between two coders on one document. `segments`, `spans`
/// and `codes` line up with `parties`; for a missing code only the first
/// party has a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub document_id: Uuid,
    pub kind: DisagreementKind,
    pub parties: Vec<Uuid>,
    pub segments: Vec<Uuid>,
    pub spans: Vec<(usize, usize)>,
    pub codes: Vec<Uuid>,
    pub jaccard: Option<f64>,
}

impl Disagreement {
    fn pair(document_id: Uuid, kind: DisagreementKind, x: &CodedSpan, y: &CodedSpan) -> Self {
        Self {
            document_id,
            kind,
            parties: vec![x.coder_id, y.coder_id],
            segments: vec![x.segment_id, y.segment_id],
            spans: vec![(x.start, x.end), (y.start, y.end)],
            codes: vec![x.code_id, y.code_id],
            jaccard: Some(jaccard((x.start, x.end), (y.start, y.end))),
        }
    }

    /// Stable key that ignores party order.
    fn key(&self) -> (DisagreementKind, Vec<Uuid>, Vec<Uuid>) {
        let mut segs = self.segments.clone();
        segs.sort();
        let mut codes = self.codes.clone();
        codes.sort();
        (self.kind, segs, codes)
    }
}

/// Compares coder A's and coder B's spans on one document.
///
/// Missing-code parties are `[coder who coded, coder who did not]`; pair
/// kinds list coder A first.
///
/// A span with no overlapping span from the other coder is a missing code.
/// Otherwise, if the other coder used the same code on an overlapping span,
/// the best-matching such span must reach `threshold` Jaccard or the pair is
/// a boundary mismatch. If the other coder never used that code there, the
/// pair with the largest overlap is a code mismatch.
pub fn classify_disagreements(
    document_id: Uuid,
    (coder_a, a): (Uuid, &[CodedSpan]),
    (coder_b, b): (Uuid, &[CodedSpan]),
    threshold: f64,
) -> Vec<Disagreement> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (mine, theirs, other_coder, mine_first) in [(a, b, coder_b, true), (b, a, coder_a, false)] {
        for x in mine {
            let overlapping: Vec<&CodedSpan> = theirs.iter().filter(|y| x.overlaps(y)).collect();
            let found = if overlapping.is_empty() {
                Some(Disagreement {
                    document_id,
                    kind: DisagreementKind::MissingCode,
                    parties: vec![x.coder_id, other_coder],
                    segments: vec![x.segment_id],
                    spans: vec![(x.start, x.end)],
                    codes: vec![x.code_id],
                    jaccard: None,
                })
            } else {
                let best_same = best_by_jaccard(
                    x,
                    overlapping
                        .iter()
                        .copied()
                        .filter(|y| y.code_id == x.code_id),
                );
                match best_same {
                    Some((y, j)) if j < threshold => Some(Disagreement::pair(
                        document_id,
                        DisagreementKind::BoundaryMismatch,
                        x,
                        y,
                    )),
                    Some(_) => None,
                    None => best_by_jaccard(x, overlapping.iter().copied()).map(|(y, _)| {
                        Disagreement::pair(document_id, DisagreementKind::CodeMismatch, x, y)
                    }),
                }
            };
            let Some(mut d) = found else { continue };
            if !mine_first && d.segments.len() == 2 {
                d.parties.reverse();
                d.segments.reverse();
                d.spans.reverse();
                d.codes.reverse();
            }
            if seen.insert(d.key()) {
                out.push(d);
            }
        }
    }
    out.sort_by(|p, q| {
        let ps = p.spans.iter().map(|s| s.0).min();
        let qs = q.spans.iter().map(|s| s.0).min();
        (ps, p.key()).cmp(&(qs, q.key()))
    });
    out
}

/// The candidate with the highest Jaccard against `x`; ties go to the
/// smaller segment id so the choice does not depend on input order.
fn best_by_jaccard<'a>(
    x: &CodedSpan,
    candidates: impl Iterator<Item = &'a CodedSpan>,
) -> Option<(&'a CodedSpan, f64)> {
    candidates
        .map(|y| (y, jaccard((x.start, x.end), (y.start, y.end))))
        .max_by(|(y1, j1), (y2, j2)| {
            j1.total_cmp(j2)
                .then_with(|| y2.segment_id.cmp(&y1.segment_id))
        })
}

/// All coding on one document, plus the coders who worked on it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DocumentCoding {
    pub document_id: Uuid,
    /// Coders who coded anything in the document or were assigned it.
    pub coders: Vec<Uuid>,
    pub spans: Vec<CodedSpan>,
}

/// Turns free-span coding into a rating matrix.
///
/// Spans on a document are grouped into units by single-link alignment at
/// `threshold` Jaccard. In each unit a coder's rating is the smallest code id
/// they applied there, [`UNCODED`] if they worked on the document but coded
/// nothing in the unit, and missing if they never worked on the document.
pub fn build_rating_matrix(
    documents: &[DocumentCoding],
    coders: &[Uuid],
    threshold: f64,
) -> Result<RatingMatrix, IcrError> {
    let mut code_ids = BTreeSet::new();
    for d in documents {
        code_ids.extend(d.spans.iter().map(|s| s.code_id));
    }
    let mut categories: Vec<String> = code_ids.iter().map(Uuid::to_string).collect();
    categories.push(UNCODED.to_string());
    let category_of: BTreeMap<Uuid, usize> =
        code_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let uncoded = categories.len() - 1;

    let mut items = Vec::new();
    let mut cells = Vec::new();
    for doc in documents {
        let participants: HashSet<Uuid> = doc
            .coders
            .iter()
            .copied()
            .chain(doc.spans.iter().map(|s| s.coder_id))
            .collect();
        for unit in align_units(&doc.spans, threshold) {
            let members: Vec<&CodedSpan> = unit.iter().map(|&i| &doc.spans[i]).collect();
            let start = members.iter().map(|s| s.start).min().unwrap_or(0);
            let end = members.iter().map(|s| s.end).max().unwrap_or(0);
            items.push(format!("{}:{start}-{end}", doc.document_id));
            cells.push(
                coders
                    .iter()
                    .map(|coder| {
                        let applied = members
                            .iter()
                            .filter(|s| s.coder_id == *coder)
                            .map(|s| s.code_id)
                            .min();
                        match applied {
                            Some(code) => Some(category_of[&code]),
                            None if participants.contains(coder) => Some(uncoded),
                            None => None,
                        }
                    })
                    .collect(),
            );
        }
    }
    if items.is_empty() {
        return Err(IcrError::NoItems);
    }
    RatingMatrix::new(
        items,
        coders.iter().map(Uuid::to_string).collect(),
        categories,
        cells,
    )
}

/// Connected components of the "Jaccard ≥ threshold" graph, ordered by
/// first span start.
fn align_units(spans: &[CodedSpan], threshold: f64) -> Vec<Vec<usize>> {
    let n = spans.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            let (x, y) = (&spans[i], &spans[j]);
            if jaccard((x.start, x.end), (y.start, y.end)) >= threshold {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
    }
    let mut units: Vec<Vec<usize>> = groups.into_values().collect();
    units.sort_by_key(|u| u.iter().map(|&i| (spans[i].start, spans[i].end)).min());
    units
}

/// Asks the reasoning model how to settle `disagreement`. Any provider or
/// parse failure becomes a `discuss` suggestion with a plain summary.
pub async fn resolution_suggestion(
    gateway: &Gateway,
    disagreement: &Disagreement,
    context: serde_json::Value,
) -> ResolutionSuggestion {
    let payload = serde_json::json!({
        "disagreement": disagreement,
        "context": context,
    });
    match gateway.resolution_suggestion(&payload).await {
        Ok(s) => s,
        Err(e) => {
            tracing::warn!(error = %e, "resolution suggestion unavailable");
            ResolutionSuggestion {
                action: ResolutionAction::Discuss,
                suggestion: fallback_summary(disagreement),
            }
        }
    }
}

fn fallback_summary(d: &Disagreement) -> String {
    let spans: Vec<String> = d.spans.iter().map(|(s, e)| format!("[{s}, {e})")).collect();
    match d.kind {
        DisagreementKind::CodeMismatch => format!(
            "The coders applied different codes to overlapping text at {}. Discuss which code fits.",
            spans.join(" and ")
        ),
        DisagreementKind::BoundaryMismatch => format!(
            "The coders applied the same code with different boundaries ({}). Agree where the segment starts and ends.",
            spans.join(" vs ")
        ),
        DisagreementKind::MissingCode => format!(
            "Only one coder coded the text at {}. Discuss whether it should be coded.",
            spans.join(", ")
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::mock::{MockEmbedder, ScriptedChat};
    use crate::provider::ProviderError;
    use proptest::prelude::*;
    use std::sync::Arc;

    const A: Uuid = Uuid::from_u128(0xA);
    const B: Uuid = Uuid::from_u128(0xB);
    const DOC: Uuid = Uuid::from_u128(0xD);

    fn span(seg: u128, coder: Uuid, code: u128, start: usize, end: usize) -> CodedSpan {
        CodedSpan {
            segment_id: Uuid::from_u128(seg),
            coder_id: coder,
            code_id: Uuid::from_u128(code),
            start,
            end,
        }
    }

    /// Set-based interval Jaccard.
    fn brute_jaccard(a: (usize, usize), b: (usize, usize)) -> f64 {
        let sa: HashSet<usize> = (a.0..a.1).collect();
        let sb: HashSet<usize> = (b.0..b.1).collect();
        sa.intersection(&sb).count() as f64 / sa.union(&sb).count() as f64
    }

    #[test]
    fn jaccard_matches_set_oracle() {
        for (a, b) in [
            ((0, 100), (0, 60)),
            ((10, 20), (15, 40)),
            ((0, 5), (5, 9)),
            ((3, 9), (3, 9)),
        ] {
            assert!((jaccard(a, b) - brute_jaccard(a, b)).abs() < 1e-12);
        }
        assert!((jaccard((0, 100), (0, 60)) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn same_span_different_codes() {
        let d = classify_disagreements(
            DOC,
            (A, &[span(1, A, 1, 0, 50)]),
            (B, &[span(2, B, 2, 0, 50)]),
            0.8,
        );
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DisagreementKind::CodeMismatch);
        assert_eq!(d[0].parties, vec![A, B]);
    }

    #[test]
    fn same_code_short_overlap_is_boundary() {
        let d = classify_disagreements(
            DOC,
            (A, &[span(1, A, 1, 0, 100)]),
            (B, &[span(2, B, 1, 0, 60)]),
            0.8,
        );
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DisagreementKind::BoundaryMismatch);
        assert!((d[0].jaccard.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn close_boundaries_agree() {
        let d = classify_disagreements(
            DOC,
            (A, &[span(1, A, 1, 0, 100)]),
            (B, &[span(2, B, 1, 0, 90)]),
            0.8,
        );
        assert!(d.is_empty());
    }

    #[test]
    fn one_sided_span_is_missing() {
        let d = classify_disagreements(
            DOC,
            (A, &[span(1, A, 1, 0, 10)]),
            (B, &[span(2, B, 1, 50, 60)]),
            0.8,
        );
        assert_eq!(d.len(), 2);
        assert!(d.iter().all(|x| x.kind == DisagreementKind::MissingCode));
        assert_eq!(d[0].parties, vec![A, B]);
        assert_eq!(d[1].parties, vec![B, A]);
    }

    fn spans_strategy(coder: Uuid, base: u128) -> impl Strategy<Value = Vec<CodedSpan>> {
        prop::collection::vec((0usize..80, 1usize..40, 1u128..4), 0..6).prop_map(move |v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (s, len, code))| span(base + i as u128, coder, code, s, s + len))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn symmetric_in_coder_order(a in spans_strategy(A, 100), b in spans_strategy(B, 200)) {
            let ab = classify_disagreements(DOC, (A, &a), (B, &b), 0.8);
            let ba = classify_disagreements(DOC, (B, &b), (A, &a), 0.8);
            prop_assert_eq!(ab.len(), ba.len());
            let swapped: Vec<_> = ba
                .into_iter()
                .map(|mut d| {
                    if d.segments.len() == 2 {
                        d.parties.reverse();
                        d.segments.reverse();
                        d.spans.reverse();
                        d.codes.reverse();
                    }
                    d
                })
                .collect();
            let key = |d: &Disagreement| (d.key(), d.parties.clone());
            let mut l: Vec<_> = ab.iter().map(key).collect();
            let mut r: Vec<_> = swapped.iter().map(key).collect();
            l.sort();
            r.sort();
            prop_assert_eq!(l, r);
        }
    }

    #[test]
    fn unitization_builds_expected_matrix() {
        let c = Uuid::from_u128(0xC);
        let doc = DocumentCoding {
            document_id: DOC,
            coders: vec![A, B],
            spans: vec![
                span(1, A, 1, 0, 100),
                span(2, B, 1, 5, 100),
                span(3, A, 2, 200, 250),
            ],
        };
        let m = build_rating_matrix(&[doc], &[A, B, c], DEFAULT_ALIGN_THRESHOLD).unwrap();
        assert_eq!(m.items.len(), 2);
        assert_eq!(m.categories.last().map(String::as_str), Some(UNCODED));
        assert_eq!(m.cells[0], vec![Some(0), Some(0), None]);
        assert_eq!(m.cells[1], vec![Some(1), Some(2), None]);
    }

    #[test]
    fn identical_coding_gives_perfect_statistics() {
        let mut spans = Vec::new();
        for i in 0..10u128 {
            let s = i as usize * 100;
            spans.push(span(i, A, i % 3, s, s + 50));
            spans.push(span(100 + i, B, i % 3, s, s + 50));
        }
        let doc = DocumentCoding {
            document_id: DOC,
            coders: vec![A, B],
            spans,
        };
        let m = build_rating_matrix(&[doc], &[A, B], DEFAULT_ALIGN_THRESHOLD).unwrap();
        assert_eq!(super::super::cohen_kappa(&m).unwrap(), 1.0);
        assert_eq!(super::super::krippendorff_alpha(&m).unwrap(), 1.0);
    }

    fn gateway(replies: Vec<Result<String, ProviderError>>) -> Gateway {
        Gateway::new(
            Arc::new(MockEmbedder::new(8, 1)),
            Arc::new(ScriptedChat::new(replies)),
        )
        .with_retry(crate::provider::RetryPolicy {
            max_attempts: 1,
            base_delay: std::time::Duration::ZERO,
        })
    }

    fn mismatch() -> Disagreement {
        classify_disagreements(
            DOC,
            (A, &[span(1, A, 1, 0, 50)]),
            (B, &[span(2, B, 2, 0, 50)]),
            0.8,
        )
        .remove(0)
    }

    #[tokio::test]
    async fn scripted_adopt_a_is_surfaced() {
        let g = gateway(vec![Ok(
            r#"{"action":"adopt_a","suggestion":"Coder A's code fits."}"#.into(),
        )]);
        let s = resolution_suggestion(&g, &mismatch(), serde_json::json!({})).await;
        assert_eq!(s.action, ResolutionAction::AdoptA);
    }

    #[tokio::test]
    async fn unparseable_or_out_of_enum_falls_back_to_discuss() {
        for bad in [
            "nonsense",
            r#"{"action":"delete_everything","suggestion":"x"}"#,
        ] {
            let g = gateway(vec![Ok(bad.into()), Ok(bad.into())]);
            let s = resolution_suggestion(&g, &mismatch(), serde_json::json!({})).await;
            assert_eq!(s.action, ResolutionAction::Discuss);
            assert!(s.suggestion.contains("different codes"));
        }
    }
}
