//! Inter-coder reliability: agreement statistics over a rating matrix and
//! typed disagreements between two coders' spans.

mod spans;

pub use spans::{
    build_rating_matrix, classify_disagreements, jaccard, resolution_suggestion, CodedSpan,
    Disagreement, DisagreementKind, DocumentCoding, DEFAULT_ALIGN_THRESHOLD, UNCODED,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IcrError {
    #[error("expected exactly 2 coders, found {0}")]
    NotTwoCoders(usize),
    #[error("at least 2 coders are required, found {0}")]
    TooFewCoders(usize),
    #[error("rating matrix has no items")]
    NoItems,
    #[error("item {0} has a missing rating")]
    MissingCells(usize),
    #[error("items are rated by different numbers of coders")]
    UnequalRaters,
    #[error("chance agreement is 1 while observed agreement is below 1")]
    DegenerateMarginals,
    #[error("no item has two or more ratings")]
    InsufficientOverlap,
    #[error("malformed rating matrix: {0}")]
    Shape(String),
}

/// Items × coders grid of category indices; `None` is a missing rating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    pub items: Vec<String>,
    pub coders: Vec<String>,
    pub categories: Vec<String>,
    /// `cells[item][coder]` indexes `categories`.
    pub cells: Vec<Vec<Option<usize>>>,
}

impl RatingMatrix {
    pub fn new(
        items: Vec<String>,
        coders: Vec<String>,
        categories: Vec<String>,
        cells: Vec<Vec<Option<usize>>>,
    ) -> Result<Self, IcrError> {
        if items.len() != cells.len() {
            return Err(IcrError::Shape(format!(
                "{} item ids for {} rows",
                items.len(),
                cells.len()
            )));
        }
        for (i, row) in cells.iter().enumerate() {
            if row.len() != coders.len() {
                return Err(IcrError::Shape(format!(
                    "row {i} has {} cells for {} coders",
                    row.len(),
                    coders.len()
                )));
            }
            if let Some(c) = row.iter().flatten().find(|&&c| c >= categories.len()) {
                return Err(IcrError::Shape(format!(
                    "row {i} uses unknown category {c}"
                )));
            }
        }
        Ok(Self {
            items,
            coders,
            categories,
            cells,
        })
    }

    /// Matrix with generated ids, for rows of category indices.
    pub fn from_rows(rows: Vec<Vec<Option<usize>>>, n_categories: usize) -> Result<Self, IcrError> {
        let n_coders = rows.first().map_or(0, Vec::len);
        Self::new(
            (0..rows.len()).map(|i| format!("item-{i}")).collect(),
            (0..n_coders).map(|i| format!("coder-{i}")).collect(),
            (0..n_categories).map(|i| format!("cat-{i}")).collect(),
            rows,
        )
    }

    /// Keeps only the listed coder columns, in the given order.
    pub fn select_coders(&self, columns: &[usize]) -> Self {
        Self {
            items: self.items.clone(),
            coders: columns.iter().map(|&c| self.coders[c].clone()).collect(),
            categories: self.categories.clone(),
            cells: self
                .cells
                .iter()
                .map(|row| columns.iter().map(|&c| row[c]).collect())
                .collect(),
        }
    }

    /// Drops items with any missing rating.
    pub fn complete_items(&self) -> Self {
        let keep: Vec<usize> = (0..self.cells.len())
            .filter(|&i| self.cells[i].iter().all(Option::is_some))
            .collect();
        Self {
            items: keep.iter().map(|&i| self.items[i].clone()).collect(),
            coders: self.coders.clone(),
            categories: self.categories.clone(),
            cells: keep.iter().map(|&i| self.cells[i].clone()).collect(),
        }
    }
}

/// Cohen's κ for a two-coder matrix with no missing cells.
pub fn cohen_kappa(matrix: &RatingMatrix) -> Result<f64, IcrError> {
    if matrix.coders.len() != 2 {
        return Err(IcrError::NotTwoCoders(matrix.coders.len()));
    }
    if matrix.cells.is_empty() {
        return Err(IcrError::NoItems);
    }
    let q = matrix.categories.len();
    let mut table = vec![vec![0u64; q]; q];
    for (i, row) in matrix.cells.iter().enumerate() {
        match (row[0], row[1]) {
            (Some(a), Some(b)) => table[a][b] += 1,
            _ => return Err(IcrError::MissingCells(i)),
        }
    }
    cohen_kappa_from_table(&table)
}

/// Cohen's κ from a square contingency table (rows: coder A, cols: coder B).
pub fn cohen_kappa_from_table(table: &[Vec<u64>]) -> Result<f64, IcrError> {
    let q = table.len();
    if table.iter().any(|r| r.len() != q) {
        return Err(IcrError::Shape("contingency table is not square".into()));
    }
    let n: u64 = table.iter().flatten().sum();
    if n == 0 {
        return Err(IcrError::NoItems);
    }
    let n = n as f64;
    let p_o = (0..q).map(|i| table[i][i] as f64).sum::<f64>() / n;
    let p_e = (0..q)
        .map(|k| {
            let row: u64 = table[k].iter().sum();
            let col: u64 = table.iter().map(|r| r[k]).sum();
            (row as f64 / n) * (col as f64 / n)
        })
        .sum::<f64>();
    chance_corrected(p_o, p_e)
}

fn chance_corrected(observed: f64, expected: f64) -> Result<f64, IcrError> {
    const EPS: f64 = 1e-12;
    if 1.0 - expected < EPS {
        return if 1.0 - observed < EPS {
            Ok(1.0)
        } else {
            Err(IcrError::DegenerateMarginals)
        };
    }
    if 1.0 - observed < EPS {
        return Ok(1.0);
    }
    Ok((observed - expected) / (1.0 - expected))
}

/// Fleiss' κ. Every item must carry the same number (≥ 2) of ratings;
/// missing cells are allowed as long as that count holds. A single category
/// used throughout yields 1.0.
pub fn fleiss_kappa(matrix: &RatingMatrix) -> Result<f64, IcrError> {
    if matrix.coders.len() < 2 {
        return Err(IcrError::TooFewCoders(matrix.coders.len()));
    }
    if matrix.cells.is_empty() {
        return Err(IcrError::NoItems);
    }
    let q = matrix.categories.len();
    let mut raters = None;
    let mut totals = vec![0.0; q];
    let mut p_bar = 0.0;
    for row in &matrix.cells {
        let mut counts = vec![0u64; q];
        for c in row.iter().flatten() {
            counts[*c] += 1;
        }
        let r: u64 = counts.iter().sum();
        match raters {
            None if r < 2 => return Err(IcrError::UnequalRaters),
            None => raters = Some(r),
            Some(prev) if prev != r => return Err(IcrError::UnequalRaters),
            Some(_) => {}
        }
        let agree: u64 = counts.iter().map(|&c| c * c).sum::<u64>() - r;
        p_bar += agree as f64 / (r * (r - 1)) as f64;
        for (t, c) in totals.iter_mut().zip(&counts) {
            *t += *c as f64;
        }
    }
    let n_items = matrix.cells.len() as f64;
    let r = raters.expect("at least one item") as f64;
    p_bar /= n_items;
    let p_e = totals
        .iter()
        .map(|t| (t / (n_items * r)).powi(2))
        .sum::<f64>();
    chance_corrected(p_bar, p_e)
}

/// Krippendorff's α with the nominal distance. Missing cells are skipped;
/// items with fewer than two ratings contribute nothing.
pub fn krippendorff_alpha(matrix: &RatingMatrix) -> Result<f64, IcrError> {
    let q = matrix.categories.len();
    let mut coincidence = vec![vec![0.0f64; q]; q];
    let mut pairable = 0usize;
    for row in &matrix.cells {
        let values: Vec<usize> = row.iter().flatten().copied().collect();
        let m = values.len();
        if m < 2 {
            continue;
        }
        pairable += m;
        let w = 1.0 / (m - 1) as f64;
        for (i, &a) in values.iter().enumerate() {
            for (j, &b) in values.iter().enumerate() {
                if i != j {
                    coincidence[a][b] += w;
                }
            }
        }
    }
    if pairable == 0 {
        return Err(IcrError::InsufficientOverlap);
    }
    let n = pairable as f64;
    let marginals: Vec<f64> = coincidence.iter().map(|r| r.iter().sum()).collect();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..q {
        for k in 0..q {
            if c != k {
                observed += coincidence[c][k];
                expected += marginals[c] * marginals[k];
            }
        }
    }
    if expected == 0.0 {
        // one category only: no disagreement is possible
        return Ok(1.0);
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// All three statistics for one matrix, each reported independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcrSummary {
    pub items: usize,
    pub coders: usize,
    /// Mean pairwise Cohen's κ over coder pairs, on items both rated.
    pub cohen_kappa: Option<f64>,
    pub fleiss_kappa: Option<f64>,
    pub krippendorff_alpha: Option<f64>,
    pub notes: Vec<String>,
}

pub fn summarize(matrix: &RatingMatrix) -> IcrSummary {
    let mut notes = Vec::new();
    let n = matrix.coders.len();
    let mut kappas = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let pair = matrix.select_coders(&[a, b]).complete_items();
            match cohen_kappa(&pair) {
                Ok(k) => kappas.push(k),
                Err(e) => notes.push(format!(
                    "cohen {} / {}: {e}",
                    matrix.coders[a], matrix.coders[b]
                )),
            }
        }
    }
    let cohen = (!kappas.is_empty()).then(|| kappas.iter().sum::<f64>() / kappas.len() as f64);
    let fleiss = match fleiss_kappa(&matrix.complete_items()) {
        Ok(k) => Some(k),
        Err(e) => {
            notes.push(format!("fleiss: {e}"));
            None
        }
    };
    let alpha = match krippendorff_alpha(matrix) {
        Ok(a) => Some(a),
        Err(e) => {
            notes.push(format!("krippendorff: {e}"));
            None
        }
    };
    IcrSummary {
        items: matrix.items.len(),
        coders: n,
        cohen_kappa: cohen,
        fleiss_kappa: fleiss,
        krippendorff_alpha: alpha,
        notes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table_to_rows(table: &[Vec<u64>]) -> Vec<Vec<Option<usize>>> {
        let mut rows = Vec::new();
        for (a, r) in table.iter().enumerate() {
            for (b, &count) in r.iter().enumerate() {
                for _ in 0..count {
                    rows.push(vec![Some(a), Some(b)]);
                }
            }
        }
        rows
    }

    /// Kappa by direct enumeration of item pairs: chance agreement is the
    /// probability that a random A label matches a random B label.
    fn brute_kappa(rows: &[Vec<Option<usize>>]) -> f64 {
        let n = rows.len() as f64;
        let p_o = rows.iter().filter(|r| r[0] == r[1]).count() as f64 / n;
        let mut matches = 0usize;
        for x in rows {
            for y in rows {
                if x[0] == y[1] {
                    matches += 1;
                }
            }
        }
        let p_e = matches as f64 / (n * n);
        (p_o - p_e) / (1.0 - p_e)
    }

    #[test]
    fn two_by_two_table() {
        let table = vec![vec![20, 5], vec![10, 15]];
        let k = cohen_kappa_from_table(&table).unwrap();
        assert!((k - 0.4).abs() < 1e-9);
        let m = RatingMatrix::from_rows(table_to_rows(&table), 2).unwrap();
        let k2 = cohen_kappa(&m).unwrap();
        assert!((k2 - brute_kappa(&m.cells)).abs() < 1e-12);
        assert!((k2 - 0.4).abs() < 1e-9);
    }

    #[test]
    fn perfect_agreement_is_one_for_every_statistic() {
        for (n_items, n_coders, q) in [(1, 2, 1), (5, 2, 3), (20, 4, 2), (7, 6, 5)] {
            let rows: Vec<_> = (0..n_items).map(|i| vec![Some(i % q); n_coders]).collect();
            let m = RatingMatrix::from_rows(rows, q).unwrap();
            assert_eq!(fleiss_kappa(&m).unwrap(), 1.0);
            assert_eq!(krippendorff_alpha(&m).unwrap(), 1.0);
            assert_eq!(cohen_kappa(&m.select_coders(&[0, 1])).unwrap(), 1.0);
        }
    }

    #[test]
    fn cohen_requires_two_complete_coders() {
        let m = RatingMatrix::from_rows(vec![vec![Some(0), Some(0), Some(1)]], 2).unwrap();
        assert_eq!(cohen_kappa(&m), Err(IcrError::NotTwoCoders(3)));
        let m = RatingMatrix::from_rows(vec![vec![Some(0), None]], 2).unwrap();
        assert_eq!(cohen_kappa(&m), Err(IcrError::MissingCells(0)));
    }

    #[test]
    fn random_ratings_are_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let rows: Vec<_> = (0..10_000)
            .map(|_| (0..3).map(|_| Some(rng.random_range(0..2))).collect())
            .collect();
        let m = RatingMatrix::from_rows(rows, 2).unwrap();
        let c = cohen_kappa(&m.select_coders(&[0, 1])).unwrap();
        let f = fleiss_kappa(&m).unwrap();
        let a = krippendorff_alpha(&m).unwrap();
        assert!(
            c.abs() < 0.05 && f.abs() < 0.05 && a.abs() < 0.05,
            "{c} {f} {a}"
        );
    }

    #[test]
    fn fleiss_reference_table() {
        // 10 items, 14 raters, 5 categories; reference value 0.210.
        let counts = [
            [0, 0, 0, 0, 14],
            [0, 2, 6, 4, 2],
            [0, 0, 3, 5, 6],
            [0, 3, 9, 2, 0],
            [2, 2, 8, 1, 1],
            [7, 7, 0, 0, 0],
            [3, 2, 6, 3, 0],
            [2, 5, 3, 2, 2],
            [6, 5, 2, 1, 0],
            [0, 2, 2, 3, 7],
        ];
        let rows: Vec<Vec<Option<usize>>> = counts
            .iter()
            .map(|c| {
                c.iter()
                    .enumerate()
                    .flat_map(|(cat, &k)| std::iter::repeat_n(Some(cat), k))
                    .collect()
            })
            .collect();
        let m = RatingMatrix::from_rows(rows, 5).unwrap();
        let k = fleiss_kappa(&m).unwrap();
        assert!((k - 0.2099).abs() < 1e-3, "{k}");
    }

    #[test]
    fn fleiss_rejects_unequal_raters() {
        let m = RatingMatrix::from_rows(
            vec![
                vec![Some(0), Some(0), Some(1)],
                vec![Some(0), None, Some(1)],
            ],
            2,
        )
        .unwrap();
        assert_eq!(fleiss_kappa(&m), Err(IcrError::UnequalRaters));
    }

    #[test]
    fn single_category_convention() {
        let m = RatingMatrix::from_rows(vec![vec![Some(0), Some(0)]; 4], 1).unwrap();
        assert_eq!(fleiss_kappa(&m).unwrap(), 1.0);
        assert_eq!(krippendorff_alpha(&m).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&m).unwrap(), 1.0);
    }

    #[test]
    fn fleiss_tracks_cohen_for_two_balanced_coders() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for agree in [0.5, 0.7, 0.9] {
            let rows: Vec<_> = (0..5_000)
                .map(|_| {
                    let a = rng.random_range(0..3);
                    let b = if rng.random_bool(agree) {
                        a
                    } else {
                        rng.random_range(0..3)
                    };
                    vec![Some(a), Some(b)]
                })
                .collect();
            let m = RatingMatrix::from_rows(rows, 3).unwrap();
            let c = cohen_kappa(&m).unwrap();
            let f = fleiss_kappa(&m).unwrap();
            assert!((c - f).abs() < 0.02, "{c} vs {f}");
        }
    }

    /// Alpha from all pairable values directly: observed disagreement over
    /// within-item ordered pairs, expected over all ordered pairs pooled.
    fn brute_alpha(rows: &[Vec<Option<usize>>]) -> f64 {
        let mut pooled = Vec::new();
        let mut d_o = 0.0;
        for row in rows {
            let v: Vec<usize> = row.iter().flatten().copied().collect();
            if v.len() < 2 {
                continue;
            }
            let mut diff = 0.0;
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if i != j && v[i] != v[j] {
                        diff += 1.0;
                    }
                }
            }
            d_o += diff / (v.len() - 1) as f64;
            pooled.extend(v);
        }
        let n = pooled.len() as f64;
        d_o /= n;
        let mut diff = 0.0;
        for i in 0..pooled.len() {
            for j in 0..pooled.len() {
                if i != j && pooled[i] != pooled[j] {
                    diff += 1.0;
                }
            }
        }
        let d_e = diff / (n * (n - 1.0));
        1.0 - d_o / d_e
    }

    fn reference_reliability_data() -> RatingMatrix {
        // 4 coders (rows here transposed to items), values 1..5 mapped to 0..4.
        let by_coder: [[Option<usize>; 12]; 4] = [
            [
                Some(1),
                Some(2),
                Some(3),
                Some(3),
                Some(2),
                Some(1),
                Some(4),
                Some(1),
                Some(2),
                None,
                None,
                None,
            ],
            [
                Some(1),
                Some(2),
                Some(3),
                Some(3),
                Some(2),
                Some(2),
                Some(4),
                Some(1),
                Some(2),
                Some(5),
                None,
                Some(3),
            ],
            [
                None,
                Some(3),
                Some(3),
                Some(3),
                Some(2),
                Some(3),
                Some(4),
                Some(2),
                Some(2),
                Some(5),
                Some(1),
                None,
            ],
            [
                Some(1),
                Some(2),
                Some(3),
                Some(3),
                Some(2),
                Some(4),
                Some(4),
                Some(1),
                Some(2),
                Some(5),
                Some(1),
                None,
            ],
        ];
        let rows = (0..12)
            .map(|u| by_coder.iter().map(|c| c[u].map(|v| v - 1)).collect())
            .collect();
        RatingMatrix::from_rows(rows, 5).unwrap()
    }

    #[test]
    fn alpha_reference_data() {
        let m = reference_reliability_data();
        let a = krippendorff_alpha(&m).unwrap();
        assert!((a - 0.743).abs() < 1e-3, "{a}");
        assert!((a - brute_alpha(&m.cells)).abs() < 1e-12);
    }

    #[test]
    fn alpha_ignores_empty_coder_column() {
        let m = reference_reliability_data();
        let mut with_ghost = m.clone();
        with_ghost.coders.push("ghost".into());
        for row in &mut with_ghost.cells {
            row.push(None);
        }
        assert_eq!(
            krippendorff_alpha(&m).unwrap(),
            krippendorff_alpha(&with_ghost).unwrap()
        );
    }

    #[test]
    fn alpha_needs_overlap() {
        let m = RatingMatrix::from_rows(vec![vec![Some(0), None], vec![None, Some(1)]], 2).unwrap();
        assert_eq!(krippendorff_alpha(&m), Err(IcrError::InsufficientOverlap));
    }

    #[test]
    fn shape_is_validated() {
        assert!(matches!(
            RatingMatrix::from_rows(vec![vec![Some(3), Some(0)]], 2),
            Err(IcrError::Shape(_))
        ));
        assert!(matches!(
            RatingMatrix::from_rows(vec![vec![Some(0), Some(0)], vec![Some(0)]], 2),
            Err(IcrError::Shape(_))
        ));
    }

    #[test]
    fn summary_reports_each_statistic() {
        let s = summarize(&reference_reliability_data());
        assert_eq!(s.coders, 4);
        assert!(s.krippendorff_alpha.is_some());
        assert!(s.cohen_kappa.is_some());
        assert!(s.fleiss_kappa.is_some());
    }

    fn matrix_strategy() -> impl Strategy<Value = (Vec<Vec<Option<usize>>>, usize)> {
        (2usize..5, 2usize..6, 1usize..30).prop_flat_map(|(q, coders, items)| {
            let cell = prop::option::weighted(0.8, 0..q);
            (
                prop::collection::vec(prop::collection::vec(cell, coders), items),
                Just(q),
            )
        })
    }

    proptest! {
        #[test]
        fn alpha_invariant_under_relabeling((rows, q) in matrix_strategy(), shift in 1usize..5) {
            let m = RatingMatrix::from_rows(rows.clone(), q).unwrap();
            let relabeled: Vec<Vec<Option<usize>>> = rows
                .iter()
                .map(|r| r.iter().map(|c| c.map(|v| (q - 1 - v + shift) % q)).collect())
                .collect();
            let m2 = RatingMatrix::from_rows(relabeled, q).unwrap();
            match (krippendorff_alpha(&m), krippendorff_alpha(&m2)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-9),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn alpha_matches_brute_force((rows, q) in matrix_strategy()) {
            let m = RatingMatrix::from_rows(rows.clone(), q).unwrap();
            if let Ok(a) = krippendorff_alpha(&m) {
                let b = brute_alpha(&rows);
                if b.is_finite() {
                    prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
                }
            }
        }

        #[test]
        fn cohen_in_range(table in prop::collection::vec(prop::collection::vec(0u64..20, 3), 3)) {
            if let Ok(k) = cohen_kappa_from_table(&table) {
                prop_assert!((-1.0..=1.0).contains(&k));
            }
        }
    }
}
