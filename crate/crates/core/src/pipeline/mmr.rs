//! Greedy Maximal Marginal Relevance selection.

use chrono::{DateTime, Utc};

use crate::scoring::EmbeddingVector;

#[derive(Debug, Clone)]
pub struct Candidate<'a> {
    pub vector: &'a EmbeddingVector,
    /// Similarity to the query.
    pub relevance: f64,
    pub coded_at: DateTime<Utc>,
}

fn dot(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum()
}

/// Returns indices into `candidates` in selection order.
///
/// Each step picks the candidate maximising
/// `lambda * relevance - (1 - lambda) * max_sim_to_selected`; exact ties go
/// to the more recently coded candidate, then to the later index.
pub fn mmr_select(candidates: &[Candidate<'_>], k: usize, lambda: f64) -> Vec<usize> {
    let k = k.min(candidates.len());
    let mut selected: Vec<usize> = Vec::with_capacity(k);
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    // running max similarity of each candidate to the selected set
    let mut redundancy = vec![f64::NEG_INFINITY; candidates.len()];

    while selected.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &i) in remaining.iter().enumerate() {
            let penalty = if selected.is_empty() {
                0.0
            } else {
                redundancy[i]
            };
            let score = lambda * candidates[i].relevance - (1.0 - lambda) * penalty;
            let better = match best {
                None => true,
                Some((bpos, bscore)) => {
                    let b = remaining[bpos];
                    score > bscore
                        || (score == bscore
                            && (candidates[i].coded_at, i) > (candidates[b].coded_at, b))
                }
            };
            if better {
                best = Some((pos, score));
            }
        }
        let Some((pos, _)) = best else { break };
        let chosen = remaining.swap_remove(pos);
        selected.push(chosen);
        for &i in &remaining {
            let s = dot(candidates[i].vector, candidates[chosen].vector);
            if s > redundancy[i] {
                redundancy[i] = s;
            }
        }
    }
    selected
}
