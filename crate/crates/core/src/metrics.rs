//! Retrieval evaluation: ROC AUC, recall@k and the cumulative match curve.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann-Whitney AUC: the probability a positive outscores a negative, ties
/// counted one half. Computed from mid-ranks in `O(n log n)`.
pub fn compute_auc(scored: &[(f64, bool)]) -> Result<f64> {
    let positives = scored.iter().filter(|(_, y)| *y).count();
    let negatives = scored.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Insufficient(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    // sum of mid-ranks (1-based) of positives, doubled to stay integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let pos_in_tie = order[i..=j].iter().filter(|&&k| scored[k].1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_tie;
        i = j + 1;
    }
    let p = positives as u128;
    let n = negatives as u128;
    // 2U = 2R - P(P+1)
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// One query's ranked candidates, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: String,
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub recall: f64,
    pub evaluated: usize,
    /// Queries with no true mate in their candidate list.
    pub excluded: usize,
}

fn first_mate_rank(r: &QueryRanking, truth: &BTreeMap<String, usize>) -> Option<usize> {
    let who = truth.get(&r.query)?;
    r.candidates
        .iter()
        .position(|c| c != &r.query && truth.get(c) == Some(who))
}

/// Fraction of queries with at least one true mate among their top `k`.
pub fn recall_at_k(rankings: &[QueryRanking], truth: &BTreeMap<String, usize>, k: usize) -> RecallReport {
    let mut hits = 0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for r in rankings {
        match first_mate_rank(r, truth) {
            Some(rank) => {
                evaluated += 1;
                if rank < k {
                    hits += 1;
                }
            }
            None => excluded += 1,
        }
    }
    RecallReport {
        recall: if evaluated == 0 {
            0.0
        } else {
            hits as f64 / evaluated as f64
        },
        evaluated,
        excluded,
    }
}

/// `cmc[k-1] = recall@k` for `k = 1..=pool`, where `pool` is the longest list.
pub fn cmc_curve(rankings: &[QueryRanking], truth: &BTreeMap<String, usize>) -> Vec<f64> {
    let pool = rankings.iter().map(|r| r.candidates.len()).max().unwrap_or(0);
    let ranks: Vec<usize> = rankings
        .iter()
        .filter_map(|r| first_mate_rank(r, truth))
        .collect();
    if ranks.is_empty() {
        return vec![0.0; pool];
    }
    let mut hist = vec![0usize; pool];
    for r in &ranks {
        hist[*r] += 1;
    }
    let mut acc = 0;
    hist.iter()
        .map(|h| {
            acc += h;
            acc as f64 / ranks.len() as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_extremes() {
        let sep = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(compute_auc(&sep).unwrap(), 1.0);
        let ties = [(0.5, true), (0.5, false), (0.5, false)];
        assert_eq!(compute_auc(&ties).unwrap(), 0.5);
        assert!(compute_auc(&[(0.1, true)]).is_err());
        assert!(compute_auc(&[(0.1, false), (0.2, false)]).is_err());
    }

    fn truth() -> BTreeMap<String, usize> {
        [("a", 0), ("b", 0), ("c", 1), ("d", 1), ("e", 2)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn rank(q: &str, c: &[&str]) -> QueryRanking {
        QueryRanking {
            query: q.into(),
            candidates: c.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn recall_and_cmc() {
        let rankings = vec![
            rank("a", &["b", "c", "d", "e"]),
            rank("c", &["a", "b", "d", "e"]),
            rank("e", &["a", "b", "c", "d"]),
        ];
        let r1 = recall_at_k(&rankings, &truth(), 1);
        assert_eq!(r1.recall, 0.5);
        assert_eq!(r1.excluded, 1);
        assert_eq!(recall_at_k(&rankings, &truth(), 4).recall, 1.0);
        let cmc = cmc_curve(&rankings, &truth());
        assert_eq!(cmc, vec![0.5, 0.5, 1.0, 1.0]);
    }
}
