//! Top-1 versus top-k comparison of stage-1 rankings.
//!
//! For single-positive tasks precision at the larger cutoff is bounded by
//! `1/k`, so the gap is taken on the hit rate: `gap = R@k_hi − P@k_lo`. Both
//! precision and recall columns are emitted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{ndcg_at_k, precision_at_k, recall_at_k, RelevanceJudgments};
use crate::error::{invalid, Result};
use crate::model::RankedList;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub task: String,
    pub n_queries: usize,
    pub k_lo: usize,
    pub k_hi: usize,
    pub p_at_lo: f64,
    pub r_at_lo: f64,
    pub p_at_hi: f64,
    pub r_at_hi: f64,
    pub ndcg_at_hi: f64,
    /// `r_at_hi − p_at_lo`
    pub gap: f64,
}

/// Mean metrics per task label, rows in label order.
pub fn topk_gap_report(
    rankings: &[(String, RankedList)],
    judgments: &RelevanceJudgments,
    ks: (usize, usize),
) -> Result<Vec<GapRow>> {
    let (lo, hi) = ks;
    if rankings.is_empty() {
        return Err(invalid("gap report needs at least one ranking"));
    }
    if lo == 0 || hi < lo {
        return Err(invalid(format!("bad cutoffs ({lo}, {hi})")));
    }
    let mut by_task: BTreeMap<&str, Vec<&RankedList>> = BTreeMap::new();
    for (task, r) in rankings {
        by_task.entry(task.as_str()).or_default().push(r);
    }
    by_task
        .into_iter()
        .map(|(task, lists)| {
            let n = lists.len() as f64;
            let mut sums = [0.0; 5];
            for r in &lists {
                sums[0] += precision_at_k(r, judgments, lo)?.value;
                sums[1] += recall_at_k(r, judgments, lo)?.value;
                sums[2] += precision_at_k(r, judgments, hi)?.value;
                sums[3] += recall_at_k(r, judgments, hi)?.value;
                sums[4] += ndcg_at_k(r, judgments, hi)?.value;
            }
            let [p_lo, r_lo, p_hi, r_hi, ndcg] = sums.map(|s| s / n);
            Ok(GapRow {
                task: task.to_string(),
                n_queries: lists.len(),
                k_lo: lo,
                k_hi: hi,
                p_at_lo: p_lo,
                r_at_lo: r_lo,
                p_at_hi: p_hi,
                r_at_hi: r_hi,
                ndcg_at_hi: ndcg,
                gap: r_hi - p_lo,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RankedEntry, Stage};

    fn list(q: &str, ids: &[&str]) -> RankedList {
        RankedList {
            query_id: q.into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    item_id: id.to_string(),
                    score: -(i as f64),
                })
                .collect(),
            stage: Stage::Retrieval,
            truncated_at: ids.len(),
        }
    }

    fn judgments() -> RelevanceJudgments {
        let mut j = RelevanceJudgments::default();
        j.insert("q1", "p1", 1.0);
        j.insert("q2", "p2", 1.0);
        j
    }

    #[test]
    fn perfect_retriever_has_no_gap() {
        let rows = topk_gap_report(
            &[
                ("t".into(), list("q1", &["p1", "x", "y"])),
                ("t".into(), list("q2", &["p2", "x", "y"])),
            ],
            &judgments(),
            (1, 10),
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].gap, 0.0);
        assert_eq!(rows[0].p_at_lo, 1.0);
    }

    #[test]
    fn positive_at_rank_two() {
        let rows = topk_gap_report(
            &[
                ("a".into(), list("q1", &["x", "p1"])),
                ("b".into(), list("q2", &["x", "p2", "y"])),
            ],
            &judgments(),
            (1, 10),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!((r.p_at_lo, r.r_at_hi, r.gap), (0.0, 1.0, 1.0));
            assert_eq!(r.p_at_hi, 0.1);
        }
    }

    #[test]
    fn empty_input_rejected() {
        assert!(topk_gap_report(&[], &judgments(), (1, 10)).is_err());
    }
}
