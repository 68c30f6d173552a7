//! Relevance judgments and ranking metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::RankedList;

/// Graded relevance: query id → (candidate id → gain). Binary judgments use
/// gain 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelevanceJudgments {
    pub judgments: BTreeMap<String, BTreeMap<String, f64>>,
}

/// One line of a judgments file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub query_id: String,
    pub candidate_id: String,
    #[serde(default = "unit_gain")]
    pub gain: f64,
}

fn unit_gain() -> f64 {
    1.0
}

impl RelevanceJudgments {
    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        candidate_id: impl Into<String>,
        gain: f64,
    ) {
        self.judgments
            .entry(query_id.into())
            .or_default()
            .insert(candidate_id.into(), gain);
    }

    pub fn gain(&self, query_id: &str, candidate_id: &str) -> f64 {
        self.judgments
            .get(query_id)
            .and_then(|m| m.get(candidate_id))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn is_relevant(&self, query_id: &str, candidate_id: &str) -> bool {
        self.gain(query_id, candidate_id) > 0.0
    }

    /// Ids with positive gain, ascending.
    pub fn relevant_ids(&self, query_id: &str) -> Vec<&str> {
        self.judgments.get(query_id).map_or_else(Vec::new, |m| {
            m.iter()
                .filter(|(_, &g)| g > 0.0)
                .map(|(id, _)| id.as_str())
                .collect()
        })
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        for (q, m) in &self.judgments {
            if let Some((c, g)) = m.iter().find(|(_, g)| !(**g >= 0.0 && g.is_finite())) {
                return Err(invalid(format!("judgment ({q}, {c}) has invalid gain {g}")));
            }
            if !m.values().any(|&g| g > 0.0) {
                return Err(invalid(format!("query `{q}` has no relevant candidate")));
            }
        }
        Ok(())
    }

    pub fn to_records(&self) -> Vec<JudgmentRecord> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| {
                m.iter().map(move |(c, &gain)| JudgmentRecord {
                    query_id: q.clone(),
                    candidate_id: c.clone(),
                    gain,
                })
            })
            .collect()
    }

    pub fn from_records(records: impl IntoIterator<Item = JudgmentRecord>) -> Result<Self> {
        let mut j = RelevanceJudgments::default();
        for r in records {
            j.insert(r.query_id, r.candidate_id, r.gain);
        }
        j.validate()?;
        Ok(j)
    }
}

/// A metric value plus whether the ranking had fewer than `k` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub value: f64,
    pub short_list: bool,
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    Ok(())
}

fn hits_in_top(ranking: &RankedList, judgments: &RelevanceJudgments, k: usize) -> usize {
    ranking
        .ids()
        .take(k)
        .filter(|id| judgments.is_relevant(&ranking.query_id, id))
        .count()
}

/// Relevant items in the top `k`, divided by `k` even when the list is shorter.
pub fn precision_at_k(
    ranking: &RankedList,
    judgments: &RelevanceJudgments,
    k: usize,
) -> Result<MetricValue> {
    check_k(k)?;
    Ok(MetricValue {
        value: hits_in_top(ranking, judgments, k) as f64 / k as f64,
        short_list: ranking.len() < k,
    })
}

pub fn recall_at_k(
    ranking: &RankedList,
    judgments: &RelevanceJudgments,
    k: usize,
) -> Result<MetricValue> {
    check_k(k)?;
    let relevant = judgments.relevant_ids(&ranking.query_id).len();
    if relevant == 0 {
        return Err(invalid(format!(
            "query `{}` has no relevant candidate",
            ranking.query_id
        )));
    }
    Ok(MetricValue {
        value: hits_in_top(ranking, judgments, k) as f64 / relevant as f64,
        short_list: ranking.len() < k,
    })
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// DCG@k / IDCG@k with discount `1 / log2(rank + 1)`, ranks from 1.
pub fn ndcg_at_k(
    ranking: &RankedList,
    judgments: &RelevanceJudgments,
    k: usize,
) -> Result<MetricValue> {
    check_k(k)?;
    let q = &ranking.query_id;
    let dcg: f64 = ranking
        .ids()
        .take(k)
        .enumerate()
        .map(|(i, id)| judgments.gain(q, id) * discount(i + 1))
        .sum();
    let mut gains: Vec<f64> = judgments.judgments.get(q).map_or_else(Vec::new, |m| {
        m.values().copied().filter(|&g| g > 0.0).collect()
    });
    gains.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = gains
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, g)| g * discount(i + 1))
        .sum();
    if idcg == 0.0 {
        return Err(invalid(format!("query `{q}` has no relevant candidate")));
    }
    Ok(MetricValue {
        value: dcg / idcg,
        short_list: ranking.len() < k,
    })
}
