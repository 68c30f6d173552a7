//! The two-stage cascade: embedding retrieval of the top k with their
//! original traces, optional query-aware rewriting, then trace-based
//! reranking.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gateway::{Gateway, TokenBudget};
use crate::index::Index;
use crate::model::{
    EcrTrace, EmbeddingMatrix, Item, PipelineConfig, QarFailurePolicy, RankedEntry, RankedList,
    RerankMode, Role, Stage,
};

/// Everything a query needs besides the candidate index.
#[derive(Debug, Clone)]
pub struct CorpusStores {
    pub queries: BTreeMap<String, Item>,
    pub candidates: BTreeMap<String, Item>,
    /// Original traces by candidate id.
    pub ecrs: BTreeMap<String, EcrTrace>,
    pub query_embeddings: EmbeddingMatrix,
}

impl CorpusStores {
    /// Split items by role; candidate traces come from each item's `ecr`.
    pub fn from_items(items: &[Item], query_embeddings: EmbeddingMatrix) -> Result<Self> {
        let mut queries = BTreeMap::new();
        let mut candidates = BTreeMap::new();
        let mut ecrs = BTreeMap::new();
        for item in items {
            item.validate()?;
            let map = match item.role {
                Role::Query => &mut queries,
                Role::Candidate => &mut candidates,
            };
            if map.insert(item.id.clone(), item.clone()).is_some() {
                return Err(Error::DuplicateId(item.id.clone()));
            }
            if let (Role::Candidate, Some(ecr)) = (item.role, &item.ecr) {
                ecrs.insert(item.id.clone(), ecr.clone());
            }
        }
        Ok(CorpusStores {
            queries,
            candidates,
            ecrs,
            query_embeddings,
        })
    }

    pub fn query(&self, id: &str) -> Result<&Item> {
        self.queries
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn candidate(&self, id: &str) -> Result<&Item> {
        self.candidates
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn query_vector(&self, id: &str) -> Result<&[f32]> {
        self.query_embeddings
            .position(id)
            .map(|r| self.query_embeddings.row(r))
            .ok_or_else(|| Error::UnknownId(format!("{id} (no query embedding)")))
    }

    pub fn ecr(&self, id: &str) -> Result<&EcrTrace> {
        self.ecrs
            .get(id)
            .ok_or_else(|| Error::MissingEcr(id.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub query_id: String,
    pub stage1: RankedList,
    #[serde(rename = "final")]
    pub final_ranking: RankedList,
    /// The trace each candidate was reranked with.
    pub per_candidate_traces: BTreeMap<String, EcrTrace>,
    pub token_budget: TokenBudget,
}

/// Retrieve the top `k` candidates with their original traces.
pub fn run_stage1(
    query: &Item,
    query_vector: &[f32],
    index: &Index,
    ecrs: &BTreeMap<String, EcrTrace>,
    k: usize,
) -> Result<(RankedList, Vec<EcrTrace>)> {
    let list = index.top_k(&query.id, query_vector, k, None)?;
    let traces = list
        .ids()
        .map(|id| {
            ecrs.get(id)
                .cloned()
                .ok_or_else(|| Error::MissingEcr(id.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((list, traces))
}

/// First error in input order, so failures are reported deterministically.
fn collect_ordered<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Rerank stage-1 candidates from their traces.
///
/// Pairwise ties keep stage-1 order. Listwise entries get rank-derived
/// scores `(n - i) / n` for 0-based position `i`; they order the list but are
/// not probabilities.
pub fn run_ecrr(
    gateway: &Gateway,
    query: &Item,
    candidates: &RankedList,
    traces: &[EcrTrace],
    mode: RerankMode,
    backend_id: &str,
) -> Result<RankedList> {
    if traces.len() != candidates.len() {
        return Err(invalid(format!(
            "{} traces for {} candidates",
            traces.len(),
            candidates.len()
        )));
    }
    let n = candidates.len();
    let (entries, stage) = match mode {
        RerankMode::None => return Err(invalid("run_ecrr needs a pairwise or listwise mode")),
        RerankMode::Pairwise => {
            let scores = collect_ordered(
                candidates
                    .entries
                    .par_iter()
                    .zip(traces.par_iter())
                    .map(|(e, t)| {
                        gateway
                            .score_pair(query, &e.item_id, t, backend_id)
                            .map(|s| s.score)
                    })
                    .collect(),
            )?;
            let mut entries: Vec<RankedEntry> = candidates
                .entries
                .iter()
                .zip(scores)
                .map(|(e, score)| RankedEntry {
                    item_id: e.item_id.clone(),
                    score,
                })
                .collect();
            // stable: equal scores keep stage-1 order
            entries.sort_by(|a, b| b.score.total_cmp(&a.score));
            (entries, Stage::EcrrPairwise)
        }
        RerankMode::Listwise if n == 0 => (Vec::new(), Stage::EcrrListwise),
        RerankMode::Listwise => {
            let order = gateway.rank_listwise(query, traces, backend_id)?;
            let entries = order
                .iter()
                .enumerate()
                .map(|(i, &pos)| RankedEntry {
                    item_id: candidates.entries[pos - 1].item_id.clone(),
                    score: (n - i) as f64 / n as f64,
                })
                .collect();
            (entries, Stage::EcrrListwise)
        }
    };
    Ok(RankedList {
        query_id: candidates.query_id.clone(),
        entries,
        stage,
        truncated_at: candidates.truncated_at,
    })
}

/// Rewrite every candidate trace for this query. Failures either abort or
/// fall back to the original trace, per `policy`.
pub fn rewrite_traces(
    gateway: &Gateway,
    query: &Item,
    candidates: &RankedList,
    traces: &[EcrTrace],
    stores: &BTreeMap<String, Item>,
    reasoner_backend: &str,
    policy: QarFailurePolicy,
) -> Result<Vec<EcrTrace>> {
    let results: Vec<Result<EcrTrace>> = candidates
        .entries
        .par_iter()
        .zip(traces.par_iter())
        .map(|(e, original)| {
            let item = stores
                .get(&e.item_id)
                .ok_or_else(|| Error::UnknownId(e.item_id.clone()))?;
            match gateway.rewrite_qar(query, item, original, reasoner_backend) {
                Ok(t) => Ok(t),
                Err(err) if policy == QarFailurePolicy::FallBackToOriginal => {
                    log::warn!(
                        "rewrite of `{}` for `{}` failed, keeping the original trace: {err}",
                        e.item_id,
                        query.id
                    );
                    Ok(original.clone())
                }
                Err(err) => Err(match err {
                    Error::Backend(source) => Error::Candidate {
                        candidate_id: e.item_id.clone(),
                        source,
                    },
                    other => other,
                }),
            }
        })
        .collect();
    collect_ordered(results)
}

/// Query-aware rewriting followed by reranking on the rewritten traces.
#[allow(clippy::too_many_arguments)]
pub fn run_qar_then_ecrr(
    gateway: &Gateway,
    query: &Item,
    candidates: &RankedList,
    traces: &[EcrTrace],
    stores: &BTreeMap<String, Item>,
    reasoner_backend: &str,
    rerank_backend: &str,
    mode: RerankMode,
    policy: QarFailurePolicy,
) -> Result<(RankedList, Vec<EcrTrace>)> {
    let rewritten = rewrite_traces(
        gateway,
        query,
        candidates,
        traces,
        stores,
        reasoner_backend,
        policy,
    )?;
    let ranked = run_ecrr(gateway, query, candidates, &rewritten, mode, rerank_backend)?;
    Ok((ranked, rewritten))
}

/// The whole cascade for one query, as configured.
pub fn run_query(
    gateway: &Gateway,
    query_id: &str,
    index: &Index,
    stores: &CorpusStores,
    cfg: &PipelineConfig,
) -> Result<CascadeResult> {
    cfg.validate()?;
    let gw = gateway.metered();
    let query = stores.query(query_id)?;
    let (stage1, originals) = run_stage1(
        query,
        stores.query_vector(query_id)?,
        index,
        &stores.ecrs,
        cfg.top_k,
    )?;
    let (final_ranking, used) = match (cfg.rerank_mode, cfg.qar_enabled) {
        (RerankMode::None, _) => (stage1.clone(), originals),
        (mode, false) => (
            run_ecrr(&gw, query, &stage1, &originals, mode, &cfg.reranker_backend)?,
            originals,
        ),
        (mode, true) => run_qar_then_ecrr(
            &gw,
            query,
            &stage1,
            &originals,
            &stores.candidates,
            &cfg.reasoner_backend,
            &cfg.reranker_backend,
            mode,
            cfg.qar_failure_policy,
        )?,
    };
    let per_candidate_traces = stage1.ids().map(str::to_string).zip(used).collect();
    Ok(CascadeResult {
        query_id: query_id.to_string(),
        stage1,
        final_ranking,
        per_candidate_traces,
        token_budget: gw.usage(),
    })
}

/// [`run_query`] over many queries in parallel; results come back in input
/// order.
pub fn run_queries(
    gateway: &Gateway,
    query_ids: &[String],
    index: &Index,
    stores: &CorpusStores,
    cfg: &PipelineConfig,
) -> Result<Vec<CascadeResult>> {
    collect_ordered(
        query_ids
            .par_iter()
            .map(|q| run_query(gateway, q, index, stores, cfg))
            .collect(),
    )
}
