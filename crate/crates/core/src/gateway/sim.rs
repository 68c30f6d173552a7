//! Deterministic simulated backend.
//!
//! The simulator answers the same wire requests a remote model would, and
//! reads only the request text. Synthetic corpora plant markers in item text
//! and traces so the simulator can recover identities:
//!
//! * `«query:ID»` in query text or query traces,
//! * `«item:ID»` in candidate traces,
//! * `«supports:ID»` / `«refutes:ID»` appended by query-aware rewriting.
//!
//! Ground-truth relevance comes from planted [`RelevanceJudgments`]. A judge
//! with fidelity `f` reports the true label with probability `f` and the
//! flipped label otherwise; every draw is a pure function of
//! `(seed, query id, candidate id)`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::parse::parse_ecr_text;
use super::wire::{Operation, WireRequest, WireResponse};
use super::{BackendDescriptor, Transport};
use crate::error::{invalid, BackendError, Result};
use crate::eval::RelevanceJudgments;
use crate::model::{Item, Role};
use crate::seed::{derive_seed, rng_for};

pub const RELEVANT_BASE: f64 = 0.9;
pub const IRRELEVANT_BASE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimBackendConfig {
    pub seed: u64,
    /// Probability the judge agrees with the planted label.
    pub fidelity: f64,
    pub noise_scale: f64,
    /// Fidelity used when the candidate trace carries query-specific
    /// evidence from rewriting; `None` means use `fidelity` throughout.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence_fidelity: Option<f64>,
}

impl Default for SimBackendConfig {
    fn default() -> Self {
        SimBackendConfig {
            seed: 0,
            fidelity: 1.0,
            noise_scale: 0.0,
            evidence_fidelity: None,
        }
    }
}

impl SimBackendConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        if !in_unit(self.fidelity) || !self.evidence_fidelity.map_or(true, in_unit) {
            return Err(invalid("sim fidelity must lie in [0, 1]"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(invalid(
                "sim noise_scale must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

pub fn query_marker(id: &str) -> String {
    format!("«query:{id}»")
}

pub fn item_marker(id: &str) -> String {
    format!("«item:{id}»")
}

/// All `«kind:value»` markers in `text`, in order.
pub fn markers(text: &str) -> Vec<(&str, &str)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('«') {
        let after = &rest[open + '«'.len_utf8()..];
        let Some(close) = after.find('»') else { break };
        if let Some((kind, value)) = after[..close].split_once(':') {
            out.push((kind, value));
        }
        rest = &after[close + '»'.len_utf8()..];
    }
    out
}

fn first_marker<'a>(text: &'a str, kind: &str) -> Option<&'a str> {
    markers(text)
        .into_iter()
        .find(|(k, _)| *k == kind)
        .map(|(_, v)| v)
}

/// Evidence about `query_id` planted by rewriting: `Some(true)` supports,
/// `Some(false)` refutes.
fn evidence_for(text: &str, query_id: &str) -> Option<bool> {
    markers(text).into_iter().find_map(|(k, v)| match k {
        "supports" if v == query_id => Some(true),
        "refutes" if v == query_id => Some(false),
        _ => None,
    })
}

/// Core draw: planted label, flipped with probability `1 - fidelity`, plus
/// uniform noise, clamped to `[0, 1]`.
pub fn sim_score(
    seed: u64,
    query_id: &str,
    candidate_id: &str,
    relevant: bool,
    fidelity: f64,
    noise_scale: f64,
) -> f64 {
    let mut rng = rng_for(seed, &["sim-score", query_id, candidate_id]);
    let flip = rng.random::<f64>() < 1.0 - fidelity;
    let noise = if noise_scale > 0.0 {
        rng.random_range(-noise_scale..=noise_scale)
    } else {
        0.0
    };
    let base = if relevant != flip {
        RELEVANT_BASE
    } else {
        IRRELEVANT_BASE
    };
    (base + noise).clamp(0.0, 1.0)
}

/// Score a (query, candidate) pair against planted relevance.
pub fn sim_backend_score(
    query: &Item,
    candidate: &Item,
    cfg: &SimBackendConfig,
    planted: &RelevanceJudgments,
) -> f64 {
    let relevant = planted.is_relevant(&query.id, &candidate.id);
    sim_score(
        cfg.seed,
        &query.id,
        &candidate.id,
        relevant,
        cfg.fidelity,
        cfg.noise_scale,
    )
}

/// A [`Transport`] that answers from planted relevance.
#[derive(Debug, Clone)]
pub struct SimTransport {
    cfg: SimBackendConfig,
    planted: Arc<RelevanceJudgments>,
}

impl SimTransport {
    pub fn new(cfg: SimBackendConfig, planted: Arc<RelevanceJudgments>) -> Result<Self> {
        cfg.validate()?;
        Ok(SimTransport { cfg, planted })
    }

    pub fn config(&self) -> &SimBackendConfig {
        &self.cfg
    }

    /// Reranker view of one candidate trace.
    fn judge(&self, query_id: &str, candidate_text: &str) -> f64 {
        let candidate_id = first_marker(candidate_text, "item").unwrap_or("");
        let (relevant, fidelity) = match (
            evidence_for(candidate_text, query_id),
            self.cfg.evidence_fidelity,
        ) {
            (Some(supports), Some(f)) => (supports, f),
            _ => (
                self.planted.is_relevant(query_id, candidate_id),
                self.cfg.fidelity,
            ),
        };
        sim_score(
            self.cfg.seed,
            query_id,
            candidate_id,
            relevant,
            fidelity,
            self.cfg.noise_scale,
        )
    }

    fn generate(&self, req: &WireRequest) -> WireResponse {
        let id = req.slot("item_id");
        let marker = if req.slot("role") == "query" {
            query_marker(id)
        } else {
            item_marker(id)
        };
        let content = match req.slot("content_text") {
            "" => req.slot("media_ref"),
            text => text,
        };
        WireResponse::text(format!(
            "<think>simulated reasoning for {id} under `{}` (seed {}): {}</think> {content} {marker}",
            req.template_id,
            self.cfg.seed,
            req.slot("instruction"),
        ))
    }

    fn rewrite(&self, backend_id: &str, req: &WireRequest) -> Result<WireResponse, BackendError> {
        let query_id = first_marker(req.slot("query_text_or_ecr"), "query").unwrap_or("");
        let original = req.slot("candidate_ecr");
        let candidate_id = first_marker(original, "item").unwrap_or("");
        let (think, summary) = parse_ecr_text(backend_id, original)?;
        let relevant = self.planted.is_relevant(query_id, candidate_id);
        // separate stream from the reranker draws for the same pair
        let verdict = sim_score(
            derive_seed(self.cfg.seed, "qar"),
            query_id,
            candidate_id,
            relevant,
            self.cfg.fidelity,
            0.0,
        ) > 0.5;
        let evidence = if verdict { "supports" } else { "refutes" };
        Ok(WireResponse::text(format!(
            "<think>{think} Checked against query {query_id}.</think> {summary} «{evidence}:{query_id}»"
        )))
    }

    fn rank(&self, req: &WireRequest) -> WireResponse {
        let query_id = first_marker(req.slot("query_text_or_ecr"), "query").unwrap_or("");
        let mut scored: Vec<(usize, f64)> = candidate_lines(req.slot("candidate_list"))
            .into_iter()
            .map(|(idx, text)| (idx, self.judge(query_id, text)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let order: Vec<String> = scored.iter().map(|(i, _)| i.to_string()).collect();
        WireResponse::text(order.join(", "))
    }
}

/// Parse `[i] text` lines of a rendered candidate list.
fn candidate_lines(list: &str) -> Vec<(usize, &str)> {
    list.lines()
        .filter_map(|line| {
            let rest = line.strip_prefix('[')?;
            let (idx, text) = rest.split_once(']')?;
            Some((idx.parse().ok()?, text))
        })
        .collect()
}

impl Transport for SimTransport {
    fn send(
        &self,
        backend: &BackendDescriptor,
        req: &WireRequest,
    ) -> Result<WireResponse, BackendError> {
        Ok(match req.operation {
            Operation::GenerateEcr => self.generate(req),
            Operation::RewriteQar => self.rewrite(&backend.backend_id, req)?,
            Operation::ScorePair => {
                let query_id = first_marker(req.slot("query_text_or_ecr"), "query").unwrap_or("");
                WireResponse::score(self.judge(query_id, req.slot("candidate_ecr")))
            }
            Operation::RankListwise => self.rank(req),
        })
    }
}

/// Query text for synthetic items: free text plus the identity marker.
pub fn planted_query_text(id: &str, body: &str) -> String {
    format!("{body} {}", query_marker(id))
}

/// Whether an item carries its planted identity marker where the simulator
/// will look for it.
pub fn has_planted_marker(item: &Item) -> bool {
    match item.role {
        Role::Query => item
            .content_text
            .as_deref()
            .is_some_and(|t| first_marker(t, "query") == Some(item.id.as_str())),
        Role::Candidate => item
            .ecr
            .as_ref()
            .is_some_and(|e| first_marker(&e.summary, "item") == Some(item.id.as_str())),
    }
}
