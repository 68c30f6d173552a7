//! Domain types shared by every stage: items and their reasoning traces,
//! unit-normalized embedding matrices, ranked lists, and pipeline settings.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Candidate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationKind {
    Original,
    QarRewritten,
}

/// A reasoning trace of the form `<think> ... </think> summary`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EcrTrace {
    pub think: String,
    pub summary: String,
    pub source_model: String,
    pub generation_kind: GenerationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_for_query: Option<String>,
}

impl EcrTrace {
    pub fn original(
        think: impl Into<String>,
        summary: impl Into<String>,
        source_model: impl Into<String>,
    ) -> Self {
        EcrTrace {
            think: think.into(),
            summary: summary.into(),
            source_model: source_model.into(),
            generation_kind: GenerationKind::Original,
            derived_for_query: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.summary.trim().is_empty() {
            return Err(invalid("ECR summary is empty"));
        }
        match (self.generation_kind, &self.derived_for_query) {
            (GenerationKind::QarRewritten, None) => Err(invalid(
                "rewritten ECR must name the query it was derived for",
            )),
            (GenerationKind::Original, Some(q)) => Err(invalid(format!(
                "original ECR must not carry derived_for_query (found `{q}`)"
            ))),
            _ => Ok(()),
        }
    }

    /// The text a reranker reads for this trace.
    pub fn render(&self) -> String {
        format!("<think>{}</think> {}", self.think, self.summary)
    }
}

/// A query or candidate: instruction, optional text, optional opaque media
/// locator, optional reasoning trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub role: Role,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ecr: Option<EcrTrace>,
}

impl Item {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(invalid("item id is empty"));
        }
        if self.content_text.is_none() && self.media_ref.is_none() {
            return Err(invalid(format!(
                "item `{}` has neither content_text nor media_ref",
                self.id
            )));
        }
        if let Some(ecr) = &self.ecr {
            ecr.validate()
                .map_err(|e| invalid(format!("item `{}`: {e}", self.id)))?;
        }
        Ok(())
    }

    /// Text sent to a reranker on the query side: the query's own trace when
    /// it has one, its raw text otherwise.
    pub fn query_text_or_ecr(&self) -> String {
        match (&self.ecr, &self.content_text) {
            (Some(ecr), _) => ecr.render(),
            (None, Some(text)) => text.clone(),
            (None, None) => self.media_ref.clone().unwrap_or_default(),
        }
    }
}

/// Row-per-item unit vectors.
///
/// Rows are stored as `f32` (the on-disk precision) and normalized once at
/// construction; similarity is then a plain dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
}

pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

impl EmbeddingMatrix {
    /// Build from rows that are already unit-normalized; rejects rows that are not.
    pub fn new(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let m = Self::unchecked(dim, ids, data)?;
        for (row, id) in m.ids.iter().enumerate() {
            let norm = l2_norm_f32(m.row(row));
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(invalid(format!(
                    "row `{id}` has norm {norm}, expected unit length"
                )));
            }
        }
        Ok(m)
    }

    /// Build from arbitrary nonzero rows, normalizing each in `f64`.
    pub fn from_rows_normalized(dim: usize, ids: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != ids.len() {
            return Err(invalid(format!(
                "{} ids but {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (row, id) in rows.iter().zip(&ids) {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            let unit = normalize(row)
                .ok_or_else(|| invalid(format!("row `{id}` is zero or not finite")))?;
            data.extend(unit.iter().map(|&x| x as f32));
        }
        Self::unchecked(dim, ids, data)
    }

    fn unchecked(dim: usize, ids: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if data.len() != ids.len() * dim {
            return Err(invalid(format!(
                "matrix data has {} values, expected {} x {}",
                data.len(),
                ids.len(),
                dim
            )));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() {
                return Err(invalid("embedding id is empty"));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(EmbeddingMatrix { dim, ids, data })
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| f64::from(x)).collect()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Map of id to row for repeated lookups.
    pub fn row_map(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }
}

pub(crate) fn l2_norm_f32(v: &[f32]) -> f64 {
    v.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// Unit-normalize; `None` for zero or non-finite input.
pub fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(v.iter().map(|x| x / norm).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Retrieval,
    EcrrPairwise,
    EcrrListwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub item_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    pub stage: Stage,
    pub truncated_at: usize,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.item_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks ordering and uniqueness. Retrieval lists must also break score
    /// ties by ascending id; reranked lists break ties by stage-1 rank, which
    /// is not recoverable from the list alone.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.item_id.as_str()) {
                return Err(Error::DuplicateId(e.item_id.clone()));
            }
        }
        for pair in self.entries.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.score < b.score {
                return Err(invalid(format!(
                    "ranked list for `{}` not sorted: {} ({}) before {} ({})",
                    self.query_id, a.item_id, a.score, b.item_id, b.score
                )));
            }
            if self.stage == Stage::Retrieval && a.score == b.score && a.item_id > b.item_id {
                return Err(invalid(format!(
                    "tie between `{}` and `{}` not broken by ascending id",
                    a.item_id, b.item_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RerankMode {
    None,
    Pairwise,
    Listwise,
}

impl std::str::FromStr for RerankMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(RerankMode::None),
            "pairwise" => Ok(RerankMode::Pairwise),
            "listwise" => Ok(RerankMode::Listwise),
            other => Err(Error::Config(format!("unknown rerank mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RerankMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RerankMode::None => "none",
            RerankMode::Pairwise => "pairwise",
            RerankMode::Listwise => "listwise",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QarFailurePolicy {
    #[default]
    FailFast,
    FallBackToOriginal,
}

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_TAU: f64 = 0.02;
pub const DEFAULT_ALPHA: f64 = 0.95;
pub const DEFAULT_MINED_K: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub rerank_mode: RerankMode,
    pub qar_enabled: bool,
    pub tau: f64,
    pub alpha: f64,
    pub mined_k: usize,
    pub reasoner_backend: String,
    pub reranker_backend: String,
    pub rng_seed: u64,
    pub qar_failure_policy: QarFailurePolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            top_k: DEFAULT_TOP_K,
            rerank_mode: RerankMode::Pairwise,
            qar_enabled: false,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            mined_k: DEFAULT_MINED_K,
            reasoner_backend: "sim-reasoner".into(),
            reranker_backend: "sim-pairwise".into(),
            rng_seed: 0,
            qar_failure_policy: QarFailurePolicy::FailFast,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.mined_k == 0 {
            return Err(Error::Config("mined_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DuplicateId { id: String },
    InvalidItem { id: String, reason: String },
    MissingEmbedding { id: String },
    EmptySummary { id: String },
    OrphanEmbedding { id: String },
    BadEmbeddingRow { id: String, norm: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

/// Check a corpus against its embedding matrix. Diagnostics are returned as
/// data; nothing here fails.
///
/// Candidates need an embedding row; queries are embedded separately and are
/// only checked if they happen to appear in the matrix.
pub fn validate_corpus(items: &[Item], embeddings: &EmbeddingMatrix) -> ValidationReport {
    let mut violations = Vec::new();
    let rows = embeddings.row_map();
    let mut seen: HashSet<&str> = HashSet::new();
    let mut reported_dup: HashSet<&str> = HashSet::new();

    for item in items {
        if !seen.insert(item.id.as_str()) && reported_dup.insert(item.id.as_str()) {
            violations.push(Violation::DuplicateId {
                id: item.id.clone(),
            });
        }
        if let Some(ecr) = &item.ecr {
            if ecr.summary.trim().is_empty() {
                violations.push(Violation::EmptySummary {
                    id: item.id.clone(),
                });
            }
        }
        match item.validate() {
            Ok(()) => {}
            Err(_)
                if item
                    .ecr
                    .as_ref()
                    .is_some_and(|e| e.summary.trim().is_empty()) => {}
            Err(e) => violations.push(Violation::InvalidItem {
                id: item.id.clone(),
                reason: e.to_string(),
            }),
        }
        if item.role == Role::Candidate && !rows.contains_key(item.id.as_str()) {
            violations.push(Violation::MissingEmbedding {
                id: item.id.clone(),
            });
        }
    }
    for (row, id) in embeddings.ids().iter().enumerate() {
        if !seen.contains(id.as_str()) {
            violations.push(Violation::OrphanEmbedding { id: id.clone() });
        }
        let norm = l2_norm_f32(embeddings.row(row));
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            violations.push(Violation::BadEmbeddingRow {
                id: id.clone(),
                norm,
            });
        }
    }
    ValidationReport {
        ok: violations.is_empty(),
        violations,
    }
}
