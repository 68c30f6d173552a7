//! Exact cosine top-k over an [`EmbeddingMatrix`].
//!
//! Rows are unit vectors, so cosine is a dot product. Results are ordered by
//! descending score with ties broken by ascending id.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::model::{EmbeddingMatrix, RankedEntry, RankedList, Stage};

/// Dot product of two unit vectors, accumulated in `f64` from `+0.0` so an
/// all-zero product never yields `-0.0`.
pub fn cosine(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(dot(u, v))
}

#[inline]
pub(crate) fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .fold(0.0, |acc, (&a, &b)| acc + f64::from(a) * f64::from(b))
}

/// Descending score, then ascending id.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

#[derive(Debug, Clone)]
pub struct Index {
    embeddings: EmbeddingMatrix,
    id_to_row: HashMap<String, usize>,
}

impl Index {
    pub fn build(embeddings: EmbeddingMatrix) -> Result<Self> {
        let mut id_to_row = HashMap::with_capacity(embeddings.len());
        for (row, id) in embeddings.ids().iter().enumerate() {
            if id_to_row.insert(id.clone(), row).is_some() {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Index {
            embeddings,
            id_to_row,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.dim()
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn contains(&self, id: &str) -> bool {
        self.id_to_row.contains_key(id)
    }

    pub fn vector(&self, id: &str) -> Option<&[f32]> {
        self.id_to_row.get(id).map(|&r| self.embeddings.row(r))
    }

    /// The `k` highest-cosine rows for `query`, skipping ids in `exclude`.
    pub fn top_k(
        &self,
        query_id: &str,
        query: &[f32],
        k: usize,
        exclude: Option<&HashSet<String>>,
    ) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        let ids = self.embeddings.ids();
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&r| exclude.map_or(true, |ex| !ex.contains(&ids[r])))
            .map(|r| (r, dot(self.embeddings.row(r), query)))
            .collect();

        let cmp =
            |a: &(usize, f64), b: &(usize, f64)| rank_order((&ids[a.0], a.1), (&ids[b.0], b.1));
        let keep = k.min(scored.len());
        if keep < scored.len() {
            scored.select_nth_unstable_by(keep, cmp);
            scored.truncate(keep);
        }
        scored.sort_unstable_by(cmp);

        Ok(RankedList {
            query_id: query_id.to_string(),
            entries: scored
                .into_iter()
                .map(|(r, score)| RankedEntry {
                    item_id: ids[r].clone(),
                    score,
                })
                .collect(),
            stage: Stage::Retrieval,
            truncated_at: k,
        })
    }
}
