//! Seeded synthetic corpora with planted relevance.
//!
//! Each query has one planted positive. The query embedding is
//! `normalize(s·positive + (1 − s)·noise)` for signal strength `s`. Every
//! query also gets `distractor_count` near-duplicates of its positive; a
//! fraction of them can be marked relevant, which plants false negatives for
//! mining studies. Item traces and query text carry the markers the
//! simulated backend reads.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::metrics::RelevanceJudgments;
use crate::error::{invalid, Result};
use crate::gateway::sim::{item_marker, planted_query_text};
use crate::mining::TrainingPair;
use crate::model::{normalize, EcrTrace, EmbeddingMatrix, Item, Role};
use crate::seed::rng_for;

pub const CANDIDATE_INSTRUCTION: &str = "Understand the content of the provided video.";
pub const QUERY_INSTRUCTION: &str = "Find a video that matches the given caption.";
pub const SYNTH_SOURCE_MODEL: &str = "synthetic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub n_candidates: usize,
    pub n_queries: usize,
    pub dim: usize,
    pub signal_strength: f64,
    pub distractor_count: usize,
    pub seed: u64,
    /// Fraction of distractors that are also relevant (planted false
    /// negatives).
    pub relevant_duplicate_fraction: f64,
    /// Noise scale of a distractor around its query's positive.
    pub distractor_spread: f64,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl SyntheticCorpusSpec {
    /// The configuration most experiments use.
    pub fn standard() -> Self {
        SyntheticCorpusSpec {
            n_candidates: 500,
            n_queries: 200,
            dim: 32,
            signal_strength: 0.5,
            distractor_count: 3,
            seed: 42,
            relevant_duplicate_fraction: 0.0,
            distractor_spread: 0.5,
        }
    }

    /// Near-duplicate distractors around every positive, some of them
    /// relevant: the setting for comparing mining strategies.
    pub fn near_duplicate() -> Self {
        SyntheticCorpusSpec {
            n_candidates: 1200,
            n_queries: 200,
            dim: 32,
            signal_strength: 0.6,
            distractor_count: 5,
            seed: 3,
            relevant_duplicate_fraction: 0.2,
            distractor_spread: 0.35,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_candidates == 0 || self.n_queries == 0 {
            return Err(invalid("corpus sizes and dim must be positive"));
        }
        if self.n_candidates < self.distractor_count + 1 {
            return Err(invalid(format!(
                "n_candidates ({}) must be at least distractor_count + 1 ({})",
                self.n_candidates,
                self.distractor_count + 1
            )));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(invalid("signal_strength must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.relevant_duplicate_fraction) {
            return Err(invalid("relevant_duplicate_fraction must lie in [0, 1]"));
        }
        if !(self.distractor_spread >= 0.0 && self.distractor_spread.is_finite()) {
            return Err(invalid("distractor_spread must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticCorpusSpec,
    /// Queries first, then candidates, each in id order.
    pub items: Vec<Item>,
    pub query_embeddings: EmbeddingMatrix,
    pub candidate_embeddings: EmbeddingMatrix,
    pub judgments: RelevanceJudgments,
    /// One per query, in query order.
    pub pairs: Vec<TrainingPair>,
}

impl SyntheticCorpus {
    pub fn query_ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.query_id.clone()).collect()
    }
}

pub fn candidate_id(i: usize) -> String {
    format!("c{i:05}")
}

pub fn query_id(i: usize) -> String {
    format!("q{i:05}")
}

fn gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        if let Some(v) = normalize(&gaussian(rng, dim)) {
            return v;
        }
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let (n, d) = (spec.n_candidates, spec.dim);
    let mut rng = rng_for(spec.seed, &["synthetic-corpus"]);

    let mut cand: Vec<Vec<f64>> = (0..n).map(|_| unit_gaussian(&mut rng, d)).collect();

    // positives: distinct while candidates last, then reused
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let positives: Vec<usize> = (0..spec.n_queries).map(|i| order[i % n]).collect();
    let positive_set: BTreeSet<usize> = positives.iter().copied().collect();
    let mut unclaimed: Vec<usize> = order
        .iter()
        .copied()
        .filter(|c| !positive_set.contains(c))
        .collect();
    unclaimed.reverse();
    let non_positive = unclaimed.clone();

    let mut judgments = RelevanceJudgments::default();
    let mut pairs = Vec::with_capacity(spec.n_queries);
    let mut query_rows = Vec::with_capacity(spec.n_queries);

    for (qi, &pos) in positives.iter().enumerate() {
        let qid = query_id(qi);
        judgments.insert(qid.clone(), candidate_id(pos), 1.0);
        pairs.push(TrainingPair {
            query_id: qid.clone(),
            positive_id: candidate_id(pos),
        });

        let noise = unit_gaussian(&mut rng, d);
        let s = spec.signal_strength;
        let q: Vec<f64> = cand[pos]
            .iter()
            .zip(&noise)
            .map(|(p, e)| s * p + (1.0 - s) * e)
            .collect();
        query_rows.push(normalize(&q).unwrap_or_else(|| cand[pos].clone()));

        for _ in 0..spec.distractor_count {
            let slot = match unclaimed.pop() {
                Some(c) => c,
                // out of fresh candidates: reuse a non-positive one
                None if !non_positive.is_empty() => {
                    non_positive[rng.random_range(0..non_positive.len())]
                }
                None => loop {
                    let c = rng.random_range(0..n);
                    if c != pos {
                        break c;
                    }
                },
            };
            let jitter = gaussian(&mut rng, d);
            let spread = spec.distractor_spread / (d as f64).sqrt();
            let v: Vec<f64> = cand[pos]
                .iter()
                .zip(&jitter)
                .map(|(p, j)| p + spread * j)
                .collect();
            cand[slot] = normalize(&v).unwrap_or_else(|| cand[pos].clone());
            if rng.random::<f64>() < spec.relevant_duplicate_fraction {
                judgments.insert(qid.clone(), candidate_id(slot), 1.0);
            }
        }
    }

    let cand_ids: Vec<String> = (0..n).map(candidate_id).collect();
    let query_ids: Vec<String> = (0..spec.n_queries).map(query_id).collect();
    let candidate_embeddings = EmbeddingMatrix::from_rows_normalized(d, cand_ids.clone(), &cand)?;
    let query_embeddings =
        EmbeddingMatrix::from_rows_normalized(d, query_ids.clone(), &query_rows)?;

    let mut items: Vec<Item> = query_ids
        .iter()
        .map(|id| Item {
            id: id.clone(),
            role: Role::Query,
            instruction: QUERY_INSTRUCTION.into(),
            content_text: Some(planted_query_text(id, &format!("caption for {id}"))),
            media_ref: None,
            ecr: None,
        })
        .collect();
    items.extend(cand_ids.iter().map(|id| Item {
        id: id.clone(),
        role: Role::Candidate,
        instruction: CANDIDATE_INSTRUCTION.into(),
        content_text: None,
        media_ref: Some(format!("sim://media/{id}")),
        ecr: Some(EcrTrace::original(
            format!("The clip {id} shows a scene; noting objects, actions and setting."),
            format!("A short clip, item {id}. {}", item_marker(id)),
            SYNTH_SOURCE_MODEL,
        )),
    }));

    Ok(SyntheticCorpus {
        spec: spec.clone(),
        items,
        query_embeddings,
        candidate_embeddings,
        judgments,
        pairs,
    })
}
