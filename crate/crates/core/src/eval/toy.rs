//! Toy embedder: a `d×d` linear map on fixed query vectors, trained by plain
//! gradient descent on the weighted InfoNCE loss with mined negatives.
//! Candidate vectors stay fixed.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{ExperimentWorld, SimSettings, SIM_JUDGE, SIM_PAIRWISE};
use super::synth::{SyntheticCorpus, SyntheticCorpusSpec};
use crate::error::{invalid, Error, Result};
use crate::index::Index;
use crate::loss::{info_nce_gradient, LossBatch, LossOptions, WeightedNegative};
use crate::mining::{
    estimate_false_negative_ratio, mine_hard_negatives, FalseNegativeReport, MinedNegatives,
    MiningParams, MiningStrategy,
};
use crate::model::DEFAULT_TAU;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        ToyTrainConfig {
            epochs: 30,
            lr: 0.05,
            tau: DEFAULT_TAU,
            batch_size: 16,
            seed: 3,
        }
    }
}

impl ToyTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// One training set: mined negatives under a strategy label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVariant {
    pub label: String,
    pub mined: Vec<MinedNegatives>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyVariantResult {
    pub label: String,
    pub epoch_losses: Vec<f64>,
    pub initial_p_at_1: f64,
    pub final_p_at_1: f64,
    /// Row-major `d×d`.
    pub map: Vec<f64>,
}

pub fn identity(dim: usize) -> Vec<f64> {
    let mut w = vec![0.0; dim * dim];
    for i in 0..dim {
        w[i * dim + i] = 1.0;
    }
    w
}

pub fn apply(map: &[f64], dim: usize, x: &[f64]) -> Vec<f64> {
    (0..dim)
        .map(|r| {
            map[r * dim..(r + 1) * dim]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// Loss of the projected batch and its gradient with respect to the map.
pub fn toy_objective(
    map: &[f64],
    dim: usize,
    inputs: &[Vec<f64>],
    positives: &[Vec<f64>],
    negatives: &[Vec<WeightedNegative>],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let batch = LossBatch {
        queries: inputs.iter().map(|x| apply(map, dim, x)).collect(),
        positives: positives.to_vec(),
        hard_negatives: negatives.to_vec(),
        tau,
    };
    let (loss, grads) = info_nce_gradient(&batch, &LossOptions::default())?;
    let mut d_map = vec![0.0; dim * dim];
    for (g, x) in grads.queries.iter().zip(inputs) {
        for r in 0..dim {
            for c in 0..dim {
                d_map[r * dim + c] += g[r] * x[c];
            }
        }
    }
    Ok((loss, d_map))
}

struct TrainingData {
    dim: usize,
    inputs: Vec<Vec<f64>>,
    positives: Vec<Vec<f64>>,
    query_ids: Vec<String>,
}

fn training_data(corpus: &SyntheticCorpus) -> Result<TrainingData> {
    let q = &corpus.query_embeddings;
    let c = &corpus.candidate_embeddings;
    let mut inputs = Vec::new();
    let mut positives = Vec::new();
    let mut query_ids = Vec::new();
    for p in &corpus.pairs {
        let qr = q
            .position(&p.query_id)
            .ok_or_else(|| Error::UnknownId(p.query_id.clone()))?;
        let cr = c
            .position(&p.positive_id)
            .ok_or_else(|| Error::UnknownId(p.positive_id.clone()))?;
        inputs.push(q.row_f64(qr));
        positives.push(c.row_f64(cr));
        query_ids.push(p.query_id.clone());
    }
    Ok(TrainingData {
        dim: q.dim(),
        inputs,
        positives,
        query_ids,
    })
}

/// Fraction of training queries whose projected top-1 candidate is relevant.
pub fn projected_p_at_1(map: &[f64], corpus: &SyntheticCorpus, index: &Index) -> Result<f64> {
    let data = training_data(corpus)?;
    let mut hits = 0usize;
    for (x, qid) in data.inputs.iter().zip(&data.query_ids) {
        let u: Vec<f32> = apply(map, data.dim, x).iter().map(|&v| v as f32).collect();
        let top = index.top_k(qid, &u, 1, None)?;
        if top
            .ids()
            .next()
            .is_some_and(|id| corpus.judgments.is_relevant(qid, id))
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.query_ids.len().max(1) as f64)
}

fn train_variant(
    corpus: &SyntheticCorpus,
    index: &Index,
    data: &TrainingData,
    variant: &ToyVariant,
    cfg: &ToyTrainConfig,
) -> Result<ToyVariantResult> {
    let dim = data.dim;
    let c = &corpus.candidate_embeddings;
    let by_query: HashMap<&str, &MinedNegatives> = variant
        .mined
        .iter()
        .map(|m| (m.query_id.as_str(), m))
        .collect();
    let negatives: Vec<Vec<WeightedNegative>> = data
        .query_ids
        .iter()
        .map(|q| {
            by_query.get(q.as_str()).map_or(Ok(Vec::new()), |m| {
                m.negatives
                    .iter()
                    .map(|n| {
                        let r = c
                            .position(&n.target_id)
                            .ok_or_else(|| Error::UnknownId(n.target_id.clone()))?;
                        Ok(WeightedNegative {
                            vector: c.row_f64(r),
                            weight: n.weight,
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
        })
        .collect::<Result<_>>()?;

    let mut map = identity(dim);
    let initial_p_at_1 = projected_p_at_1(&map, corpus, index)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.inputs.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &["toy-order", &epoch.to_string()]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let pick = |v: &[Vec<f64>]| chunk.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let negs: Vec<Vec<WeightedNegative>> =
                chunk.iter().map(|&i| negatives[i].clone()).collect();
            let (loss, grad) = toy_objective(
                &map,
                dim,
                &pick(&data.inputs),
                &pick(&data.positives),
                &negs,
                cfg.tau,
            )
            .map_err(|e| match e {
                Error::InvalidInput(_) => Error::Diverged { step },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            for (w, g) in map.iter_mut().zip(&grad) {
                *w -= cfg.lr * g;
            }
            total += loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(ToyVariantResult {
        label: variant.label.clone(),
        epoch_losses,
        initial_p_at_1,
        final_p_at_1: projected_p_at_1(&map, corpus, index)?,
        map,
    })
}

/// Train every variant from the identity map with the same batch order.
pub fn train_toy_embedder(
    corpus: &SyntheticCorpus,
    variants: &[ToyVariant],
    cfg: &ToyTrainConfig,
) -> Result<Vec<ToyVariantResult>> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(invalid("no variants to train"));
    }
    let index = Index::build(corpus.candidate_embeddings.clone())?;
    let data = training_data(corpus)?;
    let results: Vec<Result<ToyVariantResult>> = variants
        .par_iter()
        .map(|v| train_variant(corpus, &index, &data, v, cfg))
        .collect();
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyStudyConfig {
    pub corpus: SyntheticCorpusSpec,
    pub sim: SimSettings,
    pub train: ToyTrainConfig,
    /// Pool size, K and α; strategy and backend are set per variant.
    pub mining: MiningParams,
    pub audit_sample: usize,
    pub audit_seed: u64,
}

impl Default for ToyStudyConfig {
    fn default() -> Self {
        ToyStudyConfig {
            corpus: SyntheticCorpusSpec::near_duplicate(),
            sim: SimSettings::default(),
            train: ToyTrainConfig::default(),
            mining: MiningParams {
                m: 20,
                ..MiningParams::default()
            },
            audit_sample: 500,
            audit_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStudyReport {
    pub variants: Vec<ToyVariantResult>,
    /// Audited false-negative ratio per strategy.
    pub false_negatives: BTreeMap<String, FalseNegativeReport>,
}

pub const STUDY_STRATEGIES: [MiningStrategy; 4] = [
    MiningStrategy::Reranker,
    MiningStrategy::Random,
    MiningStrategy::Embedder,
    MiningStrategy::NaiveTopK,
];

/// Mine the corpus under each strategy, audit false negatives with the
/// judge backend, and train one toy embedder per strategy.
pub fn run_toy_study(cfg: &ToyStudyConfig) -> Result<ToyStudyReport> {
    let world = ExperimentWorld::build(&cfg.corpus, &cfg.sim)?;
    let mut variants = Vec::new();
    let mut false_negatives = BTreeMap::new();
    for strategy in STUDY_STRATEGIES {
        let params = MiningParams {
            strategy,
            backend_id: SIM_PAIRWISE.into(),
            ..cfg.mining.clone()
        };
        let mined: Vec<Result<MinedNegatives>> = world
            .corpus
            .pairs
            .par_iter()
            .map(|p| {
                mine_hard_negatives(
                    world.stores.query(&p.query_id)?,
                    world.stores.candidate(&p.positive_id)?,
                    &world.index,
                    &world.stores,
                    Some(&world.gateway),
                    &params,
                )
            })
            .collect();
        let mined = mined.into_iter().collect::<Result<Vec<_>>>()?;
        let audit = estimate_false_negative_ratio(
            &mined,
            &world.stores,
            &world.gateway,
            SIM_JUDGE,
            cfg.audit_sample,
            cfg.audit_seed,
        )?;
        false_negatives.insert(strategy.to_string(), audit);
        variants.push(ToyVariant {
            label: strategy.to_string(),
            mined,
        });
    }
    Ok(ToyStudyReport {
        variants: train_toy_embedder(&world.corpus, &variants, &cfg.train)?,
        false_negatives,
    })
}
