//! Reranker-filtered hard-negative mining.
//!
//! For a (query, positive) pair: retrieve the top `M` candidates with the
//! positive removed, score the positive (`s⁺`) and every pool member
//! (`s_m`), walk the pool from highest to lowest score, and accept
//! candidates with `s_m < α·s⁺` until `K` are accepted. Anything scoring at
//! or above the threshold is treated as a false negative.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gateway::Gateway;
use crate::index::{dot, Index};
use crate::model::{Item, DEFAULT_ALPHA, DEFAULT_MINED_K};
use crate::pipeline::CorpusStores;
use crate::seed::rng_for;

/// Retrieval pool size used when none is given.
pub const DEFAULT_POOL_M: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    /// Pool scored by the pairwise reranker over traces, then filtered.
    #[default]
    Reranker,
    /// Pool scored by query cosine, same positive-aware filter.
    Embedder,
    /// Uniform sample of the corpus, positive excluded, no filter.
    Random,
    /// First `K` of the retrieved pool, no filter.
    NaiveTopK,
}

impl MiningStrategy {
    /// Whether the false-negative threshold applies.
    pub fn is_filtered(self) -> bool {
        matches!(self, MiningStrategy::Reranker | MiningStrategy::Embedder)
    }
}

impl std::str::FromStr for MiningStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reranker" => Ok(MiningStrategy::Reranker),
            "embedder" => Ok(MiningStrategy::Embedder),
            "random" => Ok(MiningStrategy::Random),
            "naive_top_k" | "naive-top-k" => Ok(MiningStrategy::NaiveTopK),
            other => Err(Error::Config(format!("unknown mining strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for MiningStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MiningStrategy::Reranker => "reranker",
            MiningStrategy::Embedder => "embedder",
            MiningStrategy::Random => "random",
            MiningStrategy::NaiveTopK => "naive_top_k",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Uniform,
    /// `w_k = n · softmax(s / temp)_k`
    ScoreSoftmax { temp: f64 },
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" {
            return Ok(WeightScheme::Uniform);
        }
        let temp = s
            .strip_prefix("softmax:")
            .and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| {
                Error::Config(format!(
                    "weights must be `uniform` or `softmax:TEMP`, got `{s}`"
                ))
            })?;
        if !(temp > 0.0 && temp.is_finite()) {
            return Err(Error::Config(format!(
                "softmax temperature must be positive, got {temp}"
            )));
        }
        Ok(WeightScheme::ScoreSoftmax { temp })
    }
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightScheme::Uniform => f.write_str("uniform"),
            WeightScheme::ScoreSoftmax { temp } => write!(f, "softmax:{temp}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningParams {
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    pub strategy: MiningStrategy,
    pub weights: WeightScheme,
    /// Pairwise reranker used by [`MiningStrategy::Reranker`].
    pub backend_id: String,
    /// Seed for [`MiningStrategy::Random`].
    pub seed: u64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams {
            m: DEFAULT_POOL_M,
            k: DEFAULT_MINED_K,
            alpha: DEFAULT_ALPHA,
            strategy: MiningStrategy::Reranker,
            weights: WeightScheme::Uniform,
            backend_id: "sim-pairwise".into(),
            seed: 0,
        }
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.k > self.m {
            return Err(Error::Config(format!(
                "k ({}) must not exceed m ({})",
                self.k, self.m
            )));
        }
        if let WeightScheme::ScoreSoftmax { temp } = self.weights {
            if !(temp > 0.0 && temp.is_finite()) {
                return Err(Error::Config(format!(
                    "softmax temperature must be positive, got {temp}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedNegative {
    pub target_id: String,
    pub score: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedNegatives {
    pub query_id: String,
    pub positive_id: String,
    pub positive_score: f64,
    pub negatives: Vec<MinedNegative>,
    pub alpha_used: f64,
    pub pool_size_m: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl MinedNegatives {
    /// Structural checks. The threshold check applies only to filtered
    /// strategies.
    pub fn check_invariants(&self, k_requested: usize, filtered: bool) -> Result<()> {
        let fail = |msg: String| {
            Err(invalid(format!(
                "mined record for `{}`: {msg}",
                self.query_id
            )))
        };
        if self.negatives.len() > k_requested {
            return fail(format!(
                "{} negatives exceed k = {k_requested}",
                self.negatives.len()
            ));
        }
        let mut seen = HashSet::new();
        for n in &self.negatives {
            if n.target_id == self.positive_id {
                return fail("positive appears among negatives".into());
            }
            if !seen.insert(n.target_id.as_str()) {
                return fail(format!("negative `{}` repeated", n.target_id));
            }
            if filtered && !(n.score < self.alpha_used * self.positive_score) {
                return fail(format!(
                    "negative `{}` scores {} which is not below {} x {}",
                    n.target_id, n.score, self.alpha_used, self.positive_score
                ));
            }
            if !(n.weight > 0.0 && n.weight.is_finite()) {
                return fail(format!(
                    "negative `{}` has weight {}",
                    n.target_id, n.weight
                ));
            }
        }
        if self.negatives.windows(2).any(|w| w[0].score < w[1].score) {
            return fail("negatives are not sorted by descending score".into());
        }
        let total: f64 = self.negatives.iter().map(|n| n.weight).sum();
        if (total - self.negatives.len() as f64).abs() > 1e-9 * self.negatives.len().max(1) as f64 {
            return fail(format!(
                "weights sum to {total}, expected {}",
                self.negatives.len()
            ));
        }
        Ok(())
    }
}

/// Accept pool members with `score < alpha · positive_score`, highest score
/// first, ties in pool order, until `k` are accepted.
pub fn select_below_threshold(
    pool: &[(String, f64)],
    positive_score: f64,
    alpha: f64,
    k: usize,
) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool[b].1.total_cmp(&pool[a].1));
    let threshold = alpha * positive_score;
    order
        .into_iter()
        .filter(|&i| pool[i].1 < threshold)
        .take(k)
        .map(|i| pool[i].clone())
        .collect()
}

/// Pool retrieval with `M` clamped to the corpus size minus the positive.
fn retrieve_pool(
    query: &Item,
    positive: &Item,
    index: &Index,
    stores: &CorpusStores,
    m: usize,
    warnings: &mut Vec<String>,
) -> Result<Vec<String>> {
    let available = index.len() - usize::from(index.contains(&positive.id));
    let m_used = if m > available {
        let w = format!("pool size {m} exceeds the {available} available candidates; clamped");
        log::warn!("query `{}`: {w}", query.id);
        warnings.push(w);
        available
    } else {
        m
    };
    if m_used == 0 {
        return Ok(Vec::new());
    }
    let exclude = HashSet::from([positive.id.clone()]);
    let list = index.top_k(
        &query.id,
        stores.query_vector(&query.id)?,
        m_used,
        Some(&exclude),
    )?;
    Ok(list.ids().map(str::to_string).collect())
}

fn reranker_scores(
    gateway: &Gateway,
    query: &Item,
    ids: &[String],
    stores: &CorpusStores,
    backend_id: &str,
) -> Result<Vec<f64>> {
    let results: Vec<Result<f64>> = ids
        .par_iter()
        .map(|id| {
            gateway
                .score_pair(query, id, stores.ecr(id)?, backend_id)
                .map(|s| s.score)
        })
        .collect();
    results.into_iter().collect()
}

fn cosine_to_query(index: &Index, query_vector: &[f32], id: &str) -> Result<f64> {
    let v = index
        .vector(id)
        .ok_or_else(|| Error::UnknownId(id.to_string()))?;
    Ok(dot(v, query_vector))
}

/// Mine hard negatives for one training pair. `gateway` is needed only for
/// [`MiningStrategy::Reranker`].
pub fn mine_hard_negatives(
    query: &Item,
    positive: &Item,
    index: &Index,
    stores: &CorpusStores,
    gateway: Option<&Gateway>,
    params: &MiningParams,
) -> Result<MinedNegatives> {
    params.validate()?;
    let mut warnings = Vec::new();
    let qv = stores.query_vector(&query.id)?;

    let (positive_score, negatives, pool_size) = match params.strategy {
        MiningStrategy::Reranker | MiningStrategy::Embedder => {
            let pool_ids = retrieve_pool(query, positive, index, stores, params.m, &mut warnings)?;
            let (positive_score, scores) = if params.strategy == MiningStrategy::Reranker {
                let gw = gateway
                    .ok_or_else(|| Error::Config("reranker mining needs a gateway".into()))?;
                let pos_ecr = positive
                    .ecr
                    .as_ref()
                    .or_else(|| stores.ecrs.get(&positive.id))
                    .ok_or_else(|| Error::MissingEcr(positive.id.clone()))?;
                let s_pos = gw
                    .score_pair(query, &positive.id, pos_ecr, &params.backend_id)?
                    .score;
                (
                    s_pos,
                    reranker_scores(gw, query, &pool_ids, stores, &params.backend_id)?,
                )
            } else {
                let s_pos = cosine_to_query(index, qv, &positive.id)?;
                let scores = pool_ids
                    .iter()
                    .map(|id| cosine_to_query(index, qv, id))
                    .collect::<Result<Vec<_>>>()?;
                (s_pos, scores)
            };
            let pool: Vec<(String, f64)> = pool_ids.into_iter().zip(scores).collect();
            let pool_size = pool.len();
            let kept = select_below_threshold(&pool, positive_score, params.alpha, params.k);
            (positive_score, kept, pool_size)
        }
        MiningStrategy::NaiveTopK => {
            let pool_ids = retrieve_pool(query, positive, index, stores, params.m, &mut warnings)?;
            let s_pos = cosine_to_query(index, qv, &positive.id)?;
            let kept = pool_ids
                .iter()
                .take(params.k)
                .map(|id| Ok((id.clone(), cosine_to_query(index, qv, id)?)))
                .collect::<Result<Vec<_>>>()?;
            (s_pos, kept, pool_ids.len())
        }
        MiningStrategy::Random => {
            let ids: Vec<&String> = index
                .embeddings()
                .ids()
                .iter()
                .filter(|id| **id != positive.id)
                .collect();
            let mut rng = rng_for(params.seed, &["random-negatives", &query.id]);
            let take = params.k.min(ids.len());
            let mut picked: Vec<usize> = sample(&mut rng, ids.len(), take).into_vec();
            picked.sort_unstable();
            let mut kept = picked
                .into_iter()
                .map(|i| Ok((ids[i].clone(), cosine_to_query(index, qv, ids[i])?)))
                .collect::<Result<Vec<_>>>()?;
            kept.sort_by(|a, b| b.1.total_cmp(&a.1));
            (cosine_to_query(index, qv, &positive.id)?, kept, ids.len())
        }
    };

    let mined = MinedNegatives {
        query_id: query.id.clone(),
        positive_id: positive.id.clone(),
        positive_score,
        negatives: negatives
            .into_iter()
            .map(|(target_id, score)| MinedNegative {
                target_id,
                score,
                weight: 1.0,
            })
            .collect(),
        alpha_used: params.alpha,
        pool_size_m: pool_size,
        warnings,
    };
    if mined.negatives.is_empty() {
        return Ok(mined);
    }
    assign_weights(mined, params.weights)
}

/// Set per-negative weights so that they sum to the number of negatives.
pub fn assign_weights(mut mined: MinedNegatives, scheme: WeightScheme) -> Result<MinedNegatives> {
    if mined.negatives.is_empty() {
        return Err(invalid(format!(
            "no negatives to weight for `{}`",
            mined.query_id
        )));
    }
    match scheme {
        WeightScheme::Uniform => mined.negatives.iter_mut().for_each(|n| n.weight = 1.0),
        WeightScheme::ScoreSoftmax { temp } => {
            if !(temp > 0.0 && temp.is_finite()) {
                return Err(invalid(format!(
                    "softmax temperature must be positive, got {temp}"
                )));
            }
            let logits: Vec<f64> = mined.negatives.iter().map(|n| n.score / temp).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let n = mined.negatives.len() as f64;
            for (neg, e) in mined.negatives.iter_mut().zip(exps) {
                neg.weight = n * e / total;
            }
        }
    }
    Ok(mined)
}

/// A training pair as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_id: String,
    pub positive_id: String,
}

/// First line of a mined dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningHeader {
    pub alpha: f64,
    pub k: usize,
    pub m: usize,
    pub weights: WeightScheme,
    pub strategy: MiningStrategy,
    pub backend_id: String,
}

impl From<&MiningParams> for MiningHeader {
    fn from(p: &MiningParams) -> Self {
        MiningHeader {
            alpha: p.alpha,
            k: p.k,
            m: p.m,
            weights: p.weights,
            strategy: p.strategy,
            backend_id: p.backend_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningFailure {
    pub query_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningSummary {
    pub mined: usize,
    /// Pairs already present in the checkpoint.
    pub skipped: usize,
    pub failures: Vec<MiningFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MineCorpusOptions {
    /// Abort once failed / attempted exceeds this.
    pub max_failure_ratio: f64,
    /// Pairs mined concurrently between flushes.
    pub chunk_size: usize,
}

impl Default for MineCorpusOptions {
    fn default() -> Self {
        MineCorpusOptions {
            max_failure_ratio: 0.1,
            chunk_size: 32,
        }
    }
}

pub fn read_checkpoint(path: &Path) -> Result<BTreeSet<String>> {
    if !path.exists() {
        return Ok(BTreeSet::new());
    }
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn write_checkpoint(path: &Path, done: &BTreeSet<String>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        for id in done {
            writeln!(w, "{id}")?;
        }
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Read a mined dataset: header, then one record per line.
pub fn read_mined(path: &Path) -> Result<(MiningHeader, Vec<MinedNegatives>)> {
    let reader = BufReader::new(crate::io::open(path)?);
    let mut lines = reader.lines();
    let header_line = lines.next().ok_or_else(|| {
        Error::Format(format!(
            "{}: empty mined file, missing header",
            path.display()
        ))
    })??;
    let header: MiningHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    let mut records = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("{}: line {}: {e}", path.display(), n + 2)))?,
        );
    }
    Ok((header, records))
}

/// Mine every pair in input order, appending to `output` and recording
/// completed query ids in `checkpoint`. Pairs already in the checkpoint are
/// skipped; a set `stop` flag ends the run after the current chunk is
/// flushed.
#[allow(clippy::too_many_arguments)]
pub fn mine_corpus(
    pairs: &[TrainingPair],
    index: &Index,
    stores: &CorpusStores,
    gateway: Option<&Gateway>,
    params: &MiningParams,
    options: &MineCorpusOptions,
    output: &Path,
    checkpoint: &Path,
    stop: &AtomicBool,
) -> Result<MiningSummary> {
    params.validate()?;
    if options.chunk_size == 0 {
        return Err(Error::Config("chunk_size must be at least 1".into()));
    }
    let mut done = read_checkpoint(checkpoint)?;
    let resuming = !done.is_empty() && output.exists();
    if !resuming {
        done.clear();
    }
    let mut out = if resuming {
        BufWriter::new(OpenOptions::new().append(true).open(output)?)
    } else {
        let mut w = BufWriter::new(crate::io::create(output)?);
        serde_json::to_writer(&mut w, &MiningHeader::from(params))?;
        w.write_all(b"\n")?;
        w.flush()?;
        w
    };

    let mut summary = MiningSummary::default();
    let todo: Vec<&TrainingPair> = pairs
        .iter()
        .filter(|p| {
            let skip = done.contains(&p.query_id);
            summary.skipped += usize::from(skip);
            !skip
        })
        .collect();

    let mut attempted = 0usize;
    for chunk in todo.chunks(options.chunk_size) {
        if stop.load(Ordering::SeqCst) {
            return Err(Error::Interrupted);
        }
        let results: Vec<Result<MinedNegatives>> = chunk
            .par_iter()
            .map(|p| {
                let query = stores.query(&p.query_id)?;
                let positive = stores.candidate(&p.positive_id)?;
                mine_hard_negatives(query, positive, index, stores, gateway, params)
            })
            .collect();
        for (pair, result) in chunk.iter().zip(results) {
            attempted += 1;
            match result {
                Ok(record) => {
                    serde_json::to_writer(&mut out, &record)?;
                    out.write_all(b"\n")?;
                    done.insert(pair.query_id.clone());
                    summary.mined += 1;
                }
                Err(e) => {
                    log::warn!("mining `{}` failed: {e}", pair.query_id);
                    summary.failures.push(MiningFailure {
                        query_id: pair.query_id.clone(),
                        error: e.to_string(),
                    });
                }
            }
        }
        out.flush()?;
        write_checkpoint(checkpoint, &done)?;
        let failed = summary.failures.len();
        if failed as f64 > options.max_failure_ratio * attempted as f64 {
            return Err(Error::FailureRatioExceeded {
                failed,
                attempted,
                limit: options.max_failure_ratio,
            });
        }
    }
    write_checkpoint(checkpoint, &done)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalseNegativeReport {
    /// Mined (query, negative) pairs available for sampling.
    pub population: usize,
    pub judged: usize,
    pub judged_relevant: usize,
    /// judged_relevant / judged, in percent; 0 when nothing was judged.
    pub ratio_percent: f64,
}

/// Judge a seeded uniform sample of mined negatives; a score of at least
/// 0.5 counts as relevant, i.e. a false negative.
pub fn estimate_false_negative_ratio(
    records: &[MinedNegatives],
    stores: &CorpusStores,
    gateway: &Gateway,
    judge_backend: &str,
    sample_size: usize,
    seed: u64,
) -> Result<FalseNegativeReport> {
    if sample_size == 0 {
        return Err(invalid("sample_size must be at least 1"));
    }
    let population: Vec<(&str, &str)> = records
        .iter()
        .flat_map(|r| {
            r.negatives
                .iter()
                .map(move |n| (r.query_id.as_str(), n.target_id.as_str()))
        })
        .collect();
    let mut rng = rng_for(seed, &["false-negative-audit"]);
    let mut picked = sample(
        &mut rng,
        population.len(),
        sample_size.min(population.len()),
    )
    .into_vec();
    picked.sort_unstable();
    let verdicts: Vec<Result<bool>> = picked
        .par_iter()
        .map(|&i| {
            let (q, c) = population[i];
            let s = gateway.judge_pair(stores.query(q)?, c, stores.ecr(c)?, judge_backend)?;
            Ok(s.score >= 0.5)
        })
        .collect();
    let verdicts = verdicts.into_iter().collect::<Result<Vec<_>>>()?;
    let judged = verdicts.len();
    let judged_relevant = verdicts.iter().filter(|&&v| v).count();
    Ok(FalseNegativeReport {
        population: population.len(),
        judged,
        judged_relevant,
        ratio_percent: if judged == 0 {
            0.0
        } else {
            100.0 * judged_relevant as f64 / judged as f64
        },
    })
}
