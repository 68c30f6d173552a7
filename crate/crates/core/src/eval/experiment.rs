//! Experiment grids over a synthetic corpus with simulated backends.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gap::{topk_gap_report, GapRow};
use super::metrics::{ndcg_at_k, precision_at_k, recall_at_k, RelevanceJudgments};
use super::synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};
use crate::error::{invalid, Error, Result};
use crate::gateway::{BackendDescriptor, BackendKind, Gateway, SimBackendConfig, TokenBudget};
use crate::index::Index;
use crate::model::{PipelineConfig, RankedList, RerankMode};
use crate::pipeline::{run_queries, CorpusStores};

pub const SIM_REASONER: &str = "sim-reasoner";
pub const SIM_PAIRWISE: &str = "sim-pairwise";
pub const SIM_LISTWISE: &str = "sim-listwise";
pub const SIM_JUDGE: &str = "sim-judge";

/// Simulator settings for the standard backend set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub reasoner: SimBackendConfig,
    pub reranker: SimBackendConfig,
    pub judge: SimBackendConfig,
}

/// Descriptors of the standard simulated backends.
pub fn sim_descriptors() -> Vec<BackendDescriptor> {
    vec![
        BackendDescriptor::sim(SIM_REASONER, BackendKind::Reasoner),
        BackendDescriptor::sim(SIM_PAIRWISE, BackendKind::PairwiseReranker),
        BackendDescriptor::sim(SIM_LISTWISE, BackendKind::ListwiseRanker),
        BackendDescriptor::sim(SIM_JUDGE, BackendKind::PairwiseReranker),
    ]
}

/// Sim config serving a given backend id.
pub fn sim_config_for<'a>(settings: &'a SimSettings, backend_id: &str) -> &'a SimBackendConfig {
    match backend_id {
        SIM_REASONER => &settings.reasoner,
        SIM_JUDGE => &settings.judge,
        _ => &settings.reranker,
    }
}

/// A gateway with the four standard simulated backends.
pub fn standard_sim_gateway(
    settings: &SimSettings,
    planted: Arc<RelevanceJudgments>,
) -> Result<Gateway> {
    let mut builder = Gateway::builder();
    for d in sim_descriptors() {
        let cfg = sim_config_for(settings, &d.backend_id).clone();
        builder = builder.sim_backend(d, cfg, Arc::clone(&planted))?;
    }
    builder.build()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub rerank_mode: RerankMode,
    #[serde(default)]
    pub qar: bool,
    pub top_k: usize,
    /// Reranker backend; defaults to the simulated one matching the mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
}

impl GridCell {
    pub fn backend_id(&self) -> String {
        self.backend.clone().unwrap_or_else(|| {
            match self.rerank_mode {
                RerankMode::Listwise => SIM_LISTWISE,
                _ => SIM_PAIRWISE,
            }
            .to_string()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: SyntheticCorpusSpec,
    #[serde(default)]
    pub sim: SimSettings,
    /// Settings shared by all cells; each cell overrides mode, rewriting,
    /// top k and reranker.
    #[serde(default)]
    pub pipeline: PipelineConfig,
    pub grid: Vec<GridCell>,
    #[serde(default = "default_task")]
    pub task: String,
}

fn default_task() -> String {
    "synthetic".into()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config("experiment grid is empty".into()));
        }
        self.corpus.validate()?;
        for cell in &self.grid {
            self.cell_pipeline(cell).validate()?;
        }
        Ok(())
    }

    pub fn cell_pipeline(&self, cell: &GridCell) -> PipelineConfig {
        PipelineConfig {
            top_k: cell.top_k,
            rerank_mode: cell.rerank_mode,
            qar_enabled: cell.qar,
            reranker_backend: cell.backend_id(),
            ..self.pipeline.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub cell: usize,
    pub rerank_mode: RerankMode,
    pub qar: bool,
    pub top_k: usize,
    pub backend: String,
    pub n_queries: usize,
    /// P@1 of the final ranking.
    pub p_at_1: f64,
    pub ndcg_at_5: f64,
    pub stage1_p_at_1: f64,
    /// Stage-1 recall at `top_k`: the most a reranker can reach.
    pub stage1_r_at_top_k: f64,
    pub ceiling_holds: bool,
    pub token_budget: TokenBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub corpus: SyntheticCorpusSpec,
    pub rows: Vec<ExperimentRow>,
    pub gap: Vec<GapRow>,
}

/// Everything built from an experiment's corpus spec.
pub struct ExperimentWorld {
    pub corpus: SyntheticCorpus,
    pub index: Index,
    pub stores: CorpusStores,
    pub gateway: Gateway,
}

impl ExperimentWorld {
    pub fn build(spec: &SyntheticCorpusSpec, sim: &SimSettings) -> Result<Self> {
        let corpus = generate_synthetic_corpus(spec)?;
        Self::from_corpus(corpus, sim)
    }

    pub fn from_corpus(corpus: SyntheticCorpus, sim: &SimSettings) -> Result<Self> {
        let index = Index::build(corpus.candidate_embeddings.clone())?;
        let stores = CorpusStores::from_items(&corpus.items, corpus.query_embeddings.clone())?;
        let gateway = standard_sim_gateway(sim, Arc::new(corpus.judgments.clone()))?;
        Ok(ExperimentWorld {
            corpus,
            index,
            stores,
            gateway,
        })
    }
}

fn mean(values: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let mut n = 0usize;
    let mut sum = 0.0;
    for v in values {
        sum += v?;
        n += 1;
    }
    if n == 0 {
        return Err(invalid("no values to average"));
    }
    Ok(sum / n as f64)
}

fn evaluate_cell(
    world: &ExperimentWorld,
    cfg: &ExperimentConfig,
    idx: usize,
    cell: &GridCell,
) -> Result<ExperimentRow> {
    let pipeline = cfg.cell_pipeline(cell);
    let query_ids = world.corpus.query_ids();
    let results = run_queries(
        &world.gateway,
        &query_ids,
        &world.index,
        &world.stores,
        &pipeline,
    )?;
    let j = &world.corpus.judgments;
    let p1 = mean(
        results
            .iter()
            .map(|r| Ok(precision_at_k(&r.final_ranking, j, 1)?.value)),
    )?;
    let ndcg5 = mean(
        results
            .iter()
            .map(|r| Ok(ndcg_at_k(&r.final_ranking, j, 5)?.value)),
    )?;
    let s1_p1 = mean(
        results
            .iter()
            .map(|r| Ok(precision_at_k(&r.stage1, j, 1)?.value)),
    )?;
    let s1_rk = mean(
        results
            .iter()
            .map(|r| Ok(recall_at_k(&r.stage1, j, cell.top_k)?.value)),
    )?;
    let mut budget = TokenBudget::default();
    for r in &results {
        budget += r.token_budget;
    }
    Ok(ExperimentRow {
        cell: idx,
        rerank_mode: cell.rerank_mode,
        qar: cell.qar,
        top_k: cell.top_k,
        backend: if cell.rerank_mode == RerankMode::None {
            String::new()
        } else {
            cell.backend_id()
        },
        n_queries: results.len(),
        p_at_1: p1,
        ndcg_at_5: ndcg5,
        stage1_p_at_1: s1_p1,
        stage1_r_at_top_k: s1_rk,
        ceiling_holds: p1 <= s1_rk + 1e-12,
        token_budget: budget,
    })
}

/// Stage-1 rankings of every query at depth `k`.
pub fn stage1_rankings(world: &ExperimentWorld, k: usize) -> Result<Vec<RankedList>> {
    world
        .corpus
        .query_ids()
        .iter()
        .map(|q| world.index.top_k(q, world.stores.query_vector(q)?, k, None))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let world = ExperimentWorld::build(&cfg.corpus, &cfg.sim)?;
    run_experiment_in(&world, cfg)
}

/// [`run_experiment`] against an already built world.
pub fn run_experiment_in(
    world: &ExperimentWorld,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let rows: Vec<Result<ExperimentRow>> = cfg
        .grid
        .par_iter()
        .enumerate()
        .map(|(i, cell)| evaluate_cell(world, cfg, i, cell))
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let labelled: Vec<(String, RankedList)> = stage1_rankings(world, 10)?
        .into_iter()
        .map(|r| (cfg.task.clone(), r))
        .collect();
    let gap = topk_gap_report(&labelled, &world.corpus.judgments, (1, 10))?;
    Ok(ExperimentReport {
        task: cfg.task.clone(),
        corpus: cfg.corpus.clone(),
        rows,
        gap,
    })
}

pub const REPORT_FILE: &str = "report.jsonl";
pub const BUDGET_PLOT_FILE: &str = "budget.tsv";
pub const GAP_PLOT_FILE: &str = "gap.tsv";

/// Report lines: a header with the task and corpus, one line per cell, one
/// line per gap row.
pub fn render_report(report: &ExperimentReport) -> Result<String> {
    let mut out = String::new();
    let header = serde_json::json!({ "task": report.task, "corpus": report.corpus });
    writeln!(out, "{header}").expect("write to string");
    for row in &report.rows {
        writeln!(out, "{}", serde_json::to_string(row)?).expect("write to string");
    }
    for row in &report.gap {
        let line = serde_json::json!({ "gap": row });
        writeln!(out, "{line}").expect("write to string");
    }
    Ok(out)
}

/// Tab-separated plot columns: token cost against P@1 per cell, and the
/// top-1/top-k gap per task.
pub fn render_plot_data(report: &ExperimentReport) -> (String, String) {
    let mut budget =
        String::from("cell\trerank_mode\tqar\ttop_k\tbackend_calls\tchars_sent\tp_at_1\n");
    for r in &report.rows {
        writeln!(
            budget,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.cell,
            r.rerank_mode,
            r.qar,
            r.top_k,
            r.token_budget.backend_calls,
            r.token_budget.chars_sent,
            r.p_at_1
        )
        .expect("write to string");
    }
    let mut gap = String::from("task\tk_lo\tk_hi\tp_at_lo\tp_at_hi\tr_at_hi\tndcg_at_hi\tgap\n");
    for g in &report.gap {
        writeln!(
            gap,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            g.task, g.k_lo, g.k_hi, g.p_at_lo, g.p_at_hi, g.r_at_hi, g.ndcg_at_hi, g.gap
        )
        .expect("write to string");
    }
    (budget, gap)
}

pub fn write_experiment_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), render_report(report)?)?;
    let (budget, gap) = render_plot_data(report);
    fs::write(dir.join(BUDGET_PLOT_FILE), budget)?;
    fs::write(dir.join(GAP_PLOT_FILE), gap)?;
    Ok(())
}
