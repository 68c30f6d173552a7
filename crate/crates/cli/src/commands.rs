//! One function per subcommand, each a thin shell over a library call.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use cascade_core::eval::{
    generate_synthetic_corpus, precision_at_k, recall_at_k, run_experiment, run_toy_study,
    sim_config_for, sim_descriptors, write_experiment_outputs, ExperimentConfig, JudgmentRecord,
    RelevanceJudgments, SyntheticCorpusSpec, ToyStudyConfig, SIM_LISTWISE, SIM_PAIRWISE,
};
use cascade_core::gateway::{Gateway, ResponseCache, TemplateRegistry};
use cascade_core::io::{load_embeddings, load_jsonl, save_embeddings, save_jsonl};
use cascade_core::mining::{
    estimate_false_negative_ratio, mine_corpus, read_mined, MineCorpusOptions, MiningParams,
    MiningStrategy, TrainingPair, WeightScheme, DEFAULT_POOL_M,
};
use cascade_core::model::validate_corpus;
use cascade_core::pipeline::{run_queries, CorpusStores};
use cascade_core::seed::derive_seed;
use cascade_core::{EcrTrace, Index, Item, PipelineConfig, RerankMode, Role};
use serde::{Deserialize, Serialize};

use crate::config::{required, AppConfig};
use crate::error::CliError;
use crate::{
    AuditArgs, BuildIndexArgs, ExperimentArgs, MineArgs, OnOff, Preset, QueryArgs, SynthArgs,
    ToyArgs,
};

/// Set by the Ctrl-C handler; mining stops after the chunk in flight.
pub static STOP: AtomicBool = AtomicBool::new(false);

pub const SYNTH_ITEMS: &str = "items.jsonl";
pub const SYNTH_CANDIDATES: &str = "candidates.crv";
pub const SYNTH_QUERIES: &str = "queries.crv";
pub const SYNTH_JUDGMENTS: &str = "judgments.jsonl";
pub const SYNTH_PAIRS: &str = "pairs.jsonl";
pub const SYNTH_CONFIG: &str = "cascade.toml";

fn line<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<(), CliError> {
    serde_json::to_writer(&mut *out, value)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// TOML unless the extension says JSON.
fn read_structured<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

pub fn synth(args: &SynthArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut spec = match args.preset {
        Preset::Standard => SyntheticCorpusSpec::standard(),
        Preset::NearDuplicate => SyntheticCorpusSpec::near_duplicate(),
    };
    if let Some(n) = args.n_candidates {
        spec.n_candidates = n;
    }
    if let Some(n) = args.n_queries {
        spec.n_queries = n;
    }
    if let Some(d) = args.dim {
        spec.dim = d;
    }
    if let Some(s) = args.signal {
        spec.signal_strength = s;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic_corpus(&spec)?;
    let dir = &args.out;
    std::fs::create_dir_all(dir)?;
    save_jsonl(&corpus.items, &dir.join(SYNTH_ITEMS))?;
    save_embeddings(&corpus.candidate_embeddings, &dir.join(SYNTH_CANDIDATES))?;
    save_embeddings(&corpus.query_embeddings, &dir.join(SYNTH_QUERIES))?;
    save_jsonl(&corpus.judgments.to_records(), &dir.join(SYNTH_JUDGMENTS))?;
    save_jsonl(&corpus.pairs, &dir.join(SYNTH_PAIRS))?;
    std::fs::write(
        dir.join(SYNTH_CONFIG),
        format!(
            "[paths]\ncorpus = \"{SYNTH_ITEMS}\"\nembeddings = \"{SYNTH_CANDIDATES}\"\n\
             query_embeddings = \"{SYNTH_QUERIES}\"\njudgments = \"{SYNTH_JUDGMENTS}\"\n\
             pairs = \"{SYNTH_PAIRS}\"\noutput_dir = \"out\"\n"
        ),
    )?;
    line(
        out,
        &serde_json::json!({
            "spec": spec,
            "candidates": corpus.candidate_embeddings.len(),
            "queries": corpus.query_embeddings.len(),
        }),
    )
}

pub fn build_index(
    cfg: &AppConfig,
    args: &BuildIndexArgs,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let src = match &args.embeddings {
        Some(p) => p.as_path(),
        None => required(&cfg.paths.embeddings, "embeddings")?,
    };
    let index = Index::build(load_embeddings(src)?)?;
    save_embeddings(index.embeddings(), &args.out)?;
    line(
        out,
        &serde_json::json!({ "items": index.len(), "dim": index.dim(), "out": args.out }),
    )
}

/// Candidate trace override, one per line of the ECR store.
#[derive(Debug, Deserialize)]
struct EcrRecord {
    id: String,
    ecr: EcrTrace,
}

struct World {
    index: Index,
    stores: CorpusStores,
    judgments: Option<RelevanceJudgments>,
}

fn load_items(cfg: &AppConfig) -> Result<Vec<Item>, CliError> {
    let mut items: Vec<Item> = load_jsonl(required(&cfg.paths.corpus, "corpus")?)?;
    if let Some(store) = &cfg.paths.ecr_store {
        let records: Vec<EcrRecord> = load_jsonl(required(&Some(store.clone()), "ecr store")?)?;
        let mut by_id: BTreeMap<String, EcrTrace> =
            records.into_iter().map(|r| (r.id, r.ecr)).collect();
        for item in items.iter_mut().filter(|i| i.role == Role::Candidate) {
            if let Some(ecr) = by_id.remove(&item.id) {
                item.ecr = Some(ecr);
            }
        }
        if let Some(id) = by_id.keys().next() {
            return Err(CliError::Input(format!(
                "ECR store names unknown candidate `{id}`"
            )));
        }
    }
    Ok(items)
}

fn load_judgments(cfg: &AppConfig) -> Result<Option<RelevanceJudgments>, CliError> {
    match &cfg.paths.judgments {
        None => Ok(None),
        Some(p) => {
            let records: Vec<JudgmentRecord> =
                load_jsonl(required(&Some(p.clone()), "judgments")?)?;
            Ok(Some(RelevanceJudgments::from_records(records)?))
        }
    }
}

fn load_world(cfg: &AppConfig) -> Result<World, CliError> {
    let items = load_items(cfg)?;
    let index = Index::build(load_embeddings(required(
        &cfg.paths.embeddings,
        "embeddings",
    )?)?)?;
    let queries = load_embeddings(required(&cfg.paths.query_embeddings, "query embeddings")?)?;
    if queries.dim() != index.dim() {
        return Err(cascade_core::Error::DimensionMismatch {
            expected: index.dim(),
            got: queries.dim(),
        }
        .into());
    }
    let stores = CorpusStores::from_items(&items, queries)?;
    Ok(World {
        index,
        stores,
        judgments: load_judgments(cfg)?,
    })
}

/// Registered backends, with simulated ones seeded from `seed`.
fn build_gateway(
    cfg: &AppConfig,
    judgments: Option<&RelevanceJudgments>,
    seed: u64,
) -> Result<Gateway, CliError> {
    let descriptors = if cfg.backends.is_empty() {
        sim_descriptors()
    } else {
        cfg.backends.clone()
    };
    let mut builder = Gateway::builder();
    let mut planted: Option<Arc<RelevanceJudgments>> = None;
    for d in descriptors {
        if d.is_sim() {
            let p = match &planted {
                Some(p) => Arc::clone(p),
                None => {
                    let j = judgments.ok_or_else(|| {
                        CliError::Config(format!(
                            "simulated backend `{}` needs a judgments path",
                            d.backend_id
                        ))
                    })?;
                    planted.insert(Arc::new(j.clone())).clone()
                }
            };
            let mut sim = sim_config_for(&cfg.sim, &d.backend_id).clone();
            sim.seed = derive_seed(seed, &format!("sim:{}", d.backend_id));
            builder = builder.sim_backend(d, sim, p)?;
        } else {
            builder = builder.http_backend(d);
        }
    }
    if let Some(path) = &cfg.paths.templates {
        let registry: TemplateRegistry =
            read_structured(required(&Some(path.clone()), "templates")?)?;
        builder = builder.templates(registry);
    }
    builder = builder.cache(
        match ResponseCache::resolve_dir(cfg.paths.cache_dir.as_deref()) {
            Some(dir) => ResponseCache::open(&dir)?,
            None => ResponseCache::in_memory(),
        },
    );
    Ok(builder.build()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryCommand {
    Retrieve,
    Rerank,
    Pipeline,
}

impl QueryCommand {
    fn name(self) -> &'static str {
        match self {
            QueryCommand::Retrieve => "retrieve",
            QueryCommand::Rerank => "rerank",
            QueryCommand::Pipeline => "pipeline",
        }
    }
}

/// Per-run summary written next to the result lines.
#[derive(Debug, Serialize)]
struct QueryReport {
    command: &'static str,
    pipeline: PipelineConfig,
    n_queries: usize,
    backend_calls: u64,
    chars_sent: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    p_at_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage1_r_at_top_k: Option<f64>,
}

fn pipeline_config(
    cfg: &AppConfig,
    which: QueryCommand,
    args: &QueryArgs,
) -> Result<PipelineConfig, CliError> {
    let mut p = cfg.defaults.clone();
    if let Some(k) = args.top_k {
        p.top_k = k;
    }
    if let Some(m) = &args.mode {
        p.rerank_mode = m.parse()?;
    }
    if let Some(q) = args.qar {
        p.qar_enabled = q == OnOff::On;
    }
    if let Some(s) = args.seed {
        p.rng_seed = s;
    }
    match which {
        QueryCommand::Retrieve => {
            p.rerank_mode = RerankMode::None;
            p.qar_enabled = false;
        }
        QueryCommand::Rerank if p.rerank_mode == RerankMode::None => {
            return Err(CliError::Config(
                "rerank needs --mode pairwise or listwise".into(),
            ));
        }
        _ => {}
    }
    if let Some(b) = &args.backend {
        p.reranker_backend = if b == "sim" {
            match p.rerank_mode {
                RerankMode::Listwise => SIM_LISTWISE,
                _ => SIM_PAIRWISE,
            }
            .to_string()
        } else {
            b.clone()
        };
    } else if p.rerank_mode == RerankMode::Listwise && p.reranker_backend == SIM_PAIRWISE {
        p.reranker_backend = SIM_LISTWISE.into();
    }
    p.validate()?;
    Ok(p)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

pub fn query(
    cfg: &AppConfig,
    which: QueryCommand,
    args: &QueryArgs,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let pipeline = pipeline_config(cfg, which, args)?;
    let world = load_world(cfg)?;
    let gateway = build_gateway(cfg, world.judgments.as_ref(), pipeline.rng_seed)?;
    let query_ids: Vec<String> = if args.query_ids.is_empty() {
        world.stores.queries.keys().cloned().collect()
    } else {
        args.query_ids.clone()
    };
    let results = run_queries(&gateway, &query_ids, &world.index, &world.stores, &pipeline)?;
    for r in &results {
        line(out, r)?;
    }

    let (mut p1, mut rk) = (Vec::new(), Vec::new());
    if let Some(j) = &world.judgments {
        for r in results
            .iter()
            .filter(|r| !j.relevant_ids(&r.query_id).is_empty())
        {
            p1.push(precision_at_k(&r.final_ranking, j, 1)?.value);
            rk.push(recall_at_k(&r.stage1, j, pipeline.top_k)?.value);
        }
    }
    let report = QueryReport {
        command: which.name(),
        n_queries: results.len(),
        backend_calls: results.iter().map(|r| r.token_budget.backend_calls).sum(),
        chars_sent: results.iter().map(|r| r.token_budget.chars_sent).sum(),
        p_at_1: mean(&p1),
        stage1_r_at_top_k: mean(&rk),
        pipeline,
    };
    let path = args.report.clone().or_else(|| {
        cfg.paths
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("{}.json", which.name())))
    });
    if let Some(path) = path {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")?;
        log::info!("report written to {}", path.display());
    }
    Ok(())
}

fn output_path(
    explicit: &Option<PathBuf>,
    cfg: &AppConfig,
    name: &str,
) -> Result<PathBuf, CliError> {
    explicit
        .clone()
        .or_else(|| cfg.paths.output_dir.as_ref().map(|d| d.join(name)))
        .ok_or_else(|| {
            CliError::Config(format!(
                "no output path: pass --out or set paths.output_dir for {name}"
            ))
        })
}

pub fn mine(cfg: &AppConfig, args: &MineArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(cfg.defaults.rng_seed);
    let params = MiningParams {
        m: args.m.unwrap_or(DEFAULT_POOL_M),
        k: args.k.unwrap_or(cfg.defaults.mined_k),
        alpha: args.alpha.unwrap_or(cfg.defaults.alpha),
        strategy: match &args.strategy {
            Some(s) => s.parse()?,
            None => MiningStrategy::Reranker,
        },
        weights: match &args.weights {
            Some(w) => w.parse()?,
            None => WeightScheme::Uniform,
        },
        backend_id: args
            .backend
            .clone()
            .unwrap_or_else(|| cfg.defaults.reranker_backend.clone()),
        seed,
    };
    params.validate()?;
    let mut options = MineCorpusOptions::default();
    if let Some(c) = args.chunk_size {
        options.chunk_size = c;
    }
    if let Some(r) = args.max_failure_ratio {
        options.max_failure_ratio = r;
    }
    let pairs_path = match &args.pairs {
        Some(p) => required(&Some(p.clone()), "pairs")?.to_path_buf(),
        None => required(&cfg.paths.pairs, "pairs")?.to_path_buf(),
    };
    let pairs: Vec<TrainingPair> = load_jsonl(&pairs_path)?;
    let output = output_path(&args.out, cfg, "mined.jsonl")?;
    if let Some(dir) = output.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let checkpoint = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| output.with_extension("ckpt"));

    let world = load_world(cfg)?;
    let gateway = match params.strategy {
        MiningStrategy::Reranker => Some(build_gateway(cfg, world.judgments.as_ref(), seed)?),
        _ => None,
    };
    let summary = mine_corpus(
        &pairs,
        &world.index,
        &world.stores,
        gateway.as_ref(),
        &params,
        &options,
        &output,
        &checkpoint,
        &STOP,
    )?;
    writeln!(out, "mined: {}", summary.mined)?;
    writeln!(out, "skipped: {}", summary.skipped)?;
    writeln!(out, "failed: {}", summary.failures.len())?;
    Ok(())
}

pub fn audit(cfg: &AppConfig, args: &AuditArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (header, records) = read_mined(&args.mined)?;
    for r in &records {
        if r.alpha_used != header.alpha {
            return Err(CliError::Input(format!(
                "record `{}` used alpha {} but the header says {}",
                r.query_id, r.alpha_used, header.alpha
            )));
        }
        r.check_invariants(header.k, header.strategy.is_filtered())?;
    }
    log::info!("{} mined records satisfy their invariants", records.len());
    let world = load_world(cfg)?;
    let seed = args.seed.unwrap_or(cfg.defaults.rng_seed);
    let gateway = build_gateway(cfg, world.judgments.as_ref(), seed)?;
    let report = estimate_false_negative_ratio(
        &records,
        &world.stores,
        &gateway,
        &args.judge,
        args.sample,
        seed,
    )?;
    line(out, &report)
}

/// Reseed every random stream of an experiment from one seed.
fn reseed_sim(sim: &mut cascade_core::eval::SimSettings, seed: u64) {
    sim.reasoner.seed = derive_seed(seed, "sim:reasoner");
    sim.reranker.seed = derive_seed(seed, "sim:reranker");
    sim.judge.seed = derive_seed(seed, "sim:judge");
}

pub fn experiment(
    cfg: &AppConfig,
    args: &ExperimentArgs,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut exp: ExperimentConfig = read_structured(&args.grid)?;
    if let Some(seed) = args.seed {
        exp.corpus.seed = derive_seed(seed, "corpus");
        exp.pipeline.rng_seed = seed;
        reseed_sim(&mut exp.sim, seed);
    }
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => cfg.paths.output_dir.clone().ok_or_else(|| {
            CliError::Config("no output directory: pass --out or set paths.output_dir".into())
        })?,
    };
    let report = run_experiment(&exp)?;
    write_experiment_outputs(&report, &dir)?;
    for row in &report.rows {
        line(out, row)?;
    }
    for row in &report.gap {
        line(out, row)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ToySummary<'a> {
    label: &'a str,
    initial_p_at_1: f64,
    final_p_at_1: f64,
    final_loss: Option<f64>,
    false_negative_percent: Option<f64>,
}

pub fn toy_train(_cfg: &AppConfig, args: &ToyArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut study: ToyStudyConfig = match &args.study {
        Some(p) => read_structured(p)?,
        None => ToyStudyConfig::default(),
    };
    if let Some(e) = args.epochs {
        study.train.epochs = e;
    }
    if let Some(seed) = args.seed {
        study.corpus.seed = derive_seed(seed, "corpus");
        study.train.seed = derive_seed(seed, "train");
        study.audit_seed = derive_seed(seed, "audit");
        reseed_sim(&mut study.sim, seed);
    }
    let report = run_toy_study(&study)?;
    for v in &report.variants {
        line(
            out,
            &ToySummary {
                label: &v.label,
                initial_p_at_1: v.initial_p_at_1,
                final_p_at_1: v.final_p_at_1,
                final_loss: v.epoch_losses.last().copied(),
                false_negative_percent: report
                    .false_negatives
                    .get(&v.label)
                    .map(|f| f.ratio_percent),
            },
        )?;
    }
    if let Some(path) = &args.out {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string(&report)? + "\n")?;
    }
    Ok(())
}

pub fn validate(cfg: &AppConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let items = load_items(cfg)?;
    let embeddings = load_embeddings(required(&cfg.paths.embeddings, "embeddings")?)?;
    let report = validate_corpus(&items, &embeddings);
    line(out, &report)?;
    if report.ok {
        Ok(())
    } else {
        Err(CliError::Input(format!(
            "corpus has {} violation(s)",
            report.violations.len()
        )))
    }
}

/// Install the Ctrl-C handler that sets [`STOP`].
pub fn install_interrupt_handler() {
    if let Err(e) = ctrlc::set_handler(|| {
        eprintln!("interrupt received; finishing the current chunk");
        STOP.store(true, Ordering::SeqCst);
    }) {
        log::warn!("could not install the interrupt handler: {e}");
    }
}
