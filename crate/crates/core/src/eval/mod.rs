//! Ranking metrics, the top-1 versus top-k gap report, the synthetic
//! benchmark generator, experiment grids and the toy embedder trainer.

pub mod experiment;
pub mod gap;
pub mod metrics;
pub mod synth;
pub mod toy;

pub use experiment::{
    run_experiment, run_experiment_in, sim_config_for, sim_descriptors, standard_sim_gateway,
    write_experiment_outputs, ExperimentConfig, ExperimentReport, ExperimentRow, ExperimentWorld,
    GridCell, SimSettings, SIM_JUDGE, SIM_LISTWISE, SIM_PAIRWISE, SIM_REASONER,
};
pub use gap::{topk_gap_report, GapRow};
pub use metrics::{
    ndcg_at_k, precision_at_k, recall_at_k, JudgmentRecord, MetricValue, RelevanceJudgments,
};
pub use synth::{generate_synthetic_corpus, SyntheticCorpus, SyntheticCorpusSpec};
pub use toy::{
    run_toy_study, train_toy_embedder, ToyStudyConfig, ToyStudyReport, ToyTrainConfig, ToyVariant,
};
