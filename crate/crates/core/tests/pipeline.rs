use std::collections::BTreeSet;

use cascade_core::eval::{
    precision_at_k, recall_at_k, ExperimentWorld, SimSettings, SyntheticCorpusSpec, SIM_LISTWISE,
    SIM_PAIRWISE, SIM_REASONER,
};
use cascade_core::gateway::SimBackendConfig;
use cascade_core::pipeline::{run_ecrr, run_queries, run_query};
use cascade_core::{PipelineConfig, RankedList, RerankMode, Stage};

fn spec(n_queries: usize) -> SyntheticCorpusSpec {
    SyntheticCorpusSpec {
        n_candidates: 300,
        n_queries,
        ..SyntheticCorpusSpec::standard()
    }
}

fn sim(reasoner_fidelity: f64, reranker_fidelity: f64, evidence: Option<f64>) -> SimSettings {
    SimSettings {
        reasoner: SimBackendConfig {
            fidelity: reasoner_fidelity,
            ..SimBackendConfig::default()
        },
        reranker: SimBackendConfig {
            seed: 1,
            fidelity: reranker_fidelity,
            noise_scale: 0.05,
            evidence_fidelity: evidence,
        },
        judge: SimBackendConfig::default(),
    }
}

fn cfg(mode: RerankMode, qar: bool, k: usize) -> PipelineConfig {
    PipelineConfig {
        top_k: k,
        rerank_mode: mode,
        qar_enabled: qar,
        reranker_backend: if mode == RerankMode::Listwise {
            SIM_LISTWISE
        } else {
            SIM_PAIRWISE
        }
        .into(),
        reasoner_backend: SIM_REASONER.into(),
        ..PipelineConfig::default()
    }
}

fn ids(l: &RankedList) -> Vec<String> {
    l.ids().map(str::to_string).collect()
}

#[test]
fn reranking_never_beats_the_stage1_ceiling() {
    let w = ExperimentWorld::build(&spec(60), &sim(0.7, 0.6, None)).unwrap();
    let j = &w.corpus.judgments;
    for (mode, qar) in [
        (RerankMode::Pairwise, false),
        (RerankMode::Pairwise, true),
        (RerankMode::Listwise, false),
        (RerankMode::Listwise, true),
    ] {
        for k in [1, 5, 10] {
            let rs = run_queries(
                &w.gateway,
                &w.corpus.query_ids(),
                &w.index,
                &w.stores,
                &cfg(mode, qar, k),
            )
            .unwrap();
            for r in rs {
                let p1 = precision_at_k(&r.final_ranking, j, 1).unwrap().value;
                let ceiling = recall_at_k(&r.stage1, j, k).unwrap().value;
                assert!(p1 <= ceiling);
                let (a, b): (BTreeSet<String>, BTreeSet<String>) = (
                    ids(&r.stage1).into_iter().collect(),
                    ids(&r.final_ranking).into_iter().collect(),
                );
                assert_eq!(a, b);
                r.final_ranking.validate().unwrap();
            }
        }
    }
}

#[test]
fn faithful_reranker_reaches_the_ceiling() {
    let w = ExperimentWorld::build(&spec(80), &sim(1.0, 1.0, None)).unwrap();
    let j = &w.corpus.judgments;
    for mode in [RerankMode::Pairwise, RerankMode::Listwise] {
        let rs = run_queries(
            &w.gateway,
            &w.corpus.query_ids(),
            &w.index,
            &w.stores,
            &cfg(mode, false, 10),
        )
        .unwrap();
        for r in rs {
            assert_eq!(
                precision_at_k(&r.final_ranking, j, 1).unwrap().value,
                recall_at_k(&r.stage1, j, 10).unwrap().value
            );
        }
    }
}

#[test]
fn faithful_rewriting_puts_the_positive_first() {
    // the reranker is a coin flip on original traces but reads evidence
    let w = ExperimentWorld::build(&spec(100), &sim(1.0, 0.5, Some(1.0))).unwrap();
    let j = &w.corpus.judgments;
    let rs = run_queries(
        &w.gateway,
        &w.corpus.query_ids(),
        &w.index,
        &w.stores,
        &cfg(RerankMode::Pairwise, true, 10),
    )
    .unwrap();
    let mut hits = 0;
    for r in &rs {
        if recall_at_k(&r.stage1, j, 10).unwrap().value == 1.0 {
            assert_eq!(
                precision_at_k(&r.final_ranking, j, 1).unwrap().value,
                1.0,
                "{}",
                r.query_id
            );
            hits += 1;
        }
    }
    assert!(hits >= 90);
}

#[test]
fn call_budgets_per_query() {
    let w = ExperimentWorld::build(&spec(10), &sim(0.9, 0.9, None)).unwrap();
    for (mode, qar, want) in [
        (RerankMode::None, false, 0),
        (RerankMode::None, true, 0),
        (RerankMode::Pairwise, false, 10),
        (RerankMode::Pairwise, true, 20),
        (RerankMode::Listwise, false, 1),
        (RerankMode::Listwise, true, 11),
    ] {
        for q in w.corpus.query_ids() {
            let r = run_query(&w.gateway, &q, &w.index, &w.stores, &cfg(mode, qar, 10)).unwrap();
            assert_eq!(r.token_budget.backend_calls, want, "{mode} qar={qar}");
        }
    }
}

#[test]
fn empty_candidate_list_costs_nothing() {
    let w = ExperimentWorld::build(&spec(2), &sim(1.0, 1.0, None)).unwrap();
    let q = w.stores.query(&w.corpus.query_ids()[0]).unwrap();
    let empty = RankedList {
        query_id: q.id.clone(),
        entries: Vec::new(),
        stage: Stage::Retrieval,
        truncated_at: 10,
    };
    for (mode, backend) in [
        (RerankMode::Pairwise, SIM_PAIRWISE),
        (RerankMode::Listwise, SIM_LISTWISE),
    ] {
        let gw = w.gateway.metered();
        let out = run_ecrr(&gw, q, &empty, &[], mode, backend).unwrap();
        assert!(out.is_empty());
        assert_eq!(gw.usage().backend_calls, 0);
    }
}

#[test]
fn rewrite_then_rerank_composes_gateway_calls() {
    let w = ExperimentWorld::build(&spec(20), &sim(0.8, 0.7, Some(0.9))).unwrap();
    for q in w.corpus.query_ids() {
        let r = run_query(
            &w.gateway,
            &q,
            &w.index,
            &w.stores,
            &cfg(RerankMode::Pairwise, true, 8),
        )
        .unwrap();
        let query = w.stores.query(&q).unwrap();
        let mut scored: Vec<(String, f64)> = r
            .stage1
            .ids()
            .map(|id| {
                let cand = w.stores.candidate(id).unwrap();
                let t = w
                    .gateway
                    .rewrite_qar(query, cand, w.stores.ecr(id).unwrap(), SIM_REASONER)
                    .unwrap();
                assert_eq!(r.per_candidate_traces[id], t);
                (
                    id.to_string(),
                    w.gateway
                        .score_pair(query, id, &t, SIM_PAIRWISE)
                        .unwrap()
                        .score,
                )
            })
            .collect();
        // insertion sort keeps stage-1 order among equal scores
        for i in 1..scored.len() {
            let mut j = i;
            while j > 0 && scored[j - 1].1 < scored[j].1 {
                scored.swap(j - 1, j);
                j -= 1;
            }
        }
        let got: Vec<(String, f64)> = r
            .final_ranking
            .entries
            .iter()
            .map(|e| (e.item_id.clone(), e.score))
            .collect();
        assert_eq!(got, scored);
    }
}

#[test]
fn listwise_with_rewriting_is_reproducible() {
    let mut outputs = Vec::new();
    for _ in 0..3 {
        let w = ExperimentWorld::build(&spec(30), &sim(0.8, 0.7, Some(0.9))).unwrap();
        let rs = run_queries(
            &w.gateway,
            &w.corpus.query_ids(),
            &w.index,
            &w.stores,
            &cfg(RerankMode::Listwise, true, 10),
        )
        .unwrap();
        outputs.push(serde_json::to_vec(&rs).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn single_candidate_is_left_alone() {
    let w = ExperimentWorld::build(&spec(10), &sim(0.5, 0.5, None)).unwrap();
    for mode in [RerankMode::Pairwise, RerankMode::Listwise] {
        for q in w.corpus.query_ids() {
            let r = run_query(&w.gateway, &q, &w.index, &w.stores, &cfg(mode, true, 1)).unwrap();
            assert_eq!(ids(&r.final_ranking), ids(&r.stage1));
        }
    }
}

#[test]
fn unknown_query_and_bad_config_are_errors() {
    let w = ExperimentWorld::build(&spec(2), &sim(1.0, 1.0, None)).unwrap();
    assert!(run_query(
        &w.gateway,
        "nope",
        &w.index,
        &w.stores,
        &cfg(RerankMode::Pairwise, false, 5)
    )
    .is_err());
    let q = &w.corpus.query_ids()[0];
    assert!(run_query(
        &w.gateway,
        q,
        &w.index,
        &w.stores,
        &cfg(RerankMode::Pairwise, false, 0)
    )
    .is_err());
    let mut c = cfg(RerankMode::Pairwise, false, 5);
    c.reranker_backend = SIM_REASONER.into();
    assert!(run_query(&w.gateway, q, &w.index, &w.stores, &c).is_err());
}
