mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use cascade_core::eval::RelevanceJudgments;
use cascade_core::gateway::{BackendDescriptor, BackendKind, Gateway, SimBackendConfig};
use cascade_core::mining::{
    estimate_false_negative_ratio, mine_corpus, mine_hard_negatives, read_checkpoint, read_mined,
    MineCorpusOptions, MinedNegatives, MiningParams, MiningStrategy, TrainingPair, WeightScheme,
};
use cascade_core::{CorpusStores, Error, Index};
use common::*;
use proptest::prelude::*;
use rand::Rng;

const POOL: usize = 12;

struct World {
    index: Index,
    stores: CorpusStores,
    table: BTreeMap<(String, String), f64>,
}

/// `n_cand` random candidates, `n_q` queries, scores on a 0.1 grid so ties
/// are common.
fn world(seed: u64, n_cand: usize, n_q: usize) -> World {
    let mut r = rng(seed);
    let rows = random_rows(&mut r, n_cand, 6);
    let queries: Vec<(String, Vec<f64>)> = random_rows(&mut r, n_q, 6)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (format!("q{i:03}"), v))
        .collect();
    let (index, stores) = stores_with(&rows, &queries);
    let mut table = BTreeMap::new();
    for (q, _) in &queries {
        for c in 0..n_cand {
            let s = (r.random_range(0..=10) as f64) / 10.0;
            table.insert((q.clone(), format!("c{c:03}")), s);
        }
    }
    World {
        index,
        stores,
        table,
    }
}

fn params(strategy: MiningStrategy, m: usize, k: usize, alpha: f64) -> MiningParams {
    MiningParams {
        m,
        k,
        alpha,
        strategy,
        weights: WeightScheme::Uniform,
        backend_id: "t".into(),
        seed: 5,
    }
}

/// Selection loop over the pool: repeatedly take the best remaining score,
/// earliest pool position on ties, keep it if below the threshold.
fn oracle_mine(pool: &[(String, f64)], s_pos: f64, alpha: f64, k: usize) -> Vec<(String, f64)> {
    let mut left: Vec<Option<&(String, f64)>> = pool.iter().map(Some).collect();
    let mut out = Vec::new();
    while out.len() < k {
        let mut best: Option<usize> = None;
        for (i, e) in left.iter().enumerate() {
            if let Some(e) = e {
                if best.map_or(true, |b| e.1 > left[b].unwrap().1) {
                    best = Some(i);
                }
            }
        }
        let Some(b) = best else { break };
        let e = left[b].take().unwrap();
        if e.1 < alpha * s_pos {
            out.push(e.clone());
        }
    }
    out
}

#[test]
fn reranker_mining_matches_selection_oracle() {
    let mut r = rng(20);
    let mut nonempty = 0;
    for case in 0..300u64 {
        let w = world(100 + case, 20, 1);
        let q = "q000".to_string();
        let pos = format!("c{:03}", r.random_range(0..20));
        let k = r.random_range(1..=POOL);
        let alpha = [0.5, 0.8, 0.95, 0.99][r.random_range(0..4)];
        let scorer = Arc::new(TableScorer::new(w.table.clone(), 0.0));
        let gw = pairwise_gateway(scorer.clone(), "t");
        let p = params(MiningStrategy::Reranker, POOL, k, alpha);
        let got = mine_hard_negatives(
            w.stores.query(&q).unwrap(),
            w.stores.candidate(&pos).unwrap(),
            &w.index,
            &w.stores,
            Some(&gw),
            &p,
        )
        .unwrap();

        let qv = w.stores.query_vector(&q).unwrap();
        let pool: Vec<(String, f64)> = brute_force_top_k(
            w.index.embeddings(),
            qv,
            POOL,
            &HashSet::from([pos.clone()]),
        )
        .into_iter()
        .map(|(id, _)| {
            let s = w.table[&(q.clone(), id.clone())];
            (id, s)
        })
        .collect();
        let s_pos = w.table[&(q.clone(), pos.clone())];
        let want = oracle_mine(&pool, s_pos, alpha, k);
        let got_pairs: Vec<(String, f64)> = got
            .negatives
            .iter()
            .map(|n| (n.target_id.clone(), n.score))
            .collect();
        assert_eq!(got_pairs, want, "case {case}");
        assert_eq!(got.positive_score, s_pos);
        assert_eq!(got.pool_size_m, POOL);
        assert_eq!(scorer.calls(), POOL as u64 + 1);
        got.check_invariants(k, true).unwrap();
        nonempty += usize::from(!want.is_empty());
    }
    assert!(nonempty > 100);
}

#[test]
fn pool_larger_than_corpus_is_clamped_with_warning() {
    let w = world(1, 8, 1);
    let gw = pairwise_gateway(Arc::new(TableScorer::new(w.table.clone(), 0.0)), "t");
    let got = mine_hard_negatives(
        w.stores.query("q000").unwrap(),
        w.stores.candidate("c000").unwrap(),
        &w.index,
        &w.stores,
        Some(&gw),
        &params(MiningStrategy::Reranker, 50, 7, 0.95),
    )
    .unwrap();
    assert_eq!(got.pool_size_m, 7);
    assert_eq!(got.warnings.len(), 1);
}

#[test]
fn unfiltered_strategies() {
    let w = world(2, 40, 1);
    let q = w.stores.query("q000").unwrap();
    let pos = w.stores.candidate("c003").unwrap();
    let qv = w.stores.query_vector("q000").unwrap();
    let oracle = brute_force_top_k(
        w.index.embeddings(),
        qv,
        7,
        &HashSet::from(["c003".to_string()]),
    );

    let naive = mine_hard_negatives(
        q,
        pos,
        &w.index,
        &w.stores,
        None,
        &params(MiningStrategy::NaiveTopK, 20, 7, 0.95),
    )
    .unwrap();
    assert_eq!(
        naive
            .negatives
            .iter()
            .map(|n| n.target_id.clone())
            .collect::<Vec<_>>(),
        oracle.iter().map(|o| o.0.clone()).collect::<Vec<_>>()
    );
    naive.check_invariants(7, false).unwrap();

    let a = mine_hard_negatives(
        q,
        pos,
        &w.index,
        &w.stores,
        None,
        &params(MiningStrategy::Random, 20, 7, 0.95),
    )
    .unwrap();
    let b = mine_hard_negatives(
        q,
        pos,
        &w.index,
        &w.stores,
        None,
        &params(MiningStrategy::Random, 20, 7, 0.95),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.negatives.len(), 7);
    assert_eq!(a.pool_size_m, 39);
    a.check_invariants(7, false).unwrap();

    let emb = mine_hard_negatives(
        q,
        pos,
        &w.index,
        &w.stores,
        None,
        &params(MiningStrategy::Embedder, 20, 7, 0.95),
    )
    .unwrap();
    emb.check_invariants(7, true).unwrap();
    assert!(mine_hard_negatives(
        q,
        pos,
        &w.index,
        &w.stores,
        None,
        &params(MiningStrategy::Reranker, 20, 7, 0.95)
    )
    .is_err());
}

#[test]
fn softmax_weights_sum_to_count() {
    let w = world(3, 30, 1);
    let gw = pairwise_gateway(Arc::new(TableScorer::new(w.table.clone(), 0.0)), "t");
    let mut p = params(MiningStrategy::Reranker, 20, 7, 0.95);
    p.weights = "softmax:0.1".parse().unwrap();
    let got = mine_hard_negatives(
        w.stores.query("q000").unwrap(),
        w.stores.candidate("c000").unwrap(),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
    )
    .unwrap();
    got.check_invariants(7, true).unwrap();
    let n = got.negatives.len() as f64;
    let z: f64 = got.negatives.iter().map(|x| (x.score / 0.1).exp()).sum();
    for x in &got.negatives {
        assert!(rel_err(x.weight, n * (x.score / 0.1).exp() / z) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mined_records_hold_invariants(
        seed in any::<u64>(),
        k in 1usize..10,
        alpha in 0.05f64..0.999,
        strategy_ix in 0usize..4,
        softmax in any::<bool>(),
    ) {
        let strategy = [MiningStrategy::Reranker, MiningStrategy::Embedder, MiningStrategy::Random, MiningStrategy::NaiveTopK][strategy_ix];
        let w = world(seed, 25, 1);
        let gw = pairwise_gateway(Arc::new(TableScorer::new(w.table.clone(), 0.0)), "t");
        let mut p = params(strategy, 15, k, alpha);
        if softmax {
            p.weights = WeightScheme::ScoreSoftmax { temp: 0.05 };
        }
        let pos = format!("c{:03}", seed % 25);
        let got = mine_hard_negatives(
            w.stores.query("q000").unwrap(),
            w.stores.candidate(&pos).unwrap(),
            &w.index,
            &w.stores,
            Some(&gw),
            &p,
        ).unwrap();
        prop_assert!(got.check_invariants(k, strategy.is_filtered()).is_ok());
        prop_assert!(got.negatives.iter().all(|n| n.target_id != pos));
        if !strategy.is_filtered() {
            prop_assert_eq!(got.negatives.len(), k);
        }
    }

    /// With K at least the pool size, a larger α keeps a superset; in
    /// general only the count is monotone.
    #[test]
    fn larger_alpha_keeps_more(
        seed in any::<u64>(),
        a1 in 0.05f64..0.999,
        a2 in 0.05f64..0.999,
        k in 1usize..=POOL,
    ) {
        let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
        let w = world(seed, 20, 1);
        let gw = pairwise_gateway(Arc::new(TableScorer::new(w.table.clone(), 0.0)), "t");
        let run = |alpha: f64, k: usize| {
            mine_hard_negatives(
                w.stores.query("q000").unwrap(),
                w.stores.candidate("c000").unwrap(),
                &w.index,
                &w.stores,
                Some(&gw),
                &params(MiningStrategy::Reranker, POOL, k, alpha),
            ).unwrap()
        };
        let ids = |m: &MinedNegatives| m.negatives.iter().map(|n| n.target_id.clone()).collect::<BTreeSet<_>>();
        let (small, large) = (run(lo, POOL), run(hi, POOL));
        prop_assert!(ids(&small).is_subset(&ids(&large)));
        prop_assert!(run(lo, k).negatives.len() <= run(hi, k).negatives.len());
    }
}

fn pairs(n: usize) -> Vec<TrainingPair> {
    (0..n)
        .map(|i| TrainingPair {
            query_id: format!("q{i:03}"),
            positive_id: format!("c{:03}", i % 30),
        })
        .collect()
}

#[test]
fn empty_input_writes_header_only() {
    let w = world(4, 10, 1);
    let dir = tempfile::tempdir().unwrap();
    let (out, ck) = (dir.path().join("m.jsonl"), dir.path().join("m.ckpt"));
    let p = params(MiningStrategy::Embedder, 5, 3, 0.95);
    let s = mine_corpus(
        &[],
        &w.index,
        &w.stores,
        None,
        &p,
        &MineCorpusOptions::default(),
        &out,
        &ck,
        &AtomicBool::new(false),
    )
    .unwrap();
    assert_eq!((s.mined, s.skipped), (0, 0));
    let (h, recs) = read_mined(&out).unwrap();
    assert_eq!((h.alpha, h.k), (0.95, 3));
    assert!(recs.is_empty());
}

#[test]
fn rerun_is_byte_identical_and_resume_calls_nothing() {
    let w = world(5, 30, 100);
    let p = params(MiningStrategy::Reranker, 12, 7, 0.95);
    let opts = MineCorpusOptions {
        chunk_size: 9,
        ..MineCorpusOptions::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let (out, ck) = (
            dir.path().join(format!("m{run}.jsonl")),
            dir.path().join(format!("m{run}.ckpt")),
        );
        let gw = pairwise_gateway(Arc::new(TableScorer::new(w.table.clone(), 0.0)), "t");
        let s = mine_corpus(
            &pairs(100),
            &w.index,
            &w.stores,
            Some(&gw),
            &p,
            &opts,
            &out,
            &ck,
            &AtomicBool::new(false),
        )
        .unwrap();
        assert_eq!(s.mined, 100);
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);

    let (out, ck) = (dir.path().join("m0.jsonl"), dir.path().join("m0.ckpt"));
    assert_eq!(read_checkpoint(&ck).unwrap().len(), 100);
    let scorer = Arc::new(TableScorer::new(w.table.clone(), 0.0));
    let gw = pairwise_gateway(scorer.clone(), "t");
    let s = mine_corpus(
        &pairs(100),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
        &opts,
        &out,
        &ck,
        &AtomicBool::new(false),
    )
    .unwrap();
    assert_eq!((s.mined, s.skipped), (0, 100));
    assert_eq!(scorer.calls(), 0);
    assert_eq!(std::fs::read(&out).unwrap(), outputs[0]);
}

#[test]
fn interrupted_run_resumes_to_the_same_file() {
    let w = world(6, 30, 40);
    let p = params(MiningStrategy::Reranker, 12, 7, 0.95);
    let opts = MineCorpusOptions {
        chunk_size: 8,
        ..MineCorpusOptions::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let gw = pairwise_gateway(Arc::new(TableScorer::new(w.table.clone(), 0.0)), "t");

    let (full, full_ck) = (dir.path().join("full.jsonl"), dir.path().join("full.ckpt"));
    mine_corpus(
        &pairs(40),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
        &opts,
        &full,
        &full_ck,
        &AtomicBool::new(false),
    )
    .unwrap();

    // first 16 pairs, then a stop before anything else runs
    let (out, ck) = (dir.path().join("m.jsonl"), dir.path().join("m.ckpt"));
    mine_corpus(
        &pairs(16),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
        &opts,
        &out,
        &ck,
        &AtomicBool::new(false),
    )
    .unwrap();
    let err = mine_corpus(
        &pairs(40),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
        &opts,
        &out,
        &ck,
        &AtomicBool::new(true),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Interrupted));
    assert_eq!(read_checkpoint(&ck).unwrap().len(), 16);

    let s = mine_corpus(
        &pairs(40),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
        &opts,
        &out,
        &ck,
        &AtomicBool::new(false),
    )
    .unwrap();
    assert_eq!((s.mined, s.skipped), (24, 16));
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&full).unwrap());
}

#[test]
fn failure_ratio_aborts_the_run() {
    let w = world(7, 30, 40);
    let mut scorer = TableScorer::new(w.table.clone(), 0.0);
    // the positive of every fourth pair cannot be scored
    scorer.failing = (0..40)
        .step_by(4)
        .map(|i| format!("c{:03}", i % 30))
        .collect();
    let gw = pairwise_gateway(Arc::new(scorer), "t");
    let p = params(MiningStrategy::Reranker, 12, 7, 0.95);
    let dir = tempfile::tempdir().unwrap();
    let (out, ck) = (dir.path().join("m.jsonl"), dir.path().join("m.ckpt"));
    let err = mine_corpus(
        &pairs(40),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
        &MineCorpusOptions::default(),
        &out,
        &ck,
        &AtomicBool::new(false),
    )
    .unwrap_err();
    assert!(matches!(err, Error::FailureRatioExceeded { .. }), "{err}");

    let lenient = MineCorpusOptions {
        max_failure_ratio: 1.0,
        ..MineCorpusOptions::default()
    };
    std::fs::remove_file(&ck).unwrap();
    let s = mine_corpus(
        &pairs(40),
        &w.index,
        &w.stores,
        Some(&gw),
        &p,
        &lenient,
        &out,
        &ck,
        &AtomicBool::new(false),
    )
    .unwrap();
    assert!(!s.failures.is_empty());
    assert_eq!(s.mined + s.failures.len(), 40);
}

fn mined_records(w: &World, n: usize) -> Vec<MinedNegatives> {
    let gw = pairwise_gateway(Arc::new(TableScorer::new(w.table.clone(), 0.0)), "t");
    pairs(n)
        .iter()
        .map(|p| {
            mine_hard_negatives(
                w.stores.query(&p.query_id).unwrap(),
                w.stores.candidate(&p.positive_id).unwrap(),
                &w.index,
                &w.stores,
                Some(&gw),
                &params(MiningStrategy::NaiveTopK, 12, 7, 0.95),
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn constant_judges_give_zero_and_full_ratios() {
    let w = world(8, 30, 20);
    let recs = mined_records(&w, 20);
    for (score, want) in [(0.1, 0.0), (0.9, 100.0)] {
        let gw = pairwise_gateway(Arc::new(TableScorer::new(BTreeMap::new(), score)), "t");
        let r = estimate_false_negative_ratio(&recs, &w.stores, &gw, "t", 50, 1).unwrap();
        assert_eq!((r.population, r.judged), (140, 50));
        assert_eq!(r.ratio_percent, want);
    }
}

#[test]
fn faithful_judge_matches_planted_count() {
    let w = world(9, 30, 20);
    let recs = mined_records(&w, 20);
    let mut r = rng(9);
    let mut planted = RelevanceJudgments::default();
    for q in 0..20 {
        for c in 0..30 {
            if r.random_bool(0.3) {
                planted.insert(&format!("q{q:03}"), &format!("c{c:03}"), 1.0);
            }
        }
    }
    let want = recs
        .iter()
        .flat_map(|m| m.negatives.iter().map(move |n| (&m.query_id, &n.target_id)))
        .filter(|(q, c)| planted.is_relevant(q, c))
        .count();
    let gw = Gateway::builder()
        .sim_backend(
            BackendDescriptor::sim("judge", BackendKind::PairwiseReranker),
            SimBackendConfig::default(),
            Arc::new(planted),
        )
        .unwrap()
        .build()
        .unwrap();
    let rep = estimate_false_negative_ratio(&recs, &w.stores, &gw, "judge", 1000, 1).unwrap();
    assert_eq!(rep.judged, 140);
    assert_eq!(rep.judged_relevant, want);
    assert!(want > 0);
}
