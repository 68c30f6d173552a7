#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use cascade_core::error::BackendError;
use cascade_core::gateway::{
    BackendDescriptor, BackendKind, Gateway, Transport, WireRequest, WireResponse,
};
use cascade_core::model::{EcrTrace, EmbeddingMatrix, Item, Role};
use cascade_core::pipeline::CorpusStores;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform-in-cube rows, normalized.
pub fn random_rows(rng: &mut impl Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-3 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Full scan in a plain loop, then sort by descending score and ascending id.
pub fn brute_force_top_k(
    m: &EmbeddingMatrix,
    query: &[f32],
    k: usize,
    exclude: &HashSet<String>,
) -> Vec<(String, f64)> {
    let mut all = Vec::new();
    for r in 0..m.len() {
        let id = &m.ids()[r];
        if exclude.contains(id) {
            continue;
        }
        let row = m.row(r);
        let mut s = 0.0f64;
        for i in 0..row.len() {
            s += row[i] as f64 * query[i] as f64;
        }
        all.push((id.clone(), s));
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn query_item(id: &str) -> Item {
    Item {
        id: id.into(),
        role: Role::Query,
        instruction: "Find the clip.".into(),
        content_text: Some(format!("caption «query:{id}»")),
        media_ref: None,
        ecr: None,
    }
}

pub fn candidate_item(id: &str) -> Item {
    Item {
        id: id.into(),
        role: Role::Candidate,
        instruction: "Describe the clip.".into(),
        content_text: None,
        media_ref: Some(format!("sim://media/{id}")),
        ecr: Some(EcrTrace::original(
            "looked",
            format!("clip «item:{id}»"),
            "test",
        )),
    }
}

/// Stores over `n` candidates `c000..` with random vectors and the given
/// query vectors.
pub fn stores_with(
    cand_rows: &[Vec<f64>],
    queries: &[(String, Vec<f64>)],
) -> (cascade_core::Index, CorpusStores) {
    let d = cand_rows[0].len();
    let cand_ids: Vec<String> = (0..cand_rows.len()).map(|i| format!("c{i:03}")).collect();
    let m = EmbeddingMatrix::from_rows_normalized(d, cand_ids.clone(), cand_rows).unwrap();
    let qm = EmbeddingMatrix::from_rows_normalized(
        d,
        queries.iter().map(|(id, _)| id.clone()).collect(),
        &queries.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(),
    )
    .unwrap();
    let mut items: Vec<Item> = queries.iter().map(|(id, _)| query_item(id)).collect();
    items.extend(cand_ids.iter().map(|id| candidate_item(id)));
    let stores = CorpusStores::from_items(&items, qm).unwrap();
    (cascade_core::Index::build(m).unwrap(), stores)
}

/// Pairwise transport answering from a (query id, candidate id) table and
/// counting requests.
pub struct TableScorer {
    pub scores: BTreeMap<(String, String), f64>,
    pub default: f64,
    pub calls: AtomicU64,
    /// Candidates for which the transport fails.
    pub failing: HashSet<String>,
}

impl TableScorer {
    pub fn new(scores: BTreeMap<(String, String), f64>, default: f64) -> Self {
        TableScorer {
            scores,
            default,
            calls: AtomicU64::new(0),
            failing: HashSet::new(),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for TableScorer {
    fn send(
        &self,
        backend: &BackendDescriptor,
        req: &WireRequest,
    ) -> Result<WireResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let q = req.slot("query_id").to_string();
        let c = req.slot("candidate_id").to_string();
        if self.failing.contains(&c) {
            return Err(BackendError::Transport {
                backend_id: backend.backend_id.clone(),
                message: format!("refused {c}"),
            });
        }
        Ok(WireResponse::score(
            *self.scores.get(&(q, c)).unwrap_or(&self.default),
        ))
    }
}

pub fn pairwise_gateway(t: Arc<dyn Transport>, id: &str) -> Gateway {
    Gateway::builder()
        .backend(BackendDescriptor::sim(id, BackendKind::PairwiseReranker), t)
        .build()
        .unwrap()
}

/// Error-free transformation of `a + b`.
pub fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Dot product in double-double arithmetic, rounded once at the end.
pub fn dd_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let p_err = x.mul_add(*y, -p);
        let (s, e) = two_sum(hi, p);
        hi = s;
        lo += e + p_err;
    }
    let (s, e) = two_sum(hi, lo);
    s + e
}

pub fn dd_cos(a: &[f64], b: &[f64]) -> f64 {
    dd_dot(a, b) / (dd_dot(a, a).sqrt() * dd_dot(b, b).sqrt())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}
