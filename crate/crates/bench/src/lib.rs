//! Seeded fixtures shared by the benchmarks.

use cascade_core::loss::{LossBatch, WeightedNegative};
use cascade_core::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector(r: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// `n` random unit rows with ids `c0..`.
pub fn random_matrix(seed: u64, n: usize, d: usize) -> EmbeddingMatrix {
    let mut r = rng(seed);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| random_vector(&mut r, d)).collect();
    let ids = (0..n).map(|i| format!("c{i}")).collect();
    EmbeddingMatrix::from_rows_normalized(d, ids, &rows).expect("random rows are non-zero")
}

pub fn random_query(seed: u64, d: usize) -> Vec<f32> {
    let v = random_vector(&mut rng(seed), d);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// A batch of `n` pairs with `k` weighted negatives each.
pub fn random_batch(seed: u64, n: usize, d: usize, k: usize, tau: f64) -> LossBatch {
    let mut r = rng(seed);
    let queries = (0..n).map(|_| random_vector(&mut r, d)).collect();
    let positives = (0..n).map(|_| random_vector(&mut r, d)).collect();
    let hard_negatives = (0..n)
        .map(|_| {
            (0..k)
                .map(|_| WeightedNegative {
                    vector: random_vector(&mut r, d),
                    weight: r.random_range(0.5..1.5),
                })
                .collect()
        })
        .collect();
    LossBatch {
        queries,
        positives,
        hard_negatives,
        tau,
    }
}
