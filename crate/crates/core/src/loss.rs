//! Weighted uni-directional InfoNCE.
//!
//! For query `i` with positive `t_i`, in-batch targets `t_j` and `K_i` mined
//! hard negatives `n_ik` with weights `w_ik`:
//!
//! ```text
//! L = -(1/N) Σ_i log[ φ(q_i, t_i) / ( Σ_k (w_ik / K_i) φ(q_i, n_ik) + Σ_j φ(q_i, t_j) ) ]
//! φ(q, t) = exp(cos(q, t) / τ)
//! ```
//!
//! The in-batch sum runs over every `j`, the query's own positive included.
//! All sums of φ are taken in log space, so τ = 0.02 with cosines of ±1 is
//! safe.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One mined negative as seen by the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedNegative {
    pub vector: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBatch {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    /// Per query; may be ragged or empty.
    pub hard_negatives: Vec<Vec<WeightedNegative>>,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Drop `j = i` from the in-batch sum (ablation; the loss can then be
    /// negative).
    pub exclude_diagonal: bool,
    /// Treat inputs as raw vectors and differentiate through their
    /// normalization. When false, inputs must already be unit length and
    /// cosine is the plain dot product.
    pub through_normalization: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            exclude_diagonal: false,
            through_normalization: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGradients {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub hard_negatives: Vec<Vec<Vec<f64>>>,
}

impl LossGradients {
    fn zeros_like(batch: &LossBatch) -> Self {
        let z = |v: &Vec<f64>| vec![0.0; v.len()];
        LossGradients {
            queries: batch.queries.iter().map(z).collect(),
            positives: batch.positives.iter().map(z).collect(),
            hard_negatives: batch
                .hard_negatives
                .iter()
                .map(|negs| negs.iter().map(|n| vec![0.0; n.vector.len()]).collect())
                .collect(),
        }
    }

    /// Every coordinate in a fixed order: queries, positives, negatives.
    pub fn flatten(&self) -> Vec<f64> {
        self.queries
            .iter()
            .chain(&self.positives)
            .chain(self.hard_negatives.iter().flatten())
            .flatten()
            .copied()
            .collect()
    }
}

const UNIT_TOLERANCE: f64 = 1e-6;

impl LossBatch {
    pub fn n(&self) -> usize {
        self.queries.len()
    }

    pub fn validate(&self, opts: &LossOptions) -> Result<()> {
        let n = self.queries.len();
        if n == 0 {
            return Err(invalid("loss batch is empty"));
        }
        if self.positives.len() != n || self.hard_negatives.len() != n {
            return Err(invalid(format!(
                "batch rows misaligned: {} queries, {} positives, {} negative lists",
                n,
                self.positives.len(),
                self.hard_negatives.len()
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid(format!("tau must be positive, got {}", self.tau)));
        }
        let dim = self.queries[0].len();
        if dim == 0 {
            return Err(invalid("vectors must have positive dimension"));
        }
        let check = |v: &[f64]| -> Result<()> {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let norm = norm(v);
            if !norm.is_finite() || norm == 0.0 {
                return Err(invalid("vector is zero or not finite"));
            }
            if !opts.through_normalization && (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(invalid(format!(
                    "vector has norm {norm}, expected unit length"
                )));
            }
            Ok(())
        };
        for v in self.queries.iter().chain(&self.positives) {
            check(v)?;
        }
        for neg in self.hard_negatives.iter().flatten() {
            check(&neg.vector)?;
            if !(neg.weight > 0.0 && neg.weight.is_finite()) {
                return Err(invalid(format!(
                    "hard-negative weight must be positive, got {}",
                    neg.weight
                )));
            }
        }
        if opts.exclude_diagonal && n == 1 && self.hard_negatives[0].is_empty() {
            return Err(invalid(
                "denominator is empty with exclude_diagonal and N = 1",
            ));
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `φ(h_q, h_t) = exp(cos/τ)`. Exposed for tests; the loss itself works
/// with [`log_phi`].
pub fn phi(h_q: &[f64], h_t: &[f64], tau: f64) -> Result<f64> {
    Ok(log_phi(h_q, h_t, tau)?.exp())
}

/// `cos(h_q, h_t) / τ` for unit vectors.
pub fn log_phi(h_q: &[f64], h_t: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(invalid(format!("tau must be positive, got {tau}")));
    }
    if h_q.len() != h_t.len() {
        return Err(Error::DimensionMismatch {
            expected: h_q.len(),
            got: h_t.len(),
        });
    }
    Ok(dot(h_q, h_t) / tau)
}

/// Prepared vectors: unit directions plus the original norms.
struct Prepared {
    dirs: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

fn prepare<'a>(vs: impl Iterator<Item = &'a Vec<f64>>, through: bool) -> Prepared {
    let mut dirs = Vec::new();
    let mut norms = Vec::new();
    for v in vs {
        if through {
            let n = norm(v);
            dirs.push(v.iter().map(|x| x / n).collect());
            norms.push(n);
        } else {
            dirs.push(v.clone());
            norms.push(1.0);
        }
    }
    Prepared { dirs, norms }
}

/// Per-query terms of the denominator, in a fixed order: in-batch targets
/// (index `j`), then hard negatives.
struct QueryTerms {
    /// (cosine, log-weight offset) for each term
    cos: Vec<f64>,
    offset: Vec<f64>,
    positive_cos: f64,
    /// position of the positive among the terms, if included
    positive_at: Option<usize>,
}

struct Forward {
    q: Prepared,
    p: Prepared,
    neg: Vec<Prepared>,
    terms: Vec<QueryTerms>,
}

fn forward(batch: &LossBatch, opts: &LossOptions) -> Forward {
    let through = opts.through_normalization;
    let q = prepare(batch.queries.iter(), through);
    let p = prepare(batch.positives.iter(), through);
    let neg: Vec<Prepared> = batch
        .hard_negatives
        .iter()
        .map(|negs| prepare(negs.iter().map(|n| &n.vector), through))
        .collect();
    let n = batch.n();
    let terms = (0..n)
        .map(|i| {
            let mut cos = Vec::with_capacity(n + neg[i].dirs.len());
            let mut offset = Vec::with_capacity(cos.capacity());
            let mut positive_at = None;
            for j in 0..n {
                if j == i && opts.exclude_diagonal {
                    continue;
                }
                if j == i {
                    positive_at = Some(cos.len());
                }
                cos.push(dot(&q.dirs[i], &p.dirs[j]));
                offset.push(0.0);
            }
            let k = batch.hard_negatives[i].len() as f64;
            for (dir, hn) in neg[i].dirs.iter().zip(&batch.hard_negatives[i]) {
                cos.push(dot(&q.dirs[i], dir));
                offset.push((hn.weight / k).ln());
            }
            QueryTerms {
                positive_cos: positive_at.map_or_else(|| dot(&q.dirs[i], &p.dirs[i]), |at| cos[at]),
                cos,
                offset,
                positive_at,
            }
        })
        .collect();
    Forward { q, p, neg, terms }
}

/// `-log(e^pos / Σ e^logits)` without cancellation when the positive
/// dominates, plus the softmax over the logits.
fn query_loss(logits: &[f64], positive: f64) -> (f64, Vec<f64>) {
    let (argmax, &max) = logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("denominator has at least one term");
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(a, _)| a != argmax)
        .map(|(_, &t)| (t - max).exp())
        .sum();
    let log_sum = rest.ln_1p();
    let loss = (max - positive) + log_sum;
    let softmax = logits.iter().map(|&t| (t - max - log_sum).exp()).collect();
    (loss, softmax)
}

fn logits(t: &QueryTerms, tau: f64) -> Vec<f64> {
    t.cos
        .iter()
        .zip(&t.offset)
        .map(|(c, o)| c / tau + o)
        .collect()
}

fn loss_unchecked(batch: &LossBatch, opts: &LossOptions) -> f64 {
    let fwd = forward(batch, opts);
    let total: f64 = fwd
        .terms
        .iter()
        .map(|t| query_loss(&logits(t, batch.tau), t.positive_cos / batch.tau).0)
        .sum();
    total / batch.n() as f64
}

pub fn info_nce_loss(batch: &LossBatch, opts: &LossOptions) -> Result<f64> {
    batch.validate(opts)?;
    Ok(loss_unchecked(batch, opts))
}

/// Loss and its exact gradient with respect to every input vector.
pub fn info_nce_gradient(batch: &LossBatch, opts: &LossOptions) -> Result<(f64, LossGradients)> {
    batch.validate(opts)?;
    let fwd = forward(batch, opts);
    let n = batch.n();
    let tau = batch.tau;
    let scale = 1.0 / (n as f64 * tau);
    let mut grads = LossGradients::zeros_like(batch);
    let mut total = 0.0;

    // d cos(a,b) / d a for the raw vector a
    let dcos = |a_dir: &[f64], a_norm: f64, b_dir: &[f64], c: f64| -> Vec<f64> {
        if opts.through_normalization {
            a_dir
                .iter()
                .zip(b_dir)
                .map(|(a, b)| (b - c * a) / a_norm)
                .collect()
        } else {
            b_dir.to_vec()
        }
    };
    let accumulate = |target: &mut [f64], coeff: f64, d: Vec<f64>| {
        for (g, x) in target.iter_mut().zip(d) {
            *g += coeff * x;
        }
    };

    for (i, t) in fwd.terms.iter().enumerate() {
        let (loss, softmax) = query_loss(&logits(t, tau), t.positive_cos / tau);
        total += loss;

        let mut coeffs: Vec<f64> = softmax.iter().map(|p| p * scale).collect();
        let (q_dir, q_norm) = (&fwd.q.dirs[i], fwd.q.norms[i]);

        // numerator: -cos(q_i, t_i)/τ
        match t.positive_at {
            Some(at) => coeffs[at] -= scale,
            None => {
                let c = t.positive_cos;
                accumulate(
                    &mut grads.queries[i],
                    -scale,
                    dcos(q_dir, q_norm, &fwd.p.dirs[i], c),
                );
                accumulate(
                    &mut grads.positives[i],
                    -scale,
                    dcos(&fwd.p.dirs[i], fwd.p.norms[i], q_dir, c),
                );
            }
        }

        let mut term = 0;
        for j in 0..n {
            if j == i && opts.exclude_diagonal {
                continue;
            }
            let (c, coeff) = (t.cos[term], coeffs[term]);
            accumulate(
                &mut grads.queries[i],
                coeff,
                dcos(q_dir, q_norm, &fwd.p.dirs[j], c),
            );
            accumulate(
                &mut grads.positives[j],
                coeff,
                dcos(&fwd.p.dirs[j], fwd.p.norms[j], q_dir, c),
            );
            term += 1;
        }
        for k in 0..fwd.neg[i].dirs.len() {
            let (c, coeff) = (t.cos[term], coeffs[term]);
            let (n_dir, n_norm) = (&fwd.neg[i].dirs[k], fwd.neg[i].norms[k]);
            accumulate(&mut grads.queries[i], coeff, dcos(q_dir, q_norm, n_dir, c));
            accumulate(
                &mut grads.hard_negatives[i][k],
                coeff,
                dcos(n_dir, n_norm, q_dir, c),
            );
            term += 1;
        }
    }
    Ok((total / n as f64, grads))
}

/// Central-difference estimate of the loss gradient, one coordinate at a time.
pub fn finite_diff_gradient(
    batch: &LossBatch,
    opts: &LossOptions,
    step: f64,
) -> Result<LossGradients> {
    if !(step > 0.0) {
        return Err(invalid(format!("step must be positive, got {step}")));
    }
    batch.validate(&LossOptions {
        through_normalization: true,
        ..*opts
    })?;
    let mut grads = LossGradients::zeros_like(batch);
    let mut work = batch.clone();
    let central = |work: &mut LossBatch, get: &dyn Fn(&mut LossBatch) -> &mut f64| -> f64 {
        let orig = *get(work);
        *get(work) = orig + step;
        let up = loss_unchecked(work, opts);
        *get(work) = orig - step;
        let down = loss_unchecked(work, opts);
        *get(work) = orig;
        (up - down) / (2.0 * step)
    };
    for i in 0..batch.n() {
        for d in 0..batch.queries[i].len() {
            grads.queries[i][d] = central(&mut work, &|b| &mut b.queries[i][d]);
        }
        for d in 0..batch.positives[i].len() {
            grads.positives[i][d] = central(&mut work, &|b| &mut b.positives[i][d]);
        }
        for k in 0..batch.hard_negatives[i].len() {
            for d in 0..batch.hard_negatives[i][k].vector.len() {
                grads.hard_negatives[i][k][d] =
                    central(&mut work, &|b| &mut b.hard_negatives[i][k].vector[d]);
            }
        }
    }
    Ok(grads)
}
