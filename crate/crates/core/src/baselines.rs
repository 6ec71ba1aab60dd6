//! Comparison methods: mini-batch InfoNCE, the reference-free global
//! contrastive step, JEST-style batch selection and similarity distillation.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::contrastive::{Direction, Over};
use crate::encoder::{Forward, ModelGrad, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::risk::{softmax, tau_log_mean_exp, top_k_indices};
use crate::rng::SeededRng;
use crate::trainer::{estimator_step, TrainerState};

fn check_tau(name: &str, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("{name} must be positive, got {tau}")));
    }
    Ok(())
}

/// Row-wise softmax of `s/τ`.
fn row_softmax(s: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = Array2::zeros(s.raw_dim());
    for (i, row) in s.rows().into_iter().enumerate() {
        let p = softmax(&row.to_vec(), tau);
        out.row_mut(i).assign(&ndarray::Array1::from(p));
    }
    out
}

/// Column-wise softmax of `s/τ`.
fn col_softmax(s: &Array2<f64>, tau: f64) -> Array2<f64> {
    row_softmax(&s.t().to_owned(), tau).t().to_owned()
}

/// Symmetric InfoNCE: the average of the image→text and text→image
/// cross-entropies of the diagonal.
pub fn infonce_loss(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    check_tau("tau", tau)?;
    let b = s.size();
    if b == 0 {
        return Err(Error::Argument("empty similarity matrix".into()));
    }
    let a = s.as_array();
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = a.row(i).to_vec();
        let col: Vec<f64> = a.column(i).to_vec();
        // -log softmax_i = log Σ_j exp(s_ij/τ) - s_ii/τ
        let lse_row = tau_log_mean_exp(&row, tau) / tau + (b as f64).ln();
        let lse_col = tau_log_mean_exp(&col, tau) / tau + (b as f64).ln();
        total += (lse_row - a[[i, i]] / tau) + (lse_col - a[[i, i]] / tau);
    }
    Ok(total / (2.0 * b as f64))
}

/// `(dL/ds, dL/dτ)` of [`infonce_loss`].
pub fn infonce_grad(s: &SimilarityMatrix, tau: f64) -> Result<(Array2<f64>, f64)> {
    check_tau("tau", tau)?;
    let b = s.size();
    let a = s.as_array();
    let p = row_softmax(a, tau);
    let q = col_softmax(a, tau);
    let scale = 1.0 / (2.0 * b as f64 * tau);
    let mut coeff = (p + q) * scale;
    for i in 0..b {
        coeff[[i, i]] -= 2.0 * scale;
    }
    let dtau = -(&coeff * a).sum() / tau;
    Ok((coeff, dtau))
}

/// Similarity distillation toward a reference: cross-entropy between the
/// reference's row (and column) softmax at `tau_ref` and the target's at `tau`,
/// normalized by `b²`.
pub fn distillation_loss(
    target: &SimilarityMatrix,
    reference: &SimilarityMatrix,
    tau: f64,
    tau_ref: f64,
) -> Result<f64> {
    check_tau("tau", tau)?;
    check_tau("tau_ref", tau_ref)?;
    target.check_same_shape(reference)?;
    let b = target.size();
    if b == 0 {
        return Err(Error::Argument("empty similarity matrix".into()));
    }
    let (t, r) = (target.as_array(), reference.as_array());
    let p_hat_row = row_softmax(r, tau_ref);
    let p_hat_col = col_softmax(r, tau_ref);
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = t.row(i).to_vec();
        let col: Vec<f64> = t.column(i).to_vec();
        let lse_row = tau_log_mean_exp(&row, tau) / tau + (b as f64).ln();
        let lse_col = tau_log_mean_exp(&col, tau) / tau + (b as f64).ln();
        for j in 0..b {
            // row i, entry j: log p = s_ij/τ - lse_row
            total += p_hat_row[[i, j]] * (t[[i, j]] / tau - lse_row);
            // column i, entry j: log p = s_ji/τ - lse_col
            total += p_hat_col[[j, i]] * (t[[j, i]] / tau - lse_col);
        }
    }
    Ok(-total / (b * b) as f64)
}

/// `(dL/ds, dL/dτ)` of [`distillation_loss`] with respect to the target.
pub fn distillation_grad(
    target: &SimilarityMatrix,
    reference: &SimilarityMatrix,
    tau: f64,
    tau_ref: f64,
) -> Result<(Array2<f64>, f64)> {
    check_tau("tau", tau)?;
    check_tau("tau_ref", tau_ref)?;
    target.check_same_shape(reference)?;
    let b = target.size();
    let (t, r) = (target.as_array(), reference.as_array());
    let diff = (row_softmax(t, tau) - row_softmax(r, tau_ref))
        + (col_softmax(t, tau) - col_softmax(r, tau_ref));
    let coeff = diff / ((b * b) as f64 * tau);
    let dtau = -(&coeff * t).sum() / tau;
    Ok((coeff, dtau))
}

/// `(1 - λ) L_con + λ L_dist`.
pub fn combined_objective(con_loss: f64, dist_loss: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(con_loss);
    }
    if lambda == 1.0 {
        return Ok(dist_loss);
    }
    Ok((1.0 - lambda) * con_loss + lambda * dist_loss)
}

/// Reference-free global contrastive step: the DRRho estimator with the
/// shift removed.
pub fn gcl_trainer_step(state: &mut TrainerState, batch: &[usize], forward: &Forward) -> Result<ModelGrad> {
    estimator_step(state, batch, forward, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JestMode {
    /// Draw without replacement, probability ∝ softmax(score / temperature).
    Sample,
    /// Take the highest scores.
    Topk,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JestParams {
    /// Fraction of the super-batch kept.
    pub ratio: f64,
    pub n_chunks: usize,
    pub mode: JestMode,
    /// Temperature inside the shifted-loss scores of later chunks.
    pub tau: f64,
    /// Softmax temperature of the sampling probabilities.
    pub sample_temp: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkTrace {
    /// Dataset indices picked in this chunk, in pick order.
    pub selected: Vec<usize>,
    /// Their scores at pick time.
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub super_batch: Vec<usize>,
    pub selected: Vec<usize>,
    pub chunk_trace: Vec<ChunkTrace>,
    pub seed: u64,
}

/// Number of pairs kept from a super-batch of `m`.
pub fn jest_selection_size(m: usize, ratio: f64) -> usize {
    // Guard against 0.2 * 25600 landing a hair above 5120.
    ((ratio * m as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Chunk sizes: equal parts, the last absorbing the remainder.
pub fn jest_chunk_sizes(total: usize, n_chunks: usize) -> Vec<usize> {
    let base = total / n_chunks;
    let mut sizes = vec![base; n_chunks];
    sizes[n_chunks - 1] = total - base * (n_chunks - 1);
    sizes
}

/// Staged selection of a mini-batch from a super-batch. `target` and
/// `reference` are indexed by position in `super_batch`.
///
/// Chunk 1 is scored by the target's positive-pair similarity. Each later
/// chunk is scored by the sum of both shifted anchor losses computed against
/// everything selected so far.
pub fn jest_select(
    target: &SimilarityMatrix,
    reference: &SimilarityMatrix,
    super_batch: &[usize],
    params: &JestParams,
) -> Result<SelectionOutcome> {
    let m = super_batch.len();
    if target.size() != m {
        return Err(Error::Argument(format!(
            "similarity matrix is {0}×{0} for a super-batch of {m}",
            target.size()
        )));
    }
    target.check_same_shape(reference)?;
    if !(params.ratio > 0.0 && params.ratio <= 1.0) {
        return Err(Error::Argument(format!("ratio must lie in (0, 1], got {}", params.ratio)));
    }
    if params.n_chunks == 0 {
        return Err(Error::Argument("n_chunks must be at least 1".into()));
    }
    check_tau("tau", params.tau)?;
    check_tau("sample_temp", params.sample_temp)?;
    let total = jest_selection_size(m, params.ratio);
    if total < params.n_chunks {
        return Err(Error::Argument(format!(
            "ratio · |super-batch| = {} is smaller than n_chunks = {}",
            params.ratio * m as f64,
            params.n_chunks
        )));
    }

    let mut rng = SeededRng::new(params.seed);
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(total);
    let mut chunk_trace = Vec::with_capacity(params.n_chunks);

    for (chunk, size) in jest_chunk_sizes(total, params.n_chunks).into_iter().enumerate() {
        let scores: Vec<f64> = remaining
            .iter()
            .map(|&p| {
                if chunk == 0 {
                    target.get(p, p)
                } else {
                    Direction::BOTH
                        .into_iter()
                        .map(|d| shifted_score(target, reference, p, &chosen, d, params.tau))
                        .sum()
                }
            })
            .collect();
        let picks = match params.mode {
            JestMode::Topk => top_k_indices(&scores, size),
            JestMode::Sample => sample_without_replacement(&scores, size, params.sample_temp, &mut rng),
        };
        let trace = ChunkTrace {
            selected: picks.iter().map(|&k| super_batch[remaining[k]]).collect(),
            scores: picks.iter().map(|&k| scores[k]).collect(),
        };
        chosen.extend(picks.iter().map(|&k| remaining[k]));
        let mut taken = picks;
        taken.sort_unstable();
        for k in taken.into_iter().rev() {
            remaining.remove(k);
        }
        chunk_trace.push(trace);
    }

    Ok(SelectionOutcome {
        super_batch: super_batch.to_vec(),
        selected: chosen.iter().map(|&p| super_batch[p]).collect(),
        chunk_trace,
        seed: params.seed,
    })
}

/// `τ log mean_{q ∈ chosen} exp(ℓ̂(p, q)/τ)` for candidate `p`.
fn shifted_score(
    target: &SimilarityMatrix,
    reference: &SimilarityMatrix,
    p: usize,
    chosen: &[usize],
    direction: Direction,
    tau: f64,
) -> f64 {
    let gap = |s: &SimilarityMatrix, q: usize| match direction {
        Direction::ImageSide => s.get(p, q) - s.get(p, p),
        Direction::TextSide => s.get(q, p) - s.get(p, p),
    };
    let losses: Vec<f64> = chosen
        .iter()
        .map(|&q| gap(target, q) - gap(reference, q))
        .collect();
    tau_log_mean_exp(&losses, tau)
}

/// Sequential draws with renormalization; returns positions into `scores`.
fn sample_without_replacement(scores: &[f64], k: usize, temp: f64, rng: &mut SeededRng) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..scores.len()).collect();
    let mut picks = Vec::with_capacity(k);
    for _ in 0..k {
        let live: Vec<f64> = alive.iter().map(|&i| scores[i]).collect();
        let probs = softmax(&live, temp);
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut slot = probs.len() - 1;
        for (s, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                slot = s;
                break;
            }
        }
        picks.push(alive.remove(slot));
    }
    picks
}

/// Exact reference-free global objective over excluded-anchor candidate sets.
pub fn gcl_objective(s: &SimilarityMatrix, tau: f64) -> Result<f64> {
    crate::contrastive::global_objective(s, None, tau, Over::ExcludeAnchor)
}
