//! Moving-average estimators of the per-anchor inner means and the gradient
//! estimators built from them.
//!
//! For anchor `i` of a batch `B`, the inner mean is
//! `mean_{j ∈ B, j ≠ i} exp(ℓ̂(i, j)/τ)`. The estimator `u_i` tracks it with
//! `u_i ← (1-γ) u_i + γ · mean`, and the model gradient is
//! `mean_i τ/(ε + u_i) · ∇ mean_j exp(ℓ̂(i, j)/τ)`, one term per side.

use ndarray::Array2;

use crate::contrastive::{anchor_losses, Direction, Over};
use crate::encoder::{Forward, ModelGrad, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::risk::log_mean_exp;

use super::optim::TauUpdate;
use super::state::TrainerState;

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_batch(
    state: &TrainerState,
    batch: &[usize],
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
) -> Result<()> {
    if batch.len() < 2 {
        return Err(Error::Argument(format!(
            "batch of size {} leaves an anchor without negatives",
            batch.len()
        )));
    }
    if target.size() != batch.len() {
        return Err(Error::Argument(format!(
            "similarity matrix is {0}×{0} but the batch has {1} pairs",
            target.size(),
            batch.len()
        )));
    }
    if let Some(r) = reference {
        target.check_same_shape(r)?;
    }
    let n = state.log_u1.len();
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::Argument(format!("batch index {bad} out of range for {n} pairs")));
    }
    Ok(())
}

fn side_estimators(state: &TrainerState, direction: Direction) -> &[f64] {
    match direction {
        Direction::ImageSide => &state.log_u1,
        Direction::TextSide => &state.log_u2,
    }
}

/// Refresh `u1`, `u2` for the members of `batch`. Entries never touched
/// before take the batch mean directly (γ = 1 on first visit).
pub fn update_u(
    state: &mut TrainerState,
    batch: &[usize],
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
) -> Result<()> {
    check_batch(state, batch, target, reference)?;
    let tau = state.model.tau;
    let gamma = state.params.gamma;
    let mut fresh = Vec::with_capacity(2 * batch.len());
    for direction in Direction::BOTH {
        for (a, _) in batch.iter().enumerate() {
            let (_, losses) = anchor_losses(target, reference, a, direction, Over::ExcludeAnchor)?;
            let scaled: Vec<f64> = losses.iter().map(|l| l / tau).collect();
            fresh.push(log_mean_exp(&scaled));
        }
    }
    let (log_gamma, log_keep) = (gamma.ln(), (1.0 - gamma).ln());
    let b = batch.len();
    for (side, direction) in Direction::BOTH.into_iter().enumerate() {
        let store = match direction {
            Direction::ImageSide => &mut state.log_u1,
            Direction::TextSide => &mut state.log_u2,
        };
        for (a, &idx) in batch.iter().enumerate() {
            let mean = fresh[side * b + a];
            let old = store[idx];
            store[idx] = if old == f64::NEG_INFINITY || gamma >= 1.0 {
                mean
            } else if gamma <= 0.0 {
                old
            } else {
                log_add_exp(log_keep + old, log_gamma + mean)
            };
        }
    }
    state.pending = Some(batch.to_vec());
    Ok(())
}

fn require_fresh(state: &TrainerState, batch: &[usize]) -> Result<()> {
    match &state.pending {
        Some(p) if p.as_slice() == batch => Ok(()),
        Some(_) => Err(Error::State(
            "u-estimators were refreshed for a different batch".into(),
        )),
        None => Err(Error::State(
            "u-estimators have not been refreshed for this batch".into(),
        )),
    }
}

/// `log(ε + u)` for one anchor.
fn log_denominator(log_u: f64, epsilon: f64) -> f64 {
    log_add_exp(epsilon.ln(), log_u)
}

/// `dG/ds` for the gradient estimator: the returned matrix `C` satisfies
/// `G = Σ_{a,c} C[a][c] ∇ s(x_a, y_c)`.
pub fn estimator_coefficients(
    state: &TrainerState,
    batch: &[usize],
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
) -> Result<Array2<f64>> {
    check_batch(state, batch, target, reference)?;
    require_fresh(state, batch)?;
    let b = batch.len();
    let tau = state.model.tau;
    let norm = 1.0 / (b * (b - 1)) as f64;
    let mut coeff = Array2::zeros((b, b));
    for direction in Direction::BOTH {
        let log_u = side_estimators(state, direction);
        for (a, &idx) in batch.iter().enumerate() {
            let log_den = log_denominator(log_u[idx], state.params.epsilon);
            let (candidates, losses) = anchor_losses(target, reference, a, direction, Over::ExcludeAnchor)?;
            let mut total = 0.0;
            for (&c, l) in candidates.iter().zip(&losses) {
                let w = (l / tau - log_den).exp() * norm;
                match direction {
                    Direction::ImageSide => coeff[[a, c]] += w,
                    Direction::TextSide => coeff[[c, a]] += w,
                }
                total += w;
            }
            coeff[[a, a]] -= total;
        }
    }
    Ok(coeff)
}

/// Model-parameter gradient estimate `G1 + G2` for the batch in `forward`.
pub fn gradient_estimator(
    state: &TrainerState,
    batch: &[usize],
    forward: &Forward,
    reference: Option<&SimilarityMatrix>,
) -> Result<ModelGrad> {
    let coeff = estimator_coefficients(state, batch, &forward.sim, reference)?;
    Ok(forward.backprop(&coeff))
}

/// Derivative estimate of the learnable-temperature objective in τ:
/// per side `mean_i [log(ε+u_i) - mean_j exp(ℓ̂/τ)(ℓ̂/τ)/(ε+u_i)]`, plus `2ρ`.
pub fn tau_gradient(
    state: &TrainerState,
    batch: &[usize],
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
) -> Result<f64> {
    if !state.params.tau_learnable {
        return Err(Error::State("temperature is fixed for this run".into()));
    }
    check_batch(state, batch, target, reference)?;
    require_fresh(state, batch)?;
    let tau = state.model.tau;
    let b = batch.len() as f64;
    let mut grad = 2.0 * state.params.rho_tau;
    for direction in Direction::BOTH {
        let log_u = side_estimators(state, direction);
        let mut side = 0.0;
        for (a, &idx) in batch.iter().enumerate() {
            let log_den = log_denominator(log_u[idx], state.params.epsilon);
            let (_, losses) = anchor_losses(target, reference, a, direction, Over::ExcludeAnchor)?;
            let weighted = losses
                .iter()
                .map(|l| (l / tau - log_den).exp() * (l / tau))
                .sum::<f64>()
                / losses.len() as f64;
            side += log_den - weighted;
        }
        grad += side / b;
    }
    Ok(grad)
}

/// Apply one optimizer update with `gradient` and advance the step counter.
pub fn optimizer_step(state: &mut TrainerState, gradient: &ModelGrad) -> Result<()> {
    if gradient.w1.dim() != state.model.w1.dim() || gradient.w2.dim() != state.model.w2.dim() {
        return Err(Error::Argument(format!(
            "gradient shapes {:?}/{:?} do not match parameters {:?}/{:?}",
            gradient.w1.dim(),
            gradient.w2.dim(),
            state.model.w1.dim(),
            state.model.w2.dim()
        )));
    }
    if let Some((tensor, index, value)) = gradient.first_non_finite() {
        return Err(Error::NonFinite(format!(
            "gradient {tensor}[{index}] = {value} at step {} (tau = {}, max |finite grad| = {:e}); training aborted",
            state.step,
            state.model.tau,
            gradient.max_abs()
        )));
    }
    let p = state.params;
    let lr = p.schedule.lr_at(state.step);
    let tau = p.tau_learnable.then_some(TauUpdate {
        lr: lr * p.tau_lr_scale,
        tau_min: p.tau_min,
    });
    state.optimizer.step(&mut state.model, gradient, lr, tau);
    state.step += 1;
    state.pending = None;
    Ok(())
}

/// One full estimator step on a batch: refresh u, then form `G1 + G2` and,
/// when τ is learned, its derivative. Reference `None` gives the plain global
/// contrastive loss.
pub fn estimator_step(
    state: &mut TrainerState,
    batch: &[usize],
    forward: &Forward,
    reference: Option<&SimilarityMatrix>,
) -> Result<ModelGrad> {
    update_u(state, batch, &forward.sim, reference)?;
    let mut grad = gradient_estimator(state, batch, forward, reference)?;
    if state.params.tau_learnable {
        grad.tau = tau_gradient(state, batch, &forward.sim, reference)?;
    }
    Ok(grad)
}
