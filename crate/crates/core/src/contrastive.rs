//! Pairwise gap losses and the per-anchor DRO aggregation used by global
//! contrastive learning, with and without a reference model.
//!
//! For an image anchor `i` the pairwise loss against text `j` is
//! `s[i][j] - s[i][i]`; for a text anchor it is `s[j][i] - s[i][i]`. With a
//! reference, the reference model's loss for the same pair is subtracted.
//! Anchor losses aggregate these by `τ log(mean_j exp(ℓ_j/τ))`.

use serde::{Deserialize, Serialize};

use crate::encoder::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::risk::{tau_log_mean_exp, LossVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Anchor is image `i`, candidates are texts.
    ImageSide,
    /// Anchor is text `i`, candidates are images.
    TextSide,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::ImageSide, Direction::TextSide];
}

/// Which candidates an anchor averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Over {
    /// All `n` candidates, including the positive (whose gap is 0).
    FullSet,
    /// Every candidate except the anchor's own partner.
    ExcludeAnchor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorLossBundle {
    pub anchor_index: usize,
    pub direction: Direction,
    /// Candidate indices, ascending.
    pub candidates: Vec<usize>,
    /// Pairwise (or shifted) losses aligned with `candidates`.
    pub losses: LossVector,
    pub value: f64,
}

fn check_index(s: &SimilarityMatrix, idx: usize) -> Result<()> {
    if idx >= s.size() {
        return Err(Error::Argument(format!(
            "index {idx} out of range for a {0}×{0} similarity matrix",
            s.size()
        )));
    }
    Ok(())
}

#[inline]
fn gap(s: &SimilarityMatrix, i: usize, j: usize, direction: Direction) -> f64 {
    match direction {
        Direction::ImageSide => s.get(i, j) - s.get(i, i),
        Direction::TextSide => s.get(j, i) - s.get(i, i),
    }
}

pub fn pairwise_loss(s: &SimilarityMatrix, i: usize, j: usize, direction: Direction) -> Result<f64> {
    check_index(s, i)?;
    check_index(s, j)?;
    Ok(gap(s, i, j, direction))
}

pub fn rho_pairwise_loss(
    target: &SimilarityMatrix,
    reference: &SimilarityMatrix,
    i: usize,
    j: usize,
    direction: Direction,
) -> Result<f64> {
    target.check_same_shape(reference)?;
    Ok(pairwise_loss(target, i, j, direction)? - gap(reference, i, j, direction))
}

/// Pairwise losses of anchor `i` over its candidate set, shifted by the
/// reference when one is given.
pub fn anchor_losses(
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
    i: usize,
    direction: Direction,
    over: Over,
) -> Result<(Vec<usize>, Vec<f64>)> {
    check_index(target, i)?;
    if let Some(r) = reference {
        target.check_same_shape(r)?;
    }
    let candidates: Vec<usize> = (0..target.size())
        .filter(|&j| over == Over::FullSet || j != i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Argument(format!(
            "anchor {i} has no candidates in a batch of {}",
            target.size()
        )));
    }
    let losses = candidates
        .iter()
        .map(|&j| {
            let l = gap(target, i, j, direction);
            match reference {
                Some(r) => l - gap(r, i, j, direction),
                None => l,
            }
        })
        .collect();
    Ok((candidates, losses))
}

fn bundle(
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
    i: usize,
    direction: Direction,
    tau: f64,
    over: Over,
) -> Result<AnchorLossBundle> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("tau must be positive, got {tau}")));
    }
    let (candidates, losses) = anchor_losses(target, reference, i, direction, over)?;
    let value = tau_log_mean_exp(&losses, tau);
    Ok(AnchorLossBundle {
        anchor_index: i,
        direction,
        candidates,
        losses: LossVector::new(losses)?,
        value,
    })
}

pub fn drrho_anchor_loss(
    target: &SimilarityMatrix,
    reference: &SimilarityMatrix,
    i: usize,
    direction: Direction,
    tau: f64,
    over: Over,
) -> Result<AnchorLossBundle> {
    bundle(target, Some(reference), i, direction, tau, over)
}

pub fn gcl_anchor_loss(
    target: &SimilarityMatrix,
    i: usize,
    direction: Direction,
    tau: f64,
    over: Over,
) -> Result<AnchorLossBundle> {
    bundle(target, None, i, direction, tau, over)
}

/// `(1/n) Σ_i [F(x_i) + F(y_i)]`; DRRho when a reference is given, plain
/// global contrastive loss otherwise.
pub fn global_objective(
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
    tau: f64,
    over: Over,
) -> Result<f64> {
    let n = target.size();
    if n == 0 {
        return Err(Error::Argument("empty similarity matrix".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for direction in Direction::BOTH {
            total += bundle(target, reference, i, direction, tau, over)?.value;
        }
    }
    Ok(total / n as f64)
}

/// Objective optimized when the temperature is learned: the global objective
/// plus `2τρ`.
pub fn learnable_tau_objective(
    target: &SimilarityMatrix,
    reference: Option<&SimilarityMatrix>,
    tau: f64,
    rho: f64,
    over: Over,
) -> Result<f64> {
    Ok(global_objective(target, reference, tau, over)? + 2.0 * tau * rho)
}
