//! Distributionally robust risks over a vector of (possibly reference-shifted)
//! losses.
//!
//! Four aggregators are provided:
//!
//! * `cvar_topk`: average of the `k` largest losses.
//! * `kl_regularized_risk`: `τ log((1/m) Σ exp(ℓ_i/τ))`.
//! * `kl_constrained_risk`: the dual `min_τ τ log((1/m) Σ exp(ℓ_i/τ)) + τρ/n`.
//! * `chi2_dro_risk`: `sup_p Σ p_i ℓ_i` over the simplex intersected with the
//!   χ² ball `(1/n) Σ (n p_i - 1)² / 2 ≤ ρ/n`.
//!
//! Feeding `drrho_shift(target, reference)` into any of them gives the
//! corresponding reference-shifted risk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    values: Vec<f64>,
    bounds: Option<(f64, f64)>,
}

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Argument(format!("loss {i} is not finite ({v})")));
        }
        Ok(Self {
            values,
            bounds: None,
        })
    }

    /// Attach known bounds `[m0, m1]`; every value must lie inside them.
    pub fn with_bounds(self, m0: f64, m1: f64) -> Result<Self> {
        if !(m0 <= m1) {
            return Err(Error::Argument(format!("bounds [{m0}, {m1}] are empty")));
        }
        if let Some(v) = self.values.iter().find(|v| **v < m0 || **v > m1) {
            return Err(Error::Argument(format!("loss {v} outside [{m0}, {m1}]")));
        }
        Ok(Self {
            bounds: Some((m0, m1)),
            ..self
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Argument("loss vector is empty".into()));
        }
        Ok(())
    }

    fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    fn range(&self) -> f64 {
        let (lo, hi) = min_max(&self.values);
        hi - lo
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Argument(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::Argument(format!("rho must be non-negative, got {rho}")));
    }
    Ok(())
}

/// `τ log((1/m) Σ exp(v_i/τ))` with the maximum factored out. Returns
/// `-inf` for an empty slice.
pub fn tau_log_mean_exp(values: &[f64], tau: f64) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| ((v - max) / tau).exp()).sum();
    max + tau * (sum / values.len() as f64).ln()
}

/// `log((1/m) Σ exp(a_i))` for arbitrary exponents.
pub fn log_mean_exp(exponents: &[f64]) -> f64 {
    tau_log_mean_exp(exponents, 1.0)
}

pub fn cvar_topk(losses: &LossVector, k: usize) -> Result<f64> {
    let m = losses.len();
    if k == 0 || k > m {
        return Err(Error::Argument(format!("k = {k} must lie in [1, {m}]")));
    }
    Ok(top_k_indices(losses.values(), k)
        .iter()
        .map(|&i| losses.values()[i])
        .sum::<f64>()
        / k as f64)
}

/// Indices of the `k` largest values, ordered by value descending then index
/// ascending.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// `p_i ∝ exp(ℓ_i/τ)`.
pub fn softmax_weights(losses: &LossVector, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    losses.require_nonempty()?;
    Ok(softmax(losses.values(), tau))
}

pub(crate) fn softmax(values: &[f64], tau: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = values.iter().map(|v| ((v - max) / tau).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

pub fn kl_regularized_risk(losses: &LossVector, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    losses.require_nonempty()?;
    Ok(tau_log_mean_exp(losses.values(), tau))
}

/// Bounds of the temperature search in [`kl_constrained_risk`].
pub fn kl_tau_bounds(losses: &LossVector) -> (f64, f64) {
    let scale = losses.range().max(1.0);
    (1e-6 * scale, 1e6 * scale)
}

const KL_TERNARY_ITERS: usize = 80;

/// Returns `(risk, τ*)`. `n` is the dataset size in the radius `ρ/n`, which
/// may differ from the number of losses when they come from a mini-batch.
pub fn kl_constrained_risk(losses: &LossVector, rho: f64, n: usize) -> Result<(f64, f64)> {
    check_rho(rho)?;
    losses.require_nonempty()?;
    if n == 0 {
        return Err(Error::Argument("n must be at least 1".into()));
    }
    let radius = rho / n as f64;
    let values = losses.values();
    let dual = |tau: f64| tau_log_mean_exp(values, tau) + tau * radius;

    let (tau_min, tau_max) = kl_tau_bounds(losses);
    let (mut lo, mut hi) = (tau_min.ln(), tau_max.ln());
    for _ in 0..KL_TERNARY_ITERS {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if dual(m1.exp()) <= dual(m2.exp()) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    let mid = (0.5 * (lo + hi)).exp();
    // The infimum may sit on either boundary of the bracket.
    let best = [(dual(mid), mid), (dual(tau_min), tau_min), (dual(tau_max), tau_max)]
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("non-empty candidate list");
    Ok(best)
}

const CHI2_BISECTION_ITERS: usize = 400;
const CHI2_RESIDUAL_TOL: f64 = 1e-10;

/// Returns `(risk, p)`; requires one loss per sample (`losses.len() == n`).
pub fn chi2_dro_risk(losses: &LossVector, rho: f64, n: usize) -> Result<(f64, Vec<f64>)> {
    check_rho(rho)?;
    losses.require_nonempty()?;
    if losses.len() != n {
        return Err(Error::Argument(format!(
            "χ² risk needs one loss per sample: {} losses for n = {n}",
            losses.len()
        )));
    }
    let values = losses.values();
    let nf = n as f64;
    let uniform = vec![1.0 / nf; n];
    let mean = losses.mean();
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let spread = centered.iter().map(|c| c * c).sum::<f64>().sqrt();
    // ‖p - 1/n‖² ≤ 2ρ/n²
    let radius = (2.0 * rho).sqrt() / nf;

    if rho == 0.0 || spread == 0.0 {
        return Ok((mean, uniform));
    }

    // Interior candidate: p = 1/n + radius · (ℓ - ℓ̄)/‖ℓ - ℓ̄‖.
    let step = radius / spread;
    let interior: Vec<f64> = centered.iter().map(|c| 1.0 / nf + step * c).collect();
    if interior.iter().all(|p| *p >= 0.0) {
        let risk = mean + step * spread * spread;
        return Ok((risk, interior));
    }

    // Otherwise p(λ) = proj_Δ(ℓ/λ), whose distance from uniform decreases in λ.
    let target = radius * radius;
    let dist2 = |p: &[f64]| p.iter().map(|x| (x - 1.0 / nf).powi(2)).sum::<f64>();
    let at = |lambda: f64| {
        let scaled: Vec<f64> = values.iter().map(|v| v / lambda).collect();
        project_simplex(&scaled)
    };

    let max_dev = centered.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let mut hi = 2.0 * (nf * max_dev).max(spread / radius);
    let mut p_hi = at(hi);
    while dist2(&p_hi) > target {
        hi *= 2.0;
        p_hi = at(hi);
    }

    // Vertex limit: all mass on the maximizers.
    let (_, top) = min_max(values);
    let winners: Vec<usize> = (0..n).filter(|&i| values[i] == top).collect();
    let mut vertex = vec![0.0; n];
    for &i in &winners {
        vertex[i] = 1.0 / winners.len() as f64;
    }
    if dist2(&vertex) <= target {
        return Ok((top, vertex));
    }

    let mut lo = hi;
    loop {
        lo *= 0.5;
        if dist2(&at(lo)) > target {
            break;
        }
        if lo < f64::MIN_POSITIVE * 1e20 {
            return Err(Error::Solver(format!(
                "χ² bracket search failed: rho = {rho}, n = {n}, range = {}",
                losses.range()
            )));
        }
    }

    let (mut log_lo, mut log_hi) = (lo.ln(), hi.ln());
    for _ in 0..CHI2_BISECTION_ITERS {
        let mid = 0.5 * (log_lo + log_hi);
        if mid <= log_lo || mid >= log_hi {
            break;
        }
        let p = at(mid.exp());
        if dist2(&p) > target {
            log_lo = mid;
        } else {
            log_hi = mid;
            p_hi = p;
        }
    }
    let residual = target - dist2(&p_hi);
    if !(residual >= -CHI2_RESIDUAL_TOL && residual <= CHI2_RESIDUAL_TOL * target.max(1.0)) {
        return Err(Error::Solver(format!(
            "χ² constraint residual {residual:e} exceeds tolerance (target {target:e}, rho {rho}, n {n}, λ in [{:e}, {:e}])",
            log_lo.exp(),
            log_hi.exp()
        )));
    }
    let risk = p_hi.iter().zip(values).map(|(p, v)| p * v).sum();
    Ok((risk, p_hi))
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut shift = 0.0;
    for (k, u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            shift = candidate;
        }
    }
    v.iter().map(|x| (x - shift).max(0.0)).collect()
}

/// `target - reference`, elementwise.
pub fn drrho_shift(target: &LossVector, reference: &LossVector) -> Result<LossVector> {
    if target.len() != reference.len() {
        return Err(Error::Argument(format!(
            "length mismatch: {} target losses vs {} reference losses",
            target.len(),
            reference.len()
        )));
    }
    LossVector::new(
        target
            .values()
            .iter()
            .zip(reference.values())
            .map(|(a, b)| a - b)
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskSpec {
    Chi2Constrained { rho: f64, n: usize },
    CvarTopk { k: usize },
    KlConstrained { rho: f64, n: usize },
    KlRegularized { tau: f64 },
}

impl RiskSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RiskSpec::Chi2Constrained { rho, n } | RiskSpec::KlConstrained { rho, n } => {
                check_rho(rho)?;
                if n == 0 {
                    return Err(Error::Argument("n must be at least 1".into()));
                }
                Ok(())
            }
            RiskSpec::CvarTopk { k } => {
                if k == 0 {
                    return Err(Error::Argument("k must be at least 1".into()));
                }
                Ok(())
            }
            RiskSpec::KlRegularized { tau } => check_tau(tau),
        }
    }

    pub fn evaluate(&self, losses: &LossVector) -> Result<f64> {
        self.validate()?;
        match *self {
            RiskSpec::Chi2Constrained { rho, n } => chi2_dro_risk(losses, rho, n).map(|r| r.0),
            RiskSpec::CvarTopk { k } => cvar_topk(losses, k),
            RiskSpec::KlConstrained { rho, n } => kl_constrained_risk(losses, rho, n).map(|r| r.0),
            RiskSpec::KlRegularized { tau } => kl_regularized_risk(losses, tau),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lv(v: &[f64]) -> LossVector {
        LossVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cvar_examples() {
        assert_eq!(cvar_topk(&lv(&[1.0, 3.0, 2.0]), 2).unwrap(), 2.5);
        assert_eq!(cvar_topk(&lv(&[4.0; 5]), 3).unwrap(), 4.0);
        assert_eq!(cvar_topk(&lv(&[1.0, 2.0, 6.0]), 3).unwrap(), 3.0);
        assert!(cvar_topk(&lv(&[1.0]), 0).is_err());
        assert!(cvar_topk(&lv(&[1.0]), 2).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[3.0, 3.0, 3.0], 1), vec![0]);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_weights(&lv(&[0.0, 1.0]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        let u = softmax_weights(&lv(&[2.0; 4]), 0.3).unwrap();
        assert!(u.iter().all(|x| *x == 0.25));
        let hard = softmax_weights(&lv(&[0.1, 0.9, 0.3]), 1e-4).unwrap();
        assert_eq!(hard, vec![0.0, 1.0, 0.0]);
        assert!(softmax_weights(&lv(&[1.0]), 0.0).is_err());
    }

    #[test]
    fn kl_regularized_examples() {
        let e = std::f64::consts::E;
        let r = kl_regularized_risk(&lv(&[0.0, 1.0]), 1.0).unwrap();
        assert!((r - ((1.0 + e) / 2.0).ln()).abs() < 1e-15);
        assert!((r - 0.620115).abs() < 1e-6);
        assert_eq!(kl_regularized_risk(&lv(&[0.7; 3]), 0.05).unwrap(), 0.7);
        let far = kl_regularized_risk(&lv(&[0.0, 1.0]), 1e6).unwrap();
        assert!((far - 0.5).abs() < 1e-6);
    }

    #[test]
    fn kl_constrained_constant_and_zero_radius() {
        let (r, _) = kl_constrained_risk(&lv(&[1.5; 4]), 0.02, 4).unwrap();
        assert!((r - 1.5).abs() <= 1e-8, "{r}");
        let v = lv(&[0.1, 0.4, -0.3, 0.9]);
        let (r, tau) = kl_constrained_risk(&v, 0.0, 4).unwrap();
        assert!((r - 0.275).abs() < 1e-6, "{r}");
        assert!(tau > 1e5);
        assert!(kl_constrained_risk(&v, -1.0, 4).is_err());
    }

    #[test]
    fn chi2_two_point_example() {
        let (r, p) = chi2_dro_risk(&lv(&[0.0, 1.0]), 0.08, 2).unwrap();
        assert!((r - (0.5 + 0.5 * 0.08f64.sqrt())).abs() < 1e-12);
        assert!((r - 0.641421).abs() < 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn chi2_constant_is_uniform() {
        let (r, p) = chi2_dro_risk(&lv(&[2.0; 3]), 0.5, 3).unwrap();
        assert_eq!(r, 2.0);
        assert!(p.iter().all(|x| (*x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn chi2_large_radius_reaches_vertex() {
        let (r, p) = chi2_dro_risk(&lv(&[0.0, 1.0, 0.5]), 100.0, 3).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn chi2_boundary_solution_is_feasible() {
        // Radius large enough that the smallest weight hits zero.
        let v = lv(&[0.0, 0.1, 1.0]);
        let (r, p) = chi2_dro_risk(&v, 2.7, 3).unwrap();
        assert!(p.iter().all(|x| *x >= 0.0));
        assert_eq!(p[0], 0.0);
        let d2: f64 = p.iter().map(|x| (x - 1.0 / 3.0).powi(2)).sum();
        assert!((d2 - 2.0 * 2.7 / 9.0).abs() < 1e-10);
        assert!(r > 0.9 && r < 1.0);
        assert!(chi2_dro_risk(&v, 2.7, 4).is_err());
    }

    #[test]
    fn shift_examples() {
        let s = drrho_shift(&lv(&[2.0, 3.0]), &lv(&[1.0, 5.0])).unwrap();
        assert_eq!(s.values(), &[1.0, -2.0]);
        let t = lv(&[0.3, -1.0]);
        assert!(drrho_shift(&t, &t).unwrap().values().iter().all(|v| *v == 0.0));
        assert_eq!(drrho_shift(&t, &lv(&[0.0, 0.0])).unwrap(), t);
        assert!(drrho_shift(&t, &lv(&[0.0])).is_err());
    }

    #[test]
    fn loss_vector_validation() {
        assert!(LossVector::new(vec![f64::NAN]).is_err());
        assert!(lv(&[0.5, 1.0]).with_bounds(0.0, 0.9).is_err());
        assert_eq!(lv(&[0.5]).with_bounds(0.0, 1.0).unwrap().bounds(), Some((0.0, 1.0)));
    }

    #[test]
    fn risk_spec_dispatch() {
        let v = lv(&[1.0, 3.0, 2.0]);
        assert_eq!(RiskSpec::CvarTopk { k: 2 }.evaluate(&v).unwrap(), 2.5);
        assert!(RiskSpec::KlRegularized { tau: -1.0 }.evaluate(&v).is_err());
        let spec: RiskSpec = serde_json::from_str(r#"{"kind":"kl_constrained","rho":1.0,"n":3}"#).unwrap();
        assert_eq!(spec, RiskSpec::KlConstrained { rho: 1.0, n: 3 });
    }

    fn losses() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-3.0f64..3.0, 2..12)
    }

    proptest! {
        #[test]
        fn kl_regularized_between_mean_and_max(v in losses(), tau in 0.01f64..10.0) {
            let l = lv(&v);
            let r = kl_regularized_risk(&l, tau).unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r >= mean - 1e-12 && r <= max + 1e-12);
            let r2 = kl_regularized_risk(&l, tau * 1.5).unwrap();
            prop_assert!(r2 <= r + 1e-12);
        }

        #[test]
        fn shift_invariance(v in losses(), c in -5.0f64..5.0, tau in 0.05f64..2.0, rho in 0.0f64..0.5) {
            let l = lv(&v);
            let shifted = lv(&v.iter().map(|x| x + c).collect::<Vec<_>>());
            let n = v.len();
            let k = (n / 2).max(1);
            prop_assert!((cvar_topk(&shifted, k).unwrap() - cvar_topk(&l, k).unwrap() - c).abs() < 1e-12);
            prop_assert!((kl_regularized_risk(&shifted, tau).unwrap() - kl_regularized_risk(&l, tau).unwrap() - c).abs() < 1e-12);
            prop_assert!((kl_constrained_risk(&shifted, rho, n).unwrap().0 - kl_constrained_risk(&l, rho, n).unwrap().0 - c).abs() < 1e-9);
            prop_assert!((chi2_dro_risk(&shifted, rho, n).unwrap().0 - chi2_dro_risk(&l, rho, n).unwrap().0 - c).abs() < 1e-9);
            let p = softmax_weights(&l, tau).unwrap();
            let q = softmax_weights(&shifted, tau).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn cvar_monotone_in_k(v in losses()) {
            let l = lv(&v);
            let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(cvar_topk(&l, 1).unwrap(), max);
            for k in 1..v.len() {
                prop_assert!(cvar_topk(&l, k).unwrap() >= cvar_topk(&l, k + 1).unwrap() - 1e-12);
            }
        }

        #[test]
        fn softmax_sums_to_one(v in losses(), tau in 0.001f64..5.0) {
            let p = softmax_weights(&lv(&v), tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn chi2_weights_are_feasible(v in losses(), rho in 0.0f64..3.0) {
            let n = v.len();
            let (r, p) = chi2_dro_risk(&lv(&v), rho, n).unwrap();
            prop_assert!(p.iter().all(|x| *x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let d2: f64 = p.iter().map(|x| (x - 1.0 / n as f64).powi(2)).sum();
            prop_assert!(d2 <= 2.0 * rho / (n * n) as f64 + 1e-10);
            let mean = v.iter().sum::<f64>() / n as f64;
            prop_assert!(r >= mean - 1e-12);
        }

        #[test]
        fn constant_reference_shift_decomposes(v in losses(), c in -2.0f64..2.0, tau in 0.05f64..2.0) {
            let l = lv(&v);
            let reference = lv(&vec![c; v.len()]);
            let shifted = drrho_shift(&l, &reference).unwrap();
            let lhs = kl_regularized_risk(&shifted, tau).unwrap();
            let rhs = kl_regularized_risk(&l, tau).unwrap() - c;
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
