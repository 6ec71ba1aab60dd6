//! DRRho-CLIP training and the baseline training paths behind one loop.
//!
//! Every method shares the same skeleton per iteration: sample a batch
//! (epoch-wise shuffle without replacement), embed it, turn the method's loss
//! into a coefficient matrix `dL/ds` on the batch similarities, backpropagate
//! through the encoders and take an AdamW step.

mod estimator;
mod optim;
mod state;

use serde::{Deserialize, Serialize};

pub use estimator::{
    estimator_coefficients, estimator_step, gradient_estimator, optimizer_step, tau_gradient, update_u,
};
pub use optim::{AdamW, LrSchedule, TauUpdate};
pub use state::{StateParams, TrainerState};

use crate::baselines::{
    combined_objective, distillation_grad, distillation_loss, infonce_grad, infonce_loss, jest_select,
    JestMode, JestParams,
};
use crate::contrastive::{global_objective, Over};
use crate::data::{EmbeddingCache, PairedDataset};
use crate::encoder::TwoTowerModel;
use crate::error::{Error, Result};
use crate::experiments::{recall_at_1, ExperimentReport, Provenance};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "openclip")]
    OpenClip,
    #[serde(rename = "fastclip")]
    FastClip,
    #[serde(rename = "drrho-clip")]
    DrrhoClip,
    #[serde(rename = "jest")]
    Jest,
    #[serde(rename = "jest-topk")]
    JestTopk,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::OpenClip,
        Method::FastClip,
        Method::DrrhoClip,
        Method::Jest,
        Method::JestTopk,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::OpenClip => "openclip",
            Method::FastClip => "fastclip",
            Method::DrrhoClip => "drrho-clip",
            Method::Jest => "jest",
            Method::JestTopk => "jest-topk",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn needs_reference(self) -> bool {
        matches!(self, Method::DrrhoClip | Method::Jest | Method::JestTopk)
    }

    fn is_jest(self) -> bool {
        matches!(self, Method::Jest | Method::JestTopk)
    }

    /// Methods built on the u-estimators learn τ by default unless they use a
    /// reference; InfoNCE-style methods learn it as well.
    fn default_tau_mode(self) -> TauMode {
        match self {
            Method::DrrhoClip => TauMode::Fixed,
            _ => TauMode::Learnable,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    Fixed,
    Learnable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub batch_size: usize,
    /// Optimizer updates before the JEST multiplier is applied.
    pub iterations: u64,
    pub lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub embed_dim: usize,
    /// `None` picks the method default (fixed for DRRho-CLIP, learnable otherwise).
    pub tau_mode: Option<TauMode>,
    pub tau_fixed: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub tau_lr_scale: f64,
    /// `ρ` of the learnable-temperature penalty `2τρ`. `None` means 11.0 for
    /// the u-estimator methods and 0 for InfoNCE-based ones.
    pub rho: Option<f64>,
    pub gamma: f64,
    pub epsilon: f64,
    /// Fraction of the training split used (a prefix, so fractions nest).
    pub fraction: f64,
    /// Evaluation period in steps; `None` means `max(1, T/50)`.
    pub eval_every: Option<u64>,
    /// At most this many training pairs enter the exact objective in reports.
    pub eval_objective_cap: usize,
    pub distill: bool,
    pub lambda: f64,
    pub tau_ref: f64,
    pub jest_ratio: f64,
    pub jest_chunks: usize,
    pub jest_sample_temp: f64,
    pub jest_iteration_multiplier: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::DrrhoClip,
            seed: 0,
            batch_size: 64,
            iterations: 400,
            lr: 0.02,
            warmup_steps: 20,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps_opt: 1e-8,
            embed_dim: 16,
            tau_mode: None,
            tau_fixed: 0.01,
            tau_init: 0.07,
            tau_min: 0.005,
            tau_lr_scale: 0.25,
            rho: None,
            gamma: 0.8,
            epsilon: 1e-8,
            fraction: 1.0,
            eval_every: None,
            eval_objective_cap: 512,
            distill: false,
            lambda: 0.25,
            tau_ref: 0.01,
            jest_ratio: 0.2,
            jest_chunks: 2,
            jest_sample_temp: 1.0,
            jest_iteration_multiplier: 1.87,
        }
    }
}

impl TrainConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            method,
            ..Self::default()
        }
    }

    /// Materialize every method-dependent default.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        let mode = c.tau_mode.unwrap_or_else(|| c.method.default_tau_mode());
        c.tau_mode = Some(mode);
        if c.rho.is_none() {
            c.rho = Some(match c.method {
                Method::FastClip | Method::DrrhoClip => 11.0,
                _ => 0.0,
            });
        }
        if c.eval_every.is_none() {
            c.eval_every = Some((self.total_steps() / 50).max(1));
        }
        c
    }

    /// Optimizer updates actually run, after the JEST compute multiplier.
    pub fn total_steps(&self) -> u64 {
        if self.method.is_jest() {
            (self.iterations as f64 * self.jest_iteration_multiplier).round() as u64
        } else {
            self.iterations
        }
    }

    pub fn tau_learnable(&self) -> bool {
        self.tau_mode.unwrap_or_else(|| self.method.default_tau_mode()) == TauMode::Learnable
    }

    pub fn initial_tau(&self) -> f64 {
        if self.tau_learnable() {
            self.tau_init
        } else {
            self.tau_fixed
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(field: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be positive, got {v}")))
            }
        }
        fn unit(field: &str, v: f64, open_left: bool) -> Result<()> {
            let ok = if open_left { v > 0.0 && v <= 1.0 } else { (0.0..=1.0).contains(&v) };
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, format!("out of range: {v}")))
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        positive("lr", self.lr)?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        positive("eps_opt", self.eps_opt)?;
        positive("tau_fixed", self.tau_fixed)?;
        positive("tau_init", self.tau_init)?;
        positive("tau_min", self.tau_min)?;
        positive("tau_lr_scale", self.tau_lr_scale)?;
        positive("tau_ref", self.tau_ref)?;
        if let Some(rho) = self.rho {
            if !(rho >= 0.0 && rho.is_finite()) {
                return Err(Error::config("rho", format!("must be non-negative, got {rho}")));
            }
        }
        unit("gamma", self.gamma, true)?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be non-negative"));
        }
        unit("fraction", self.fraction, true)?;
        unit("lambda", self.lambda, false)?;
        unit("jest_ratio", self.jest_ratio, true)?;
        if self.jest_chunks == 0 {
            return Err(Error::config("jest_chunks", "must be at least 1"));
        }
        positive("jest_sample_temp", self.jest_sample_temp)?;
        positive("jest_iteration_multiplier", self.jest_iteration_multiplier)?;
        if self.eval_every == Some(0) {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.eval_objective_cap < 2 {
            return Err(Error::config("eval_objective_cap", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub report: ExperimentReport,
}

/// Epoch-wise shuffled batches over a fixed index pool.
struct EpochSampler {
    pool: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
    rng: SeededRng,
}

impl EpochSampler {
    fn new(pool: Vec<usize>, batch: usize, seed: u64) -> Self {
        Self {
            order: pool.clone(),
            cursor: usize::MAX,
            pool,
            batch,
            rng: SeededRng::derive(seed, 0x7361_6d70_6c65),
        }
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor.saturating_add(self.batch) > self.order.len() {
            self.order.copy_from_slice(&self.pool);
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

/// Objective tracked in reports: the method's own exact objective on a fixed
/// set of training pairs, at the model's current temperature.
pub fn method_objective(
    config: &TrainConfig,
    model: &TwoTowerModel,
    dataset: &PairedDataset,
    cache: Option<&EmbeddingCache>,
    indices: &[usize],
) -> Result<f64> {
    let (xs, ys) = dataset.batch(indices);
    let sim = model.forward(xs.view(), ys.view())?.sim;
    let reference = cache.map(|c| c.similarity(indices));
    let tau = model.tau;
    let con = match config.method {
        Method::DrrhoClip => global_objective(&sim, reference.as_ref(), tau, Over::ExcludeAnchor)?,
        Method::FastClip => global_objective(&sim, None, tau, Over::ExcludeAnchor)?,
        Method::OpenClip | Method::Jest | Method::JestTopk => infonce_loss(&sim, tau)?,
    };
    match (config.distill, reference) {
        (true, Some(r)) => {
            let dist = distillation_loss(&sim, &r, tau, config.tau_ref)?;
            combined_objective(con, dist, config.lambda)
        }
        _ => Ok(con),
    }
}

/// Recall@1 of `model` on the pairs `indices`.
pub fn evaluate_recall(model: &TwoTowerModel, dataset: &PairedDataset, indices: &[usize]) -> Result<f64> {
    let (xs, ys) = dataset.batch(indices);
    recall_at_1(&model.forward(xs.view(), ys.view())?.sim)
}

pub fn initial_state(config: &TrainConfig, dataset: &PairedDataset) -> Result<TrainerState> {
    let c = config.resolved();
    let model = TwoTowerModel::random(c.embed_dim, dataset.d_x(), dataset.d_y(), c.initial_tau(), c.seed)?;
    let params = StateParams {
        gamma: c.gamma,
        epsilon: c.epsilon,
        beta1: c.beta1,
        beta2: c.beta2,
        eps_opt: c.eps_opt,
        weight_decay: c.weight_decay,
        schedule: LrSchedule {
            base_lr: c.lr,
            warmup_steps: c.warmup_steps,
            total_steps: c.total_steps(),
        },
        tau_learnable: c.tau_learnable(),
        rho_tau: c.rho.unwrap_or(0.0),
        tau_lr_scale: c.tau_lr_scale,
        tau_min: c.tau_min,
        rng_seed: c.seed,
    };
    Ok(TrainerState::new(model, dataset.len(), params))
}

pub fn train(config: &TrainConfig, dataset: &PairedDataset, cache: Option<&EmbeddingCache>) -> Result<TrainOutcome> {
    config.validate()?;
    let config = config.resolved();
    let needs_ref = config.method.needs_reference() || config.distill;
    let cache = match (needs_ref, cache) {
        (true, None) => {
            return Err(Error::config(
                "ref",
                format!("method {} needs a reference embedding cache", config.method),
            ))
        }
        (true, Some(c)) => {
            c.check_matches(dataset)?;
            Some(c)
        }
        (false, _) => None,
    };

    let pool = dataset.train_subset(config.fraction)?;
    if pool.len() < 2 {
        return Err(Error::config(
            "fraction",
            format!("training subset has {} pairs, need at least 2", pool.len()),
        ));
    }
    let batch = config.batch_size.min(pool.len());
    let draw = if config.method.is_jest() {
        let super_size = ((batch as f64 / config.jest_ratio).round() as usize).min(pool.len());
        if crate::baselines::jest_selection_size(super_size, config.jest_ratio) < 2 {
            return Err(Error::config("jest_ratio", "selection would keep fewer than 2 pairs"));
        }
        super_size
    } else {
        batch
    };
    let objective_set: Vec<usize> = pool.iter().copied().take(config.eval_objective_cap).collect();
    let test = dataset.test_indices();

    let mut state = initial_state(&config, dataset)?;
    let mut report = ExperimentReport::new(
        serde_json::to_value(&config)?,
        Provenance {
            dataset_hash: Some(dataset.content_hash()),
            cache_hash: cache.map(|c| c.source_id.clone()),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_owned(),
        },
    );

    let total = config.total_steps();
    let every = config.eval_every.expect("resolved");
    let evaluate = |state: &TrainerState, report: &mut ExperimentReport| -> Result<()> {
        let step = state.step;
        let obj = method_objective(&config, &state.model, dataset, cache, &objective_set)?;
        report.record(step, "objective", obj)?;
        if test.len() >= 2 {
            report.record(step, "test_recall_at_1", evaluate_recall(&state.model, dataset, &test)?)?;
        }
        report.record(step, "tau", state.model.tau)?;
        Ok(())
    };

    let mut sampler = EpochSampler::new(pool, draw, config.seed);
    if total > 0 {
        evaluate(&state, &mut report)?;
    }
    for t in 0..total {
        let drawn = sampler.next_batch();
        let grad = match config.method {
            Method::DrrhoClip | Method::FastClip => {
                let (xs, ys) = dataset.batch(&drawn);
                let fwd = state.model.forward(xs.view(), ys.view())?;
                let reference = match config.method {
                    Method::DrrhoClip => cache.map(|c| c.similarity(&drawn)),
                    _ => None,
                };
                let mut grad = estimator_step(&mut state, &drawn, &fwd, reference.as_ref())?;
                if config.distill {
                    let r = cache.expect("checked above").similarity(&drawn);
                    let (dc, dtau) = distillation_grad(&fwd.sim, &r, state.model.tau, config.tau_ref)?;
                    grad = grad.scaled(1.0 - config.lambda);
                    let mut dist = fwd.backprop(&dc);
                    dist.tau = if state.params.tau_learnable { dtau } else { 0.0 };
                    grad.add_assign(&dist.scaled(config.lambda));
                }
                grad
            }
            Method::OpenClip | Method::Jest | Method::JestTopk => {
                let chosen = if config.method.is_jest() {
                    let c = cache.expect("checked above");
                    let (xs, ys) = dataset.batch(&drawn);
                    let sim = state.model.forward(xs.view(), ys.view())?.sim;
                    let params = JestParams {
                        ratio: config.jest_ratio,
                        n_chunks: config.jest_chunks,
                        mode: if config.method == Method::Jest { JestMode::Sample } else { JestMode::Topk },
                        tau: state.model.tau,
                        sample_temp: config.jest_sample_temp,
                        seed: SeededRng::derive(config.seed, t).next_u64(),
                    };
                    jest_select(&sim, &c.similarity(&drawn), &drawn, &params)?.selected
                } else {
                    drawn
                };
                let (xs, ys) = dataset.batch(&chosen);
                let fwd = state.model.forward(xs.view(), ys.view())?;
                let tau = state.model.tau;
                let (mut coeff, mut dtau) = infonce_grad(&fwd.sim, tau)?;
                if config.distill {
                    let r = cache.expect("checked above").similarity(&chosen);
                    let (dc, dd) = distillation_grad(&fwd.sim, &r, tau, config.tau_ref)?;
                    coeff = coeff * (1.0 - config.lambda) + dc * config.lambda;
                    dtau = (1.0 - config.lambda) * dtau + config.lambda * dd;
                }
                let mut grad = fwd.backprop(&coeff);
                if state.params.tau_learnable {
                    grad.tau = dtau + 2.0 * state.params.rho_tau;
                }
                grad
            }
        };
        optimizer_step(&mut state, &grad)?;
        if state.step % every == 0 || state.step == total {
            evaluate(&state, &mut report)?;
        }
    }
    Ok(TrainOutcome { state, report })
}
