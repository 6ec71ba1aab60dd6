use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::TwoTowerModel;
use crate::error::{Error, Result};
use crate::format::{self, Container, Kind, ManifestFields};

use super::optim::{AdamW, LrSchedule};

/// Optimizer and estimator hyperparameters carried by a [`TrainerState`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateParams {
    /// Inner learning rate of the u-estimators, in (0, 1].
    pub gamma: f64,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub tau_learnable: bool,
    /// Penalty coefficient of the `2τρ` term when τ is learned.
    pub rho_tau: f64,
    /// τ learning rate as a multiple of the model learning rate.
    pub tau_lr_scale: f64,
    pub tau_min: f64,
    pub rng_seed: u64,
}

/// Everything a DRRho-CLIP run mutates.
///
/// The u-estimators are stored as logarithms: `exp(ℓ̂/τ)` reaches `e^400`
/// at τ = 0.01, so the moving averages are kept in log space. An entry of
/// `-inf` means the pair has not been visited yet.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub model: TwoTowerModel,
    pub log_u1: Vec<f64>,
    pub log_u2: Vec<f64>,
    pub step: u64,
    pub params: StateParams,
    pub optimizer: AdamW,
    /// Batch whose u-entries were refreshed and not yet consumed by an update.
    pub(crate) pending: Option<Vec<usize>>,
}

impl TrainerState {
    pub fn new(model: TwoTowerModel, n: usize, params: StateParams) -> Self {
        let optimizer = AdamW::new(&model, params.beta1, params.beta2, params.eps_opt, params.weight_decay);
        Self {
            model,
            log_u1: vec![f64::NEG_INFINITY; n],
            log_u2: vec![f64::NEG_INFINITY; n],
            step: 0,
            params,
            optimizer,
            pending: None,
        }
    }

    pub fn u1(&self) -> Vec<f64> {
        self.log_u1.iter().map(|v| v.exp()).collect()
    }

    pub fn u2(&self) -> Vec<f64> {
        self.log_u2.iter().map(|v| v.exp()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(Kind::Checkpoint);
        self.model.push_into(&mut c);
        c.push_f64s("log_u1", &self.log_u1);
        c.push_f64s("log_u2", &self.log_u2);
        c.push_u64s("step", &[self.step]);
        c.push_bytes("params", serde_json::to_string(&self.params)?.as_bytes());
        let o = &self.optimizer;
        c.push_matrix("m_w1", &o.m_w1);
        c.push_matrix("v_w1", &o.v_w1);
        c.push_matrix("m_w2", &o.m_w2);
        c.push_matrix("v_w2", &o.v_w2);
        c.push_f64s("tau_moments", &[o.m_tau, o.v_tau]);
        c.push_u64s("adam_t", &[o.t]);
        format::write(
            path,
            &c,
            ManifestFields {
                n: self.log_u1.len() as u64,
                dims: format::dims([
                    ("d", self.model.dim()),
                    ("d_x", self.model.d_x()),
                    ("d_y", self.model.d_y()),
                ]),
                seed: Some(self.params.rng_seed),
                source_id: Some(self.model.id_hash()),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, manifest) = format::read(path, Kind::Checkpoint)?;
        let model = TwoTowerModel::from_container(&c)?;
        let log_u1 = c.f64s("log_u1")?;
        let log_u2 = c.f64s("log_u2")?;
        format::check_n(&manifest, log_u1.len())?;
        if log_u2.len() != log_u1.len() {
            return Err(Error::Format(format!(
                "u-estimator lengths differ: {} vs {}",
                log_u1.len(),
                log_u2.len()
            )));
        }
        format::check_dim(&manifest, "d", model.dim())?;
        let params: StateParams = serde_json::from_slice(&c.bytes("params")?)
            .map_err(|e| Error::Format(format!("checkpoint params: {e}")))?;
        let tau_moments = c.f64s("tau_moments")?;
        let [m_tau, v_tau] = tau_moments[..] else {
            return Err(Error::Format("tau_moments must hold two values".into()));
        };
        let optimizer = AdamW {
            beta1: params.beta1,
            beta2: params.beta2,
            eps: params.eps_opt,
            weight_decay: params.weight_decay,
            m_w1: c.matrix("m_w1")?,
            v_w1: c.matrix("v_w1")?,
            m_w2: c.matrix("m_w2")?,
            v_w2: c.matrix("v_w2")?,
            m_tau,
            v_tau,
            t: c.u64_scalar("adam_t")?,
        };
        if optimizer.m_w1.dim() != model.w1.dim() || optimizer.m_w2.dim() != model.w2.dim() {
            return Err(Error::Format("optimizer moments do not match model shape".into()));
        }
        Ok(Self {
            model,
            log_u1,
            log_u2,
            step: c.u64_scalar("step")?,
            params,
            optimizer,
            pending: None,
        })
    }
}
