//! Composite training loss `α·L_acc + β·L_safe + γ·L_reg`.

use serde::{Deserialize, Serialize};

use super::PaaiKind;
use crate::error::{Error, Result};
use crate::neural::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccLoss {
    SmoothL1,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegKind {
    /// Batch variance of the predicted series.
    Variance,
    /// Mean absolute acceleration error.
    Mae,
}

/// Which series the variance regularizer measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceOf {
    /// The final prediction `â`.
    Prediction,
    /// The network's contribution `a_nn` (equal to `â` for the Baseline AI model).
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    fn lerp(self, other: Self, f: f64) -> Self {
        Self {
            alpha: self.alpha + (other.alpha - self.alpha) * f,
            beta: self.beta + (other.beta - self.beta) * f,
            gamma: self.gamma + (other.gamma - self.gamma) * f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weights at the start of training.
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Weights at the end of training; `None` keeps them fixed.
    pub end_weights: Option<LossWeights>,
    pub acc_loss: AccLoss,
    /// Loss-side safe spacing `safe_c1 * v + safe_c0`.
    pub safe_c1: f64,
    pub safe_c0: f64,
    pub reg: RegKind,
    pub variance_of: VarianceOf,
    pub l2_coeff: f64,
}

impl LossConfig {
    pub fn for_kind(kind: PaaiKind) -> Self {
        let paai_schedule = Some(LossWeights::new(0.4, 0.5, 0.1));
        match kind {
            PaaiKind::BaselineAi => Self {
                alpha: 0.5,
                beta: 0.4,
                gamma: 0.1,
                end_weights: None,
                acc_loss: AccLoss::SmoothL1,
                safe_c1: 1.2,
                safe_c0: 2.0,
                reg: RegKind::Variance,
                variance_of: VarianceOf::Prediction,
                l2_coeff: 1e-5,
            },
            PaaiKind::OvrvPaai => Self {
                alpha: 0.6,
                beta: 0.3,
                gamma: 0.1,
                end_weights: paai_schedule,
                ..Self::for_kind(PaaiKind::BaselineAi)
            },
            PaaiKind::IdmPaai => Self {
                alpha: 0.6,
                beta: 0.3,
                gamma: 0.1,
                end_weights: paai_schedule,
                acc_loss: AccLoss::Mse,
                safe_c1: 1.0,
                safe_c0: 0.0,
                reg: RegKind::Mae,
                variance_of: VarianceOf::Prediction,
                l2_coeff: 1e-5,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ws = vec![self.start_weights()];
        ws.extend(self.end_weights);
        for w in ws {
            if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.gamma >= 0.0) {
                return Err(Error::invalid(format!("loss weights must be non-negative, got {w:?}")));
            }
        }
        if !(self.l2_coeff >= 0.0 && self.safe_c1.is_finite() && self.safe_c0.is_finite()) {
            return Err(Error::invalid("invalid loss coefficients"));
        }
        Ok(())
    }

    pub fn start_weights(&self) -> LossWeights {
        LossWeights::new(self.alpha, self.beta, self.gamma)
    }

    /// Weights at training progress `f` in `[0, 1]`.
    pub fn weights_at(&self, f: f64) -> LossWeights {
        match self.end_weights {
            Some(end) => self.start_weights().lerp(end, f.clamp(0.0, 1.0)),
            None => self.start_weights(),
        }
    }

    /// Weights used for validation and early stopping: the schedule midpoint.
    pub fn validation_weights(&self) -> LossWeights {
        self.weights_at(0.5)
    }
}

/// Loss components, each already averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub acc: f64,
    pub safe: f64,
    /// Regularizer including the L2 term.
    pub reg: f64,
}

/// Per-sample quantities the batch loss needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LossSample {
    pub a_true: f64,
    pub v: f64,
    pub v_l: f64,
    pub s: f64,
}

/// Handles of a loss recorded on a batch graph.
pub(crate) struct LossVars {
    pub total: Var,
    pub acc: Var,
    pub safe: Var,
    pub reg: Var,
}

/// Records the composite loss on `g`.
///
/// `a_hat` and `a_nn` are vectors of batch predictions; `params` are the
/// network parameters for the L2 term. The safety hinge compares the
/// loss-side safe spacing at the predicted next speed `v + â·dt` with the
/// next spacing `s + (v_l − v)·dt`.
pub(crate) fn record_loss(
    g: &mut Graph<'_>,
    cfg: &LossConfig,
    w: LossWeights,
    a_hat: Var,
    a_nn: Var,
    params: &[Var],
    samples: &[LossSample],
    dt: f64,
) -> Result<LossVars> {
    if samples.is_empty() {
        return Err(Error::invalid("loss needs a non-empty batch"));
    }
    let targets: Vec<f64> = samples.iter().map(|x| x.a_true).collect();
    let acc = match cfg.acc_loss {
        AccLoss::SmoothL1 => g.smooth_l1_mean(a_hat, targets.clone())?,
        AccLoss::Mse => g.mse_mean(a_hat, targets.clone())?,
    };
    let shift: Vec<f64> = samples
        .iter()
        .map(|x| cfg.safe_c1 * x.v + cfg.safe_c0 - (x.s + (x.v_l - x.v) * dt))
        .collect();
    let gap = g.scale_shift(a_hat, cfg.safe_c1 * dt, shift)?;
    let safe = g.hinge_mean(gap)?;
    let core = match (cfg.reg, cfg.variance_of) {
        (RegKind::Variance, VarianceOf::Prediction) => g.variance(a_hat)?,
        (RegKind::Variance, VarianceOf::Network) => g.variance(a_nn)?,
        (RegKind::Mae, _) => g.mae_mean(a_hat, targets)?,
    };
    let reg = if params.is_empty() || cfg.l2_coeff == 0.0 {
        core
    } else {
        let norms: Vec<Var> = params.iter().map(|&p| g.sum_squares(p)).collect::<Result<_>>()?;
        let stacked = g.stack(&norms)?;
        let l2 = g.sum(stacked)?;
        let l2 = g.scale(l2, cfg.l2_coeff)?;
        g.add(core, l2)?
    };
    let wa = g.scale(acc, w.alpha)?;
    let wb = g.scale(safe, w.beta)?;
    let wc = g.scale(reg, w.gamma)?;
    let parts = g.stack(&[wa, wb, wc])?;
    let total = g.sum(parts)?;
    Ok(LossVars { total, acc, safe, reg })
}

impl LossVars {
    pub(crate) fn breakdown(&self, g: &Graph<'_>) -> LossBreakdown {
        LossBreakdown {
            total: g.value(self.total).item(),
            acc: g.value(self.acc).item(),
            safe: g.value(self.safe).item(),
            reg: g.value(self.reg).item(),
        }
    }
}

/// Evaluates the composite loss on plain prediction vectors without parameters.
pub fn composite_loss(
    cfg: &LossConfig,
    w: LossWeights,
    a_hat: &[f64],
    a_nn: &[f64],
    a_true: &[f64],
    states: &[(f64, f64, f64)],
    dt: f64,
) -> Result<LossBreakdown> {
    if a_hat.len() != a_true.len() || a_hat.len() != states.len() || a_nn.len() != a_hat.len() {
        return Err(Error::invalid("loss inputs must have equal lengths"));
    }
    let samples: Vec<LossSample> = states
        .iter()
        .zip(a_true)
        .map(|(&(s, v, v_l), &a)| LossSample { a_true: a, v, v_l, s })
        .collect();
    let mut g = Graph::new();
    let ah = g.input(Tensor::vector(a_hat.to_vec()))?;
    let an = g.input(Tensor::vector(a_nn.to_vec()))?;
    let vars = record_loss(&mut g, cfg, w, ah, an, &[], &samples, dt)?;
    Ok(vars.breakdown(&g))
}
