//! Baseline AI and phase-aware residual (PAAI) car-following models.
//!
//! A PAAI model predicts `â = a_base + w·a_acc + (1 − w)·a_dec`, where `a_base`
//! comes from a classical law, `a_acc` and `a_dec` from two attention heads on
//! a shared LSTM encoder, and `w` is the phase weight. The Baseline AI model
//! has one head and no base law.

mod ensemble;
mod loss;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classic_cf::ModelKind;
use crate::error::{Error, Result};

pub use ensemble::Ensemble;
pub use loss::{composite_loss, AccLoss, LossBreakdown, LossConfig, LossWeights, RegKind, VarianceOf};
pub use model::{FeatureScaler, FeatureWindow, NetworkConfig, PaaiModel, Prediction, OUTPUT_BOUNDS};
pub use train::{train, train_ensemble, EpochRecord, TrainConfig, TrainHistory, TrainingSet};

/// Which learned model family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PaaiKind {
    BaselineAi,
    OvrvPaai,
    IdmPaai,
}

impl PaaiKind {
    pub fn base_kind(self) -> Option<ModelKind> {
        match self {
            PaaiKind::BaselineAi => None,
            PaaiKind::OvrvPaai => Some(ModelKind::Ovrv),
            PaaiKind::IdmPaai => Some(ModelKind::Idm),
        }
    }

    pub fn is_residual(self) -> bool {
        self.base_kind().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PaaiKind::BaselineAi => "baseline-ai",
            PaaiKind::OvrvPaai => "ovrv-paai",
            PaaiKind::IdmPaai => "idm-paai",
        }
    }
}

impl fmt::Display for PaaiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PaaiKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-ai" => Ok(PaaiKind::BaselineAi),
            "ovrv-paai" => Ok(PaaiKind::OvrvPaai),
            "idm-paai" => Ok(PaaiKind::IdmPaai),
            other => Err(Error::invalid(format!("unknown learned model `{other}`"))),
        }
    }
}

/// How the phase weight is computed from relative speed and safety margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum PhaseRule {
    /// Hard thresholds; takes only the three configured weights.
    Piecewise,
    /// Sigmoid blend of the same thresholds; approaches the piecewise rule as
    /// `sharpness` grows.
    Smooth { sharpness: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub dv_hi: f64,
    pub dv_lo: f64,
    pub w_accel: f64,
    pub w_decel: f64,
    pub w_neutral: f64,
    pub margin_accel_min: f64,
    pub margin_decel_max: f64,
    /// `s_safe = margin_c1 * v + margin_c0` for the margin feature.
    pub margin_c1: f64,
    pub margin_c0: f64,
    pub rule: PhaseRule,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        Self {
            dv_hi: 0.1,
            dv_lo: -0.1,
            w_accel: 0.8,
            w_decel: 0.2,
            w_neutral: 0.5,
            margin_accel_min: 2.0,
            margin_decel_max: -1.0,
            margin_c1: 1.5,
            margin_c0: 2.0,
            rule: PhaseRule::Piecewise,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |w: f64| (0.0..=1.0).contains(&w);
        if !(self.dv_lo < self.dv_hi) {
            return Err(Error::invalid("phase config needs dv_lo < dv_hi"));
        }
        if !(unit(self.w_accel) && unit(self.w_decel) && unit(self.w_neutral)) {
            return Err(Error::invalid("phase weights must lie in [0, 1]"));
        }
        if !(self.margin_c0 > 0.0 && self.margin_c1 >= 0.0) {
            return Err(Error::invalid("safe spacing coefficients must keep s_safe positive"));
        }
        if let PhaseRule::Smooth { sharpness } = self.rule {
            if !(sharpness > 0.0 && sharpness.is_finite()) {
                return Err(Error::invalid("smooth phase rule needs a positive sharpness"));
            }
        }
        Ok(())
    }

    pub fn safe_spacing(&self, v: f64) -> f64 {
        self.margin_c1 * v + self.margin_c0
    }
}

/// Relative safety margin `(s − s_safe) / s_safe` with `s_safe = c1·v + c0`.
pub fn safety_margin(s: f64, v: f64, cfg: &PhaseConfig) -> f64 {
    let safe = cfg.safe_spacing(v);
    (s - safe) / safe
}

/// Phase weight for relative speed `dv` and safety margin `m_s`.
///
/// Under the piecewise rule a phase needs both its relative-speed and its
/// margin condition; any disagreement falls back to the neutral weight.
pub fn phase_weight(dv: f64, m_s: f64, cfg: &PhaseConfig) -> f64 {
    match cfg.rule {
        PhaseRule::Piecewise => {
            if dv > cfg.dv_hi && m_s > cfg.margin_accel_min {
                cfg.w_accel
            } else if dv < cfg.dv_lo && m_s < cfg.margin_decel_max {
                cfg.w_decel
            } else {
                cfg.w_neutral
            }
        }
        PhaseRule::Smooth { sharpness: k } => {
            let sig = |x: f64| 1.0 / (1.0 + (-k * x).exp());
            let acc = sig(dv - cfg.dv_hi) * sig(m_s - cfg.margin_accel_min);
            let dec = sig(cfg.dv_lo - dv) * sig(cfg.margin_decel_max - m_s);
            cfg.w_neutral + (cfg.w_accel - cfg.w_neutral) * acc + (cfg.w_decel - cfg.w_neutral) * dec
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn margin_examples() {
        let cfg = PhaseConfig::default();
        assert_eq!(safety_margin(cfg.safe_spacing(12.0), 12.0, &cfg), 0.0);
        assert_eq!(safety_margin(6.0, 0.0, &cfg), 2.0);
        assert_eq!(safety_margin(16.0, 20.0, &cfg), -0.5);
    }

    #[test]
    fn phase_examples() {
        let cfg = PhaseConfig::default();
        assert_eq!(phase_weight(0.5, 3.0, &cfg), 0.8);
        assert_eq!(phase_weight(-0.5, -1.5, &cfg), 0.2);
        for m in [-5.0, -1.5, 0.0, 2.5, 10.0] {
            assert_eq!(phase_weight(0.0, m, &cfg), 0.5);
        }
        assert_eq!(phase_weight(0.5, 0.0, &cfg), 0.5);
        assert_eq!(phase_weight(-0.5, 0.0, &cfg), 0.5);
    }

    #[test]
    fn smooth_rule_approaches_piecewise_away_from_thresholds() {
        let hard = PhaseConfig::default();
        let soft = PhaseConfig {
            rule: PhaseRule::Smooth { sharpness: 200.0 },
            ..hard
        };
        for (dv, m) in [(0.5, 3.0), (-0.5, -1.5), (0.0, 0.0), (0.5, 0.0), (-0.5, 2.5)] {
            assert!((phase_weight(dv, m, &soft) - phase_weight(dv, m, &hard)).abs() < 1e-6);
        }
        assert!(soft.validate().is_ok());
        assert!(PhaseConfig { rule: PhaseRule::Smooth { sharpness: 0.0 }, ..hard }.validate().is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [PaaiKind::BaselineAi, PaaiKind::OvrvPaai, PaaiKind::IdmPaai] {
            assert_eq!(k.as_str().parse::<PaaiKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("ovrv".parse::<PaaiKind>().is_err());
    }

    proptest! {
        #[test]
        fn piecewise_weight_is_one_of_three(dv in -5.0..5.0f64, m in -5.0..5.0f64) {
            let w = phase_weight(dv, m, &PhaseConfig::default());
            prop_assert!(w == 0.8 || w == 0.2 || w == 0.5);
        }

        #[test]
        fn smooth_weight_stays_between_phase_weights(dv in -5.0..5.0f64, m in -5.0..5.0f64, k in 0.1..100.0f64) {
            let cfg = PhaseConfig { rule: PhaseRule::Smooth { sharpness: k }, ..PhaseConfig::default() };
            let w = phase_weight(dv, m, &cfg);
            prop_assert!((0.2 - 1e-12..=0.8 + 1e-12).contains(&w));
        }

        #[test]
        fn margin_is_increasing_in_spacing(s in 0.0..200.0f64, ds in 0.01..50.0f64, v in 0.0..40.0f64) {
            let cfg = PhaseConfig::default();
            prop_assert!(safety_margin(s + ds, v, &cfg) > safety_margin(s, v, &cfg));
        }
    }
}
