use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::PaaiModel;
use super::PaaiKind;
use crate::classic_cf::CfState;
use crate::error::{Error, Result};
use crate::sim::CarFollowing;

/// Independently trained members whose predictions are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    members: Vec<PaaiModel>,
}

impl Ensemble {
    pub fn new(members: Vec<PaaiModel>) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::invalid("an ensemble needs at least one member"))?;
        if members.iter().any(|m| m.kind != first.kind) {
            return Err(Error::invalid("ensemble members must share one model kind"));
        }
        for m in &members {
            m.validate()?;
        }
        Ok(Self { members })
    }

    pub fn kind(&self) -> PaaiKind {
        self.members[0].kind
    }

    pub fn members(&self) -> &[PaaiModel] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Mean of the members' clamped predictions for the last state of `history`.
    pub fn predict(&self, history: &[CfState]) -> Result<f64> {
        let mut sum = 0.0;
        for m in &self.members {
            sum += m.accel(history)?;
        }
        Ok(sum / self.members.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: Self = serde_json::from_str(s)?;
        Self::new(e.members)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

impl CarFollowing for Ensemble {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn accel(&self, history: &[CfState]) -> Result<f64> {
        self.predict(history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paai::NetworkConfig;

    fn constant(c: f64) -> PaaiModel {
        let net = NetworkConfig {
            hidden: 3,
            attention_dim: 2,
            head_mid: 2,
            seq_len: 4,
        };
        let mut m = PaaiModel::zeroed(PaaiKind::BaselineAi, None, net).unwrap();
        let last = m.params().len() - 1;
        m.params_mut()[last].data_mut()[0] = c;
        m
    }

    fn history() -> Vec<CfState> {
        vec![CfState::new(30.0, 15.0, 15.5); 6]
    }

    #[test]
    fn ensemble_averages_members() {
        let e = Ensemble::new([-1.0, 0.0, 1.0, 2.0, 3.0].map(constant).to_vec()).unwrap();
        assert_eq!(e.predict(&history()).unwrap(), 1.0);
    }

    #[test]
    fn identical_members_match_one_member() {
        let one = constant(0.7);
        let e = Ensemble::new(vec![one.clone(); 5]).unwrap();
        let h = history();
        assert!((e.predict(&h).unwrap() - one.accel(&h).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_mixed_ensembles() {
        assert!(Ensemble::new(vec![]).is_err());
        let mut other = constant(0.0);
        other.kind = PaaiKind::OvrvPaai;
        assert!(Ensemble::new(vec![constant(0.0), other]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let e = Ensemble::new(vec![constant(0.25), constant(-0.5)]).unwrap();
        assert_eq!(Ensemble::from_json(&e.to_json().unwrap()).unwrap(), e);
    }
}
