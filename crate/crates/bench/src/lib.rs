//! Shared fixtures for the criterion benchmarks.

use paai_core::classic_cf::{ClassicModel, IdmParams, OvrvParams};
use paai_core::synth::{self, LeadProfile};
use paai_core::Trajectory;

pub const DT: f64 = 0.1;

pub fn ovrv() -> ClassicModel {
    ClassicModel::Ovrv(OvrvParams::EV_ACC)
}

pub fn idm() -> ClassicModel {
    ClassicModel::Idm(IdmParams::EV_ACC)
}

/// Lead speed series of `n` samples.
pub fn lead(n: usize, seed: u64) -> Vec<f64> {
    LeadProfile::default().generate(n, DT, seed)
}

/// Follower trajectory of `model` behind the default lead profile.
pub fn trajectory(model: &ClassicModel, n: usize, seed: u64) -> Trajectory {
    synth::follow(model, &lead(n, seed), DT).expect("synthetic follower")
}
