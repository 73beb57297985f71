//! Synthetic lead profiles and follower generators for tests, benchmarks and the CLI.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::classic_cf::{CfState, ClassicModel};
use crate::error::{Error, Result};
use crate::ingest::Trajectory;
use crate::sim::{simulate, CarFollowing, SimConfig};

/// Rate-limited leader: a sinusoid riding on randomly chosen speed plateaus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeadProfile {
    pub base_speed: f64,
    pub sine_amplitude: f64,
    pub sine_period: f64,
    /// Plateau offsets drawn uniformly at each switch.
    pub step_levels: Vec<f64>,
    pub step_every: f64,
    /// Largest lead acceleration / deceleration magnitude.
    pub max_rate: f64,
}

impl Default for LeadProfile {
    fn default() -> Self {
        Self {
            base_speed: 18.0,
            sine_amplitude: 1.5,
            sine_period: 45.0,
            step_levels: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            step_every: 25.0,
            max_rate: 1.5,
        }
    }
}

impl LeadProfile {
    pub fn generate(&self, n: usize, dt: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut level = 0.0;
        let mut next_switch = self.step_every;
        let mut v = self.base_speed;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let t = i as f64 * dt;
            if t >= next_switch {
                level = self.step_levels[rng.gen_range(0..self.step_levels.len())];
                next_switch += self.step_every;
            }
            let target = self.base_speed
                + level
                + self.sine_amplitude * (2.0 * std::f64::consts::PI * t / self.sine_period).sin();
            if i > 0 {
                let limit = self.max_rate * dt;
                v += (target - v).clamp(-limit, limit);
            } else {
                v = target;
            }
            out.push(v.max(0.0));
        }
        out
    }
}

/// Equilibrium start for `model` behind a leader at `v`.
pub fn equilibrium_state(model: &ClassicModel, v: f64) -> CfState {
    let s = match model {
        ClassicModel::Ovrv(p) => p.equilibrium_spacing(v),
        ClassicModel::Idm(p) => p.equilibrium_spacing(v).unwrap_or(p.s0 + p.t_headway * v),
    };
    CfState::new(s, v, v)
}

/// Closed-loop follower trajectory of `model` from `init` behind `lead`.
pub fn follow_from(model: &dyn CarFollowing, init: CfState, lead: &[f64], dt: f64) -> Result<Trajectory> {
    let cfg = SimConfig { dt, ..SimConfig::default() };
    simulate(model, init, lead, &cfg)?.to_trajectory(dt, 0.0)
}

/// Closed-loop follower trajectory of a classical model started at equilibrium.
pub fn follow(model: &ClassicModel, lead: &[f64], dt: f64) -> Result<Trajectory> {
    let init = equilibrium_state(model, lead.first().copied().unwrap_or(0.0));
    follow_from(model, init, lead, dt)
}

/// Classical follower with extra thrust while the leader pulls away, extra
/// regenerative-style braking while closing in, and Gaussian acceleration noise.
#[derive(Debug, Clone)]
pub struct AsymmetricFollower {
    pub base: ClassicModel,
    pub accel_boost: f64,
    pub decel_boost: f64,
    pub dv_threshold: f64,
    noise: Vec<f64>,
}

impl AsymmetricFollower {
    pub fn new(base: ClassicModel, steps: usize, noise_std: f64, seed: u64) -> Result<Self> {
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            base,
            accel_boost: 0.4,
            decel_boost: -0.3,
            dv_threshold: 0.1,
            noise: (0..steps).map(|_| normal.sample(&mut rng)).collect(),
        })
    }

    pub fn extra(&self, st: &CfState) -> f64 {
        let dv = st.dv();
        if dv > self.dv_threshold {
            self.accel_boost
        } else if dv < -self.dv_threshold {
            self.decel_boost
        } else {
            0.0
        }
    }
}

impl CarFollowing for AsymmetricFollower {
    fn name(&self) -> String {
        format!("asymmetric-{}", self.base.kind())
    }

    fn accel(&self, history: &[CfState]) -> Result<f64> {
        let st = history.last().ok_or_else(|| Error::invalid("empty state history"))?;
        let noise = self.noise.get(history.len() - 1).copied().unwrap_or(0.0);
        Ok(self.base.accel(st)? + self.extra(st) + noise)
    }
}

/// Asymmetric-dynamics follower trajectory behind the default lead profile.
pub fn asymmetric_dataset(base: ClassicModel, n: usize, dt: f64, noise_std: f64, seed: u64) -> Result<Trajectory> {
    let lead = LeadProfile::default().generate(n, dt, seed);
    let follower = AsymmetricFollower::new(base, n, noise_std, seed.wrapping_add(0x5eed))?;
    follow_from(&follower, equilibrium_state(&base, lead[0]), &lead, dt)
}
