//! Classical car-following laws (OVRV, IDM) and their grid-search calibration.
//!
//! Relative speed is `dv = v_l - v` throughout the crate. The IDM desired gap is
//! written in terms of the approach rate `v - v_l = -dv`, so a follower closing in
//! on its leader asks for a larger gap:
//!
//! ```text
//! s_hat(v, dv) = s0 + T v - v dv / (2 sqrt(theta gamma))
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Trajectory;
use crate::sim::{self, rmse, CarFollowing, SimConfig};

/// Instantaneous car-following state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfState {
    /// Spacing to the leader.
    pub s: f64,
    /// Follower speed.
    pub v: f64,
    /// Leader speed.
    pub v_l: f64,
}

impl CfState {
    pub fn new(s: f64, v: f64, v_l: f64) -> Self {
        Self { s, v, v_l }
    }

    /// Relative speed `v_l - v`.
    pub fn dv(&self) -> f64 {
        self.v_l - self.v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OvrvParams {
    pub k1: f64,
    pub k2: f64,
    pub eta: f64,
    pub tau: f64,
}

impl OvrvParams {
    /// Calibrated values reported for the EV ACC dataset.
    pub const EV_ACC: OvrvParams = OvrvParams {
        k1: 0.0717,
        k2: 0.6541,
        eta: 17.9107,
        tau: 0.5452,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = self.k1 > 0.0 && self.k2 > 0.0 && self.eta >= 0.0 && self.tau > 0.0;
        let finite = [self.k1, self.k2, self.eta, self.tau].iter().all(|x| x.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid OVRV parameters {self:?}")))
        }
    }

    /// Equilibrium spacing at speed `v`.
    pub fn equilibrium_spacing(&self, v: f64) -> f64 {
        self.eta + self.tau * v
    }

    /// Head-to-tail string stability of the continuous-time law:
    /// `|G(jw)| <= 1` for all `w` iff `k1 tau^2 + 2 k2 tau >= 2`.
    pub fn is_string_stable(&self) -> bool {
        self.k1 * self.tau * self.tau + 2.0 * self.k2 * self.tau >= 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Maximum acceleration.
    pub theta: f64,
    /// Free-flow speed.
    pub v0: f64,
    /// Acceleration exponent.
    pub delta: f64,
    /// Minimum spacing.
    pub s0: f64,
    /// Time headway.
    pub t_headway: f64,
    /// Comfortable deceleration.
    pub gamma_idm: f64,
}

impl IdmParams {
    /// Calibrated values reported for the EV ACC dataset.
    pub const EV_ACC: IdmParams = IdmParams {
        theta: 1.6932,
        v0: 40.0,
        delta: 5.0,
        s0: 6.0,
        t_headway: 1.0325,
        gamma_idm: 10.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.theta, self.v0, self.delta, self.s0, self.t_headway, self.gamma_idm];
        if all.iter().all(|&x| x > 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid IDM parameters {self:?}")))
        }
    }

    pub fn desired_gap(&self, v: f64, dv: f64) -> f64 {
        self.s0 + self.t_headway * v - v * dv / (2.0 * (self.theta * self.gamma_idm).sqrt())
    }

    /// Equilibrium spacing at speed `v` (dv = 0), or `None` at or above `v0`.
    pub fn equilibrium_spacing(&self, v: f64) -> Option<f64> {
        let free = 1.0 - (v / self.v0).powf(self.delta);
        (free > 0.0).then(|| (self.s0 + self.t_headway * v) / free.sqrt())
    }
}

pub fn ovrv_accel(p: &OvrvParams, st: &CfState) -> f64 {
    p.k1 * (st.s - p.eta - p.tau * st.v) + p.k2 * (st.v_l - st.v)
}

pub fn idm_accel(p: &IdmParams, st: &CfState) -> Result<f64> {
    if !(st.s > 0.0) {
        return Err(Error::invalid(format!("IDM needs positive spacing, got {}", st.s)));
    }
    let gap = p.desired_gap(st.v, st.dv());
    Ok(p.theta * (1.0 - (st.v / p.v0).powf(p.delta) - (gap / st.s).powi(2)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Ovrv,
    Idm,
}

impl ModelKind {
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Ovrv => &["k1", "k2", "eta", "tau"],
            ModelKind::Idm => &["theta", "v0", "delta", "s0", "t_headway", "gamma_idm"],
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ovrv => "ovrv",
            ModelKind::Idm => "idm",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ovrv" => Ok(ModelKind::Ovrv),
            "idm" => Ok(ModelKind::Idm),
            other => Err(Error::invalid(format!("unknown classical model `{other}`"))),
        }
    }
}

/// A parameterised classical model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum ClassicModel {
    Ovrv(OvrvParams),
    Idm(IdmParams),
}

impl ClassicModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            ClassicModel::Ovrv(_) => ModelKind::Ovrv,
            ClassicModel::Idm(_) => ModelKind::Idm,
        }
    }

    pub fn accel(&self, st: &CfState) -> Result<f64> {
        match self {
            ClassicModel::Ovrv(p) => Ok(ovrv_accel(p, st)),
            ClassicModel::Idm(p) => idm_accel(p, st),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ClassicModel::Ovrv(p) => p.validate(),
            ClassicModel::Idm(p) => p.validate(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match *self {
            ClassicModel::Ovrv(p) => vec![p.k1, p.k2, p.eta, p.tau],
            ClassicModel::Idm(p) => vec![p.theta, p.v0, p.delta, p.s0, p.t_headway, p.gamma_idm],
        }
    }

    /// Builds a model from values ordered as in [`ModelKind::param_names`].
    pub fn from_values(kind: ModelKind, v: &[f64]) -> Result<Self> {
        let want = kind.param_names().len();
        if v.len() != want {
            return Err(Error::invalid(format!("{kind} takes {want} parameters, got {}", v.len())));
        }
        let m = match kind {
            ModelKind::Ovrv => ClassicModel::Ovrv(OvrvParams {
                k1: v[0],
                k2: v[1],
                eta: v[2],
                tau: v[3],
            }),
            ModelKind::Idm => ClassicModel::Idm(IdmParams {
                theta: v[0],
                v0: v[1],
                delta: v[2],
                s0: v[3],
                t_headway: v[4],
                gamma_idm: v[5],
            }),
        };
        m.validate()?;
        Ok(m)
    }
}

impl CarFollowing for ClassicModel {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn accel(&self, history: &[CfState]) -> Result<f64> {
        let st = history
            .last()
            .ok_or_else(|| Error::invalid("empty state history"))?;
        ClassicModel::accel(self, st)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAxis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl ParamAxis {
    pub fn new(name: &str, lo: f64, hi: f64, steps: usize) -> Self {
        Self {
            name: name.to_string(),
            lo,
            hi,
            steps,
        }
    }

    /// The `i`th grid value; both endpoints are reproduced exactly.
    pub fn value(&self, i: usize) -> f64 {
        let f = i as f64 / (self.steps - 1) as f64;
        self.lo * (1.0 - f) + self.hi * f
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.steps).map(|i| self.value(i)).collect()
    }
}

/// Cartesian parameter grid, one axis per model parameter in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<ParamAxis>,
}

impl GridSpec {
    pub fn new(kind: ModelKind, axes: Vec<ParamAxis>) -> Result<Self> {
        let names = kind.param_names();
        if axes.len() != names.len() || axes.iter().zip(names).any(|(a, n)| a.name != *n) {
            return Err(Error::invalid(format!(
                "{kind} grid needs axes {:?} in that order",
                names
            )));
        }
        for a in &axes {
            if !(a.lo < a.hi) || a.steps < 2 || !a.lo.is_finite() || !a.hi.is_finite() {
                return Err(Error::invalid(format!(
                    "axis `{}` needs lo < hi and steps >= 2 (got {}..{} x {})",
                    a.name, a.lo, a.hi, a.steps
                )));
            }
        }
        Ok(Self { axes })
    }

    /// Default search ranges; both bracket the calibrated EV values.
    pub fn default_for(kind: ModelKind) -> Self {
        let axes = match kind {
            ModelKind::Ovrv => vec![
                ParamAxis::new("k1", 0.01, 0.2, 20),
                ParamAxis::new("k2", 0.1, 1.0, 19),
                ParamAxis::new("eta", 5.0, 30.0, 26),
                ParamAxis::new("tau", 0.1, 2.0, 20),
            ],
            ModelKind::Idm => vec![
                ParamAxis::new("theta", 0.5, 3.0, 11),
                ParamAxis::new("v0", 30.0, 40.0, 3),
                ParamAxis::new("delta", 2.0, 6.0, 5),
                ParamAxis::new("s0", 2.0, 10.0, 9),
                ParamAxis::new("t_headway", 0.5, 2.0, 16),
                ParamAxis::new("gamma_idm", 1.0, 10.0, 10),
            ],
        };
        Self { axes }
    }

    pub fn cells(&self) -> usize {
        self.axes.iter().map(|a| a.steps).product()
    }

    /// Parameter values of cell `index` in row-major order (last axis fastest).
    pub fn point(&self, mut index: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes.len()];
        for (k, axis) in self.axes.iter().enumerate().rev() {
            out[k] = axis.value(index % axis.steps);
            index /= axis.steps;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub model: ClassicModel,
    pub spacing_rmse: f64,
    pub cell_index: usize,
    pub cells_evaluated: usize,
    pub cells_skipped: usize,
    pub grid: GridSpec,
}

/// Closed-loop spacing RMSE of `model` replaying `traj`'s lead speed from its first state.
pub fn spacing_rmse(model: &dyn CarFollowing, traj: &Trajectory, cfg: &SimConfig) -> Result<f64> {
    let roll = sim::simulate(model, traj.state(0), &traj.v_l, cfg)?;
    rmse(&roll.s, &traj.s)
}

/// Exhaustive grid search minimising closed-loop spacing RMSE.
///
/// Invalid cells are skipped. Ties go to the lowest row-major cell index so the
/// result does not depend on evaluation order.
pub fn calibrate(kind: ModelKind, traj: &Trajectory, grid: &GridSpec, cfg: &SimConfig) -> Result<Calibration> {
    let grid = GridSpec::new(kind, grid.axes.clone())?;
    if traj.duration() < 2.0 {
        return Err(Error::invalid("calibration needs at least 2 s of trajectory"));
    }
    let cfg = SimConfig { dt: traj.dt, ..*cfg };
    let scored: Vec<Option<(f64, usize)>> = (0..grid.cells())
        .into_par_iter()
        .map(|idx| {
            let model = ClassicModel::from_values(kind, &grid.point(idx)).ok()?;
            let err = spacing_rmse(&model, traj, &cfg).ok()?;
            err.is_finite().then_some((err, idx))
        })
        .collect();
    let skipped = scored.iter().filter(|s| s.is_none()).count();
    let (best_err, best_idx) = scored
        .into_iter()
        .flatten()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .ok_or(Error::EmptyGrid)?;
    Ok(Calibration {
        model: ClassicModel::from_values(kind, &grid.point(best_idx))?,
        spacing_rmse: best_err,
        cell_index: best_idx,
        cells_evaluated: grid.cells() - skipped,
        cells_skipped: skipped,
        grid,
    })
}
